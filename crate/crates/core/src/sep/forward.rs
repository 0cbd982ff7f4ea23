use crate::autodiff::{Tape, Var};
use crate::backbone::{encoder_layer_forward, pool_and_project, EncoderKind, EncoderWeights, TokenSequence};
use crate::error::{Error, Result};

use super::{fuse, select_representative, FusionWeights, SepConfig};

/// Inserts `prompt[L_p, d]`, broadcast over the batch, at the sequence's
/// prompt position. A sequence that already carries placeholder prompt
/// positions has them replaced instead.
pub fn append_prompt(tape: &mut Tape, seq: TokenSequence, prompt: Var) -> Result<TokenSequence> {
    let (shape, d, n) = (tape.shape(prompt).to_vec(), seq.width(tape), seq.batch(tape));
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::Config(format!("prompt {shape:?} does not match token width {d}")));
    }
    let block = tape.broadcast_batch(prompt, n)?;
    if seq.prompt_len > 0 {
        if shape[0] != seq.prompt_len {
            return Err(Error::Config(format!(
                "prompt of length {} for {} placeholder positions",
                shape[0], seq.prompt_len
            )));
        }
        return replace_prompt(tape, seq, block);
    }
    let len = seq.len(tape);
    let mut parts = Vec::with_capacity(3);
    if seq.prompt_start > 0 {
        parts.push(tape.slice(seq.tokens, 0, 0, seq.prompt_start)?);
    }
    parts.push(block);
    if seq.prompt_start < len {
        parts.push(tape.slice(seq.tokens, 0, seq.prompt_start, len - seq.prompt_start)?);
    }
    let tokens = tape.concat(&parts, 0)?;
    let pool_index = if seq.pool_index >= seq.prompt_start {
        seq.pool_index + shape[0]
    } else {
        seq.pool_index
    };
    Ok(TokenSequence {
        tokens,
        prompt_start: seq.prompt_start,
        prompt_len: shape[0],
        pool_index,
    })
}

/// Pretrained segment (all non-prompt positions, in order) and the prompt
/// segment, which is `None` for a prompt-free sequence.
pub fn split_tokens(tape: &mut Tape, seq: &TokenSequence) -> Result<(Var, Option<Var>)> {
    let len = seq.len(tape);
    if seq.prompt_len == 0 {
        return Ok((seq.tokens, None));
    }
    let end = seq.prompt_start + seq.prompt_len;
    let prompt = tape.slice(seq.tokens, 0, seq.prompt_start, seq.prompt_len)?;
    let mut parts = Vec::with_capacity(2);
    if seq.prompt_start > 0 {
        parts.push(tape.slice(seq.tokens, 0, 0, seq.prompt_start)?);
    }
    if end < len {
        parts.push(tape.slice(seq.tokens, 0, end, len - end)?);
    }
    let pretrained = match parts.as_slice() {
        [] => return Err(Error::Contract("sequence has no pretrained tokens".into())),
        [only] => *only,
        _ => tape.concat(&parts, 0)?,
    };
    Ok((pretrained, Some(prompt)))
}

/// Inverse of [`split_tokens`] for the layout recorded in `seq`.
pub fn merge_tokens(tape: &mut Tape, seq: &TokenSequence, pretrained: Var, prompt: Var) -> Result<Var> {
    let p_len = tape.shape(pretrained)[0];
    let mut parts = Vec::with_capacity(3);
    if seq.prompt_start > 0 {
        parts.push(tape.slice(pretrained, 0, 0, seq.prompt_start)?);
    }
    parts.push(prompt);
    if seq.prompt_start < p_len {
        parts.push(tape.slice(pretrained, 0, seq.prompt_start, p_len - seq.prompt_start)?);
    }
    tape.concat(&parts, 0)
}

/// Swaps the prompt segment for `segment[L_p, N, d]`.
pub fn replace_prompt(tape: &mut Tape, seq: TokenSequence, segment: Var) -> Result<TokenSequence> {
    let want = [seq.prompt_len, seq.batch(tape), seq.width(tape)];
    if seq.prompt_len == 0 || tape.shape(segment) != want {
        return Err(Error::Contract(format!(
            "replacement segment {:?} does not fit prompt segment {want:?}",
            tape.shape(segment)
        )));
    }
    let (pretrained, _) = split_tokens(tape, &seq)?;
    let tokens = merge_tokens(tape, &seq, pretrained, segment)?;
    Ok(seq.with_tokens(tokens))
}

/// Runs every layer with no prompt surgery and returns the final tokens.
pub fn plain_forward(tape: &mut Tape, encoder: &EncoderWeights<Var>, n_heads: usize, kind: EncoderKind, seq: &TokenSequence) -> Result<Var> {
    let mut x = seq.tokens;
    for layer in &encoder.layers {
        x = encoder_layer_forward(tape, layer, x, n_heads, kind.causal())?;
    }
    Ok(x)
}

/// State after one layer of the enhanced recurrence.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// 1-based index of the layer that produced `output`.
    pub layer: usize,
    pub output: Var,
    /// Source positions (within the pretrained segment) fused after this layer.
    pub selected: Option<Vec<Vec<usize>>>,
    pub fused_prompt: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedOutput {
    /// Pooled, projected, unit-norm embedding `[N, d_joint]`.
    pub embedding: Var,
    pub tokens: TokenSequence,
    pub trace: Vec<LayerTrace>,
}

/// Attaches `prompt` to `seq`, then alternates layers with fusion: after
/// each scheduled layer `l`, the prompt segment becomes the fusion of the
/// selected pretrained tokens with it, and layer `l + 1` consumes the
/// result. Unscheduled layers pass the prompt segment through untouched.
#[allow(clippy::too_many_arguments)]
pub fn enhanced_forward(
    tape: &mut Tape,
    encoder: &EncoderWeights<Var>,
    n_heads: usize,
    kind: EncoderKind,
    seq: TokenSequence,
    prompt: Var,
    sep: &SepConfig,
    fusion_weights: &[FusionWeights<Var>],
    keep_trace: bool,
) -> Result<EnhancedOutput> {
    let n_layers = encoder.layers.len();
    let schedule = sep.schedule(n_layers);
    if let Some(bad) = schedule.iter().find(|&&l| l == 0 || l >= n_layers) {
        return Err(Error::Config(format!("insertion layer {bad} outside 1..={}", n_layers.saturating_sub(1))));
    }
    if sep.fusion_is_parameterized() && fusion_weights.len() != schedule.len() {
        return Err(Error::Config(format!(
            "{} fusion weight sets for {} insertion layers",
            fusion_weights.len(),
            schedule.len()
        )));
    }
    let mut seq = append_prompt(tape, seq, prompt)?;
    let k = seq.prompt_len;
    let mut trace: Vec<LayerTrace> = Vec::new();
    for (i, layer) in encoder.layers.iter().enumerate() {
        if let Some(slot) = schedule.iter().position(|&l| l == i) {
            let (pretrained, prompt_seg) = split_tokens(tape, &seq)?;
            let prompt_seg = prompt_seg.expect("prompt attached above");
            let (selected, rows) = select_representative(tape, pretrained, k, sep.selection(kind))?;
            let fused = fuse(tape, sep.fusion, selected, prompt_seg, sep.n_heads_tfm, fusion_weights.get(slot))?;
            seq = seq.with_tokens(merge_tokens(tape, &seq, pretrained, fused)?);
            if let Some(last) = trace.last_mut() {
                last.selected = Some(rows);
                last.fused_prompt = Some(fused);
            }
        }
        let x = encoder_layer_forward(tape, layer, seq.tokens, n_heads, kind.causal())?;
        seq = seq.with_tokens(x);
        if keep_trace {
            trace.push(LayerTrace {
                layer: i + 1,
                output: x,
                selected: None,
                fused_prompt: None,
            });
        }
    }
    let embedding = pool_and_project(tape, &encoder.head, seq.tokens, seq.pool_index)?;
    Ok(EnhancedOutput {
        embedding,
        tokens: seq,
        trace,
    })
}

/// Deep prompting: `prompts[i]` occupies the prompt segment entering layer
/// `i + 1`, discarding whatever the previous layer left there.
pub fn ivlp_forward(
    tape: &mut Tape,
    encoder: &EncoderWeights<Var>,
    n_heads: usize,
    kind: EncoderKind,
    seq: TokenSequence,
    prompts: &[Var],
) -> Result<Var> {
    if prompts.len() != encoder.layers.len() {
        return Err(Error::Config(format!(
            "{} per-layer prompts for {} layers",
            prompts.len(),
            encoder.layers.len()
        )));
    }
    let mut seq = append_prompt(tape, seq, prompts[0])?;
    let n = seq.batch(tape);
    for (i, layer) in encoder.layers.iter().enumerate() {
        if i > 0 {
            let block = tape.broadcast_batch(prompts[i], n)?;
            seq = replace_prompt(tape, seq, block)?;
        }
        let x = encoder_layer_forward(tape, layer, seq.tokens, n_heads, kind.causal())?;
        seq = seq.with_tokens(x);
    }
    pool_and_project(tape, &encoder.head, seq.tokens, seq.pool_index)
}
