use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::{EncoderWeights, HeadWeights, LayerWeights, TextEmbedding, VisualEmbedding};
use super::text::TextTemplate;
use super::{BackboneConfig, LAYER_NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Visual,
    Text,
}

impl EncoderKind {
    /// Text attends causally; vision attends everywhere.
    pub fn causal(self) -> bool {
        matches!(self, EncoderKind::Text)
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Visual => "visual",
            EncoderKind::Text => "text",
        }
    }
}

/// Token matrix `[L, N, d]` with the location of its prompt segment.
///
/// Positions outside `prompt_start..prompt_start + prompt_len` are the
/// pretrained tokens. Visual sequences keep the prompt after every pretrained
/// token; text sequences place it between SOS and the class token so the
/// causally attending EOS position can read it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Var,
    pub prompt_start: usize,
    pub prompt_len: usize,
    /// Position pooled into the final embedding (class token or EOS).
    pub pool_index: usize,
}

impl TokenSequence {
    pub fn len(&self, tape: &Tape) -> usize {
        tape.shape(self.tokens)[0]
    }

    pub fn batch(&self, tape: &Tape) -> usize {
        tape.shape(self.tokens)[1]
    }

    pub fn width(&self, tape: &Tape) -> usize {
        tape.shape(self.tokens)[2]
    }

    /// Number of pretrained (non-prompt) positions.
    pub fn pretrained_len(&self, tape: &Tape) -> usize {
        self.len(tape) - self.prompt_len
    }

    pub fn with_tokens(self, tokens: Var) -> Self {
        Self { tokens, ..self }
    }
}

/// Patch features `[N, P, patch_dim]` to tokens `[P + 1, N, d]` with the
/// class token first and positional embeddings added.
pub fn embed_image(
    tape: &mut Tape,
    w: &VisualEmbedding<Var>,
    config: &BackboneConfig,
    patches: Var,
) -> Result<TokenSequence> {
    let shape = tape.shape(patches).to_vec();
    if shape.len() != 3 || shape[1] != config.n_patches() || shape[2] != config.patch_dim {
        return Err(Error::Config(format!(
            "patch batch {shape:?} does not match [N, {}, {}]",
            config.n_patches(),
            config.patch_dim
        )));
    }
    let n = shape[0];
    let proj = tape.matmul(patches, w.patch_weight)?;
    let proj = tape.add_bias(proj, w.patch_bias)?;
    let proj = tape.permute(proj, &[1, 0, 2])?;
    let cls = tape.broadcast_batch(w.class_embedding, n)?;
    let seq = tape.concat(&[cls, proj], 0)?;
    let pos = tape.broadcast_batch(w.positions, n)?;
    let tokens = tape.add(seq, pos)?;
    Ok(TokenSequence {
        tokens,
        prompt_start: config.visual_tokens,
        prompt_len: 0,
        pool_index: 0,
    })
}

/// Embeds `template` once per class into `[text_len, classes, d]`.
///
/// Learnable template positions hold the `X` embedding without a positional
/// term and form the sequence's prompt segment.
pub fn embed_text(
    tape: &mut Tape,
    w: &TextEmbedding<Var>,
    config: &BackboneConfig,
    classes: &[usize],
    template: &TextTemplate,
) -> Result<TokenSequence> {
    if classes.is_empty() {
        return Err(Error::Contract("embed_text needs at least one class".into()));
    }
    let len = config.text_len;
    let n = classes.len();
    let d = config.d_model;
    let per_class: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| template.token_ids(c, len, config.vocab_size))
        .collect::<Result<_>>()?;
    let (prompt_start, prompt_len) = template.prompt_range();

    let mut ids = Vec::with_capacity(len * n);
    let mut positions = Vec::with_capacity(len * n);
    for p in 0..len {
        for class_ids in &per_class {
            ids.push(class_ids[p]);
            positions.push(p);
        }
    }
    let tok = tape.index_rows(w.tokens, &ids)?;
    let tok = tape.reshape(tok, &[len, n, d])?;
    let pos = tape.index_rows(w.positions, &positions)?;
    let pos = tape.reshape(pos, &[len, n, d])?;
    let pos = if prompt_len > 0 {
        let mut mask = Tensor::ones(&[len, n, d]);
        for p in prompt_start..prompt_start + prompt_len {
            mask.data_mut()[p * n * d..(p + 1) * n * d].fill(0.0);
        }
        let mask = tape.constant(mask);
        tape.mul(pos, mask)?
    } else {
        pos
    };
    let tokens = tape.add(tok, pos)?;
    Ok(TokenSequence {
        tokens,
        prompt_start: if prompt_len > 0 { prompt_start } else { len },
        prompt_len,
        pool_index: template.eos_position(),
    })
}

/// One pre-norm block: `x + attn(ln1(x))`, then `+ mlp(ln2(x))`.
pub fn encoder_layer_forward(
    tape: &mut Tape,
    w: &LayerWeights<Var>,
    x: Var,
    n_heads: usize,
    causal: bool,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let d = tape.shape(w.ln1_gain)[0];
    if shape.len() != 3 || shape[2] != d {
        return Err(Error::dim("encoder_layer", &shape, &[d]));
    }
    let h = tape.layer_norm(x, w.ln1_gain, w.ln1_bias, LAYER_NORM_EPS)?;
    let q = linear(tape, h, w.wq, w.bq)?;
    let k = linear(tape, h, w.wk, w.bk)?;
    let v = linear(tape, h, w.wv, w.bv)?;
    let attn = self_attention(tape, q, k, v, n_heads, causal)?;
    let o = linear(tape, attn, w.wo, w.bo)?;
    let x = tape.add(x, o)?;

    let h = tape.layer_norm(x, w.ln2_gain, w.ln2_bias, LAYER_NORM_EPS)?;
    let h = linear(tape, h, w.w1, w.b1)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, w.w2, w.b2)?;
    tape.add(x, h)
}

/// `x · weight + bias` over the last axis.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    tape.add_bias(y, bias)
}

/// Scaled dot-product attention over `[L, N, d]` inputs split into heads.
fn self_attention(tape: &mut Tape, q: Var, k: Var, v: Var, n_heads: usize, causal: bool) -> Result<Var> {
    let (l, n, d) = {
        let s = tape.shape(q);
        (s[0], s[1], s[2])
    };
    let dh = d / n_heads;
    let heads = |t: &mut Tape, x: Var| -> Result<Var> {
        let x = t.reshape(x, &[l, n, n_heads, dh])?;
        let x = t.permute(x, &[1, 2, 0, 3])?;
        t.reshape(x, &[n * n_heads, l, dh])
    };
    let q = heads(tape, q)?;
    let k = heads(tape, k)?;
    let v = heads(tape, v)?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = if causal {
        tape.causal_softmax(scores)?
    } else {
        tape.softmax_rows(scores)?
    };
    let out = tape.batch_matmul(attn, v, false)?;
    let out = tape.reshape(out, &[n, n_heads, l, dh])?;
    let out = tape.permute(out, &[2, 0, 1, 3])?;
    tape.reshape(out, &[l, n, d])
}

/// Token at `index` of `[L, N, d]`, normalized, projected and scaled to unit norm.
pub fn pool_and_project(tape: &mut Tape, head: &HeadWeights<Var>, x: Var, index: usize) -> Result<Var> {
    let (n, d) = {
        let s = tape.shape(x);
        (s[1], s[2])
    };
    let pooled = tape.slice(x, 0, index, 1)?;
    let pooled = tape.reshape(pooled, &[n, d])?;
    let pooled = tape.layer_norm(pooled, head.ln_gain, head.ln_bias, LAYER_NORM_EPS)?;
    let proj = tape.matmul(pooled, head.proj)?;
    Ok(tape.l2_normalize(proj))
}

/// Every layer in order, then pooling: the encoder without any prompt surgery.
pub fn encode_plain(
    tape: &mut Tape,
    w: &EncoderWeights<Var>,
    config: &BackboneConfig,
    kind: EncoderKind,
    seq: &TokenSequence,
) -> Result<Var> {
    let mut x = seq.tokens;
    for layer in &w.layers {
        x = encoder_layer_forward(tape, layer, x, config.n_heads, kind.causal())?;
    }
    pool_and_project(tape, &w.head, x, seq.pool_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::params::BackboneParams;
    use crate::backbone::text::{class_token, TextTemplate};
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            visual_tokens: 5,
            patch_dim: 3,
            text_len: 7,
            vocab_size: 12,
            d_joint: 4,
            tau: 0.07,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn image_embedding_shape_and_class_token() {
        let config = BackboneConfig::default();
        let params = BackboneParams::init(&config, &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new();
        let w = params.bind(&mut tape, false);
        let patches = tape.constant(Tensor::zeros(&[2, 16, config.patch_dim]));
        let seq = embed_image(&mut tape, &w.visual_embedding, &config, patches).unwrap();
        assert_eq!(tape.shape(seq.tokens), &[17, 2, 32]);
        assert_eq!((seq.prompt_start, seq.prompt_len), (17, 0));
        let tokens = tape.value(seq.tokens);
        for j in 0..32 {
            let expected = params.visual_embedding.class_embedding.data()[j]
                + params.visual_embedding.positions.data()[j];
            assert_eq!(tokens.at(&[0, 1, j]), expected);
        }
    }

    #[test]
    fn image_embedding_rejects_bad_patch_dim() {
        let config = small_config();
        let params = BackboneParams::init(&config, &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new();
        let w = params.bind(&mut tape, false);
        let patches = tape.constant(Tensor::zeros(&[2, 4, 5]));
        assert!(matches!(
            embed_image(&mut tape, &w.visual_embedding, &config, patches),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn text_embedding_substitutes_slot() {
        let config = small_config();
        let params = BackboneParams::init(&config, &mut ChaCha8Rng::seed_from_u64(2));
        let mut tape = Tape::new();
        let w = params.bind(&mut tape, false);
        let seq = embed_text(&mut tape, &w.text_embedding, &config, &[3, 4], &TextTemplate::hand_crafted()).unwrap();
        assert_eq!(tape.shape(seq.tokens), &[7, 2, 8]);
        assert_eq!(seq.pool_index, 6);
        let tokens = tape.value(seq.tokens);
        let emb = &params.text_embedding;
        for j in 0..8 {
            let expected = emb.tokens.at(&[class_token(3), j]) + emb.positions.at(&[5, j]);
            assert_eq!(tokens.at(&[5, 0, j]), expected);
        }
        for p in 0..7 {
            let same = (0..8).all(|j| tokens.at(&[p, 0, j]) == tokens.at(&[p, 1, j]));
            assert_eq!(same, p != 5, "position {p}");
        }
    }

    #[test]
    fn learnable_template_yields_six_prompt_positions() {
        let config = BackboneConfig::default();
        let params = BackboneParams::init(&config, &mut ChaCha8Rng::seed_from_u64(2));
        let mut tape = Tape::new();
        let w = params.bind(&mut tape, false);
        let seq = embed_text(&mut tape, &w.text_embedding, &config, &[0, 1, 2], &TextTemplate::learnable(6)).unwrap();
        assert_eq!((seq.prompt_start, seq.prompt_len), (1, 6));
        assert_eq!(seq.pool_index, 8);
        assert_eq!(seq.pretrained_len(&tape), 10);
    }

    #[test]
    fn layer_preserves_shape_and_zero_weights_are_identity() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = BackboneParams::init(&config, &mut rng);
        let zero = params.visual.layers[0].map(&mut |t| Tensor::zeros(t.shape()));
        for len in [1, 5, 9] {
            let mut tape = Tape::new();
            let input = Tensor::uniform(&mut rng, &[len, 3, 8], -1.0, 1.0);
            let x = tape.constant(input.clone());
            let w = params.visual.layers[0].map(&mut |t| tape.constant(t.clone()));
            let y = encoder_layer_forward(&mut tape, &w, x, 2, false).unwrap();
            assert_eq!(tape.shape(y), &[len, 3, 8]);
            let wz = zero.map(&mut |t| tape.constant(t.clone()));
            let y = encoder_layer_forward(&mut tape, &wz, x, 2, true).unwrap();
            assert_eq!(tape.value(y), &input);
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = BackboneParams::init(&config, &mut rng);
        let layer = params.text.layers[1].clone();
        let x = Tensor::uniform(&mut rng, &[4, 2, 8], -1.0, 1.0);
        let probe = Tensor::uniform(&mut rng, &[4, 2, 8], -1.0, 1.0);
        let mut inputs = vec![x];
        layer.for_each("", &mut |_, t| inputs.push(t.clone()));
        for causal in [false, true] {
            let report = check_gradients(&inputs, 1e-5, |tape, v| {
                let w = LayerWeights {
                    ln1_gain: v[1],
                    ln1_bias: v[2],
                    wq: v[3],
                    bq: v[4],
                    wk: v[5],
                    bk: v[6],
                    wv: v[7],
                    bv: v[8],
                    wo: v[9],
                    bo: v[10],
                    ln2_gain: v[11],
                    ln2_bias: v[12],
                    w1: v[13],
                    b1: v[14],
                    w2: v[15],
                    b2: v[16],
                };
                let y = encoder_layer_forward(tape, &w, v[0], 2, causal)?;
                let p = tape.constant(probe.clone());
                let y = tape.mul(y, p)?;
                Ok(tape.sum(y))
            })
            .unwrap();
            assert!(report.max_rel_error <= 1e-4, "causal={causal}: {report:?}");
        }
    }
}
