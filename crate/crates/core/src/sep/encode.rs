use crate::autodiff::{Tape, Var};
use crate::backbone::{
    embed_image, embed_text, encode_plain, BackboneConfig, BackboneWeights, EncoderKind, TextTemplate,
};
use crate::error::{Error, Result};

use super::{enhanced_forward, ivlp_forward, ModalityPrompts, PromptMode, SepConfig};

fn expect_prompts(kind: EncoderKind, mode: PromptMode, prompts: &ModalityPrompts<Var>, n_layers: usize) -> Result<()> {
    let want = match mode {
        PromptMode::Sep => 1,
        PromptMode::Ivlp => n_layers,
        PromptMode::Frozen => 0,
    };
    if prompts.prompts.len() != want {
        return Err(Error::Contract(format!(
            "{} encoder in {mode:?} mode needs {want} prompts, got {}",
            kind.name(),
            prompts.prompts.len()
        )));
    }
    Ok(())
}

/// Class embeddings `[classes, d_joint]` under the configured text prompting.
pub fn encode_text_classes(
    tape: &mut Tape,
    w: &BackboneWeights<Var>,
    config: &BackboneConfig,
    sep: &SepConfig,
    prompts: &ModalityPrompts<Var>,
    classes: &[usize],
) -> Result<Var> {
    let kind = EncoderKind::Text;
    expect_prompts(kind, sep.text_mode, prompts, config.n_layers)?;
    if sep.text_mode == PromptMode::Frozen {
        let seq = embed_text(tape, &w.text_embedding, config, classes, &TextTemplate::hand_crafted())?;
        return encode_plain(tape, &w.text, config, kind, &seq);
    }
    let template = TextTemplate::learnable(sep.text_prompt_len);
    let seq = embed_text(tape, &w.text_embedding, config, classes, &template)?;
    match sep.text_mode {
        PromptMode::Sep => Ok(enhanced_forward(
            tape,
            &w.text,
            config.n_heads,
            kind,
            seq,
            prompts.prompts[0],
            sep,
            &prompts.fusion,
            false,
        )?
        .embedding),
        _ => ivlp_forward(tape, &w.text, config.n_heads, kind, seq, &prompts.prompts),
    }
}

/// Image embeddings `[N, d_joint]` for `patches[N, P, patch_dim]`.
pub fn encode_images(
    tape: &mut Tape,
    w: &BackboneWeights<Var>,
    config: &BackboneConfig,
    sep: &SepConfig,
    prompts: &ModalityPrompts<Var>,
    patches: Var,
) -> Result<Var> {
    let kind = EncoderKind::Visual;
    expect_prompts(kind, sep.visual_mode, prompts, config.n_layers)?;
    let seq = embed_image(tape, &w.visual_embedding, config, patches)?;
    match sep.visual_mode {
        PromptMode::Frozen => encode_plain(tape, &w.visual, config, kind, &seq),
        PromptMode::Sep => Ok(enhanced_forward(
            tape,
            &w.visual,
            config.n_heads,
            kind,
            seq,
            prompts.prompts[0],
            sep,
            &prompts.fusion,
            false,
        )?
        .embedding),
        PromptMode::Ivlp => ivlp_forward(tape, &w.visual, config.n_heads, kind, seq, &prompts.prompts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;
    use crate::sep::PromptParams;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_modes_match_frozen_encoders() {
        let mut b = Backbone::init(BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        b.freeze();
        let sep = SepConfig {
            visual_mode: PromptMode::Frozen,
            text_mode: PromptMode::Frozen,
            ..SepConfig::default()
        };
        let prompts = PromptParams::init(&sep, &b, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(prompts.count(), 0);
        let patches = Tensor::uniform(&mut ChaCha8Rng::seed_from_u64(3), &[3, 16, 12], -1.0, 1.0);
        let mut tape = Tape::new();
        let w = b.bind(&mut tape);
        let p = prompts.bind(&mut tape);
        let x = tape.constant(patches.clone());
        let img = encode_images(&mut tape, &w, &b.config, &sep, &p.visual, x).unwrap();
        let txt = encode_text_classes(&mut tape, &w, &b.config, &sep, &p.text, &[0, 4, 2]).unwrap();
        assert_eq!(tape.value(img), &b.encode_frozen_image(&patches).unwrap());
        assert_eq!(tape.value(txt), &b.encode_frozen_text(&[0, 4, 2]).unwrap());
    }

    #[test]
    fn text_prompt_changes_class_embeddings() {
        let mut b = Backbone::init(BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        b.freeze();
        let sep = SepConfig::default();
        let mut prompts = PromptParams::init(&sep, &b, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let run = |prompts: &PromptParams<Tensor>| {
            let mut tape = Tape::new();
            let w = b.bind(&mut tape);
            let p = prompts.bind(&mut tape);
            let out = encode_text_classes(&mut tape, &w, &b.config, &sep, &p.text, &[1, 2]).unwrap();
            tape.value(out).clone()
        };
        let before = run(&prompts);
        prompts.text.prompts[0].data_mut()[3] += 0.5;
        let after = run(&prompts);
        assert!(before.max_abs_diff(&after) > 1e-6);
        for r in 0..2 {
            let norm: f64 = after.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }
}
