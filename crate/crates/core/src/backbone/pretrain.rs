use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::{adam_step, AdamState};

use super::{embed_image, embed_text, encode_plain, Backbone, BackboneParams, EncoderKind, TextTemplate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Distinct classes per step; each contributes one image/text pair.
    pub batch_classes: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            lr: 5e-4,
            batch_classes: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

/// Symmetric InfoNCE between image embeddings and hand-crafted-template class
/// embeddings. `images` is `[N, patches, patch_dim]` with one label per row.
pub fn contrastive_pretrain(
    backbone: &Backbone,
    images: &Tensor,
    labels: &[usize],
    config: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<(BackboneParams, PretrainReport)> {
    if backbone.is_frozen() {
        return Err(Error::Contract("cannot pretrain a frozen backbone".into()));
    }
    if images.rank() != 3 || images.shape()[0] != labels.len() {
        return Err(Error::dim("contrastive_pretrain", images.shape(), &[labels.len()]));
    }
    if !(config.lr > 0.0) || config.batch_classes < 2 {
        return Err(Error::Config("pretraining needs lr > 0 and batch_classes >= 2".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Contract("pretraining needs at least two classes".into()));
    }
    let batch = config.batch_classes.min(classes.len());
    let per_image = images.shape()[1] * images.shape()[2];

    let mut params = backbone.params.clone();
    let mut flat = Vec::new();
    params.for_each(&mut |_, t| flat.push(t.clone()));
    let mut adam = AdamState::new(&flat);
    let mut report = PretrainReport::default();
    let template = TextTemplate::hand_crafted();

    for step in 0..config.steps {
        let mut chosen = classes.clone();
        chosen.shuffle(rng);
        chosen.truncate(batch);
        let mut pixels = Vec::with_capacity(batch * per_image);
        for c in &chosen {
            let i = *by_class[c].choose(rng).expect("non-empty class");
            pixels.extend_from_slice(&images.data()[i * per_image..(i + 1) * per_image]);
        }
        let pixels = Tensor::new(&[batch, images.shape()[1], images.shape()[2]], pixels)?;

        let mut tape = Tape::new();
        let w = params.bind(&mut tape, true);
        let x = tape.constant(pixels);
        let seq = embed_image(&mut tape, &w.visual_embedding, &backbone.config, x)?;
        let img = encode_plain(&mut tape, &w.visual, &backbone.config, EncoderKind::Visual, &seq)?;
        let seq = embed_text(&mut tape, &w.text_embedding, &backbone.config, &chosen, &template)?;
        let txt = encode_plain(&mut tape, &w.text, &backbone.config, EncoderKind::Text, &seq)?;
        let loss = symmetric_info_nce(&mut tape, img, txt, backbone.config.tau)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("pretraining loss {value}"),
            });
        }
        report.losses.push(value);
        tape.backward(loss)?;

        let mut vars = Vec::new();
        w.for_each(&mut |_, v| vars.push(*v));
        let grads: Vec<Option<&Tensor>> = vars.iter().map(|&v| tape.grad(v)).collect();
        adam_step(&mut flat, &grads, &mut adam, config.lr)?;
        let mut it = flat.iter();
        params.for_each_mut(&mut |_, t| t.clone_from(it.next().expect("same layout")));
    }
    Ok((params, report))
}

/// Mean of image-to-text and text-to-image cross entropy with matched
/// pairs on the diagonal.
fn symmetric_info_nce(tape: &mut Tape, img: Var, txt: Var, tau: f64) -> Result<Var> {
    let n = tape.shape(img)[0];
    let targets: Vec<usize> = (0..n).collect();
    let txt_t = tape.permute(txt, &[1, 0])?;
    let logits = tape.matmul(img, txt_t)?;
    let logits = tape.scale(logits, 1.0 / tau);
    let logits_t = tape.permute(logits, &[1, 0])?;
    let a = tape.log_softmax_rows(logits)?;
    let a = tape.nll(a, &targets)?;
    let b = tape.log_softmax_rows(logits_t)?;
    let b = tape.nll(b, &targets)?;
    let both = tape.add(a, b)?;
    Ok(tape.scale(both, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_data(config: &BackboneConfig, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
        let classes = 6;
        let protos: Vec<Tensor> = (0..classes)
            .map(|_| Tensor::randn(rng, &[config.n_patches(), config.patch_dim], 1.0))
            .collect();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (c, p) in protos.iter().enumerate() {
            for _ in 0..4 {
                let noise = Tensor::randn(rng, p.shape(), 0.1);
                data.extend(p.data().iter().zip(noise.data()).map(|(a, b)| a + b));
                labels.push(c);
            }
        }
        let x = Tensor::new(&[labels.len(), config.n_patches(), config.patch_dim], data).unwrap();
        (x, labels)
    }

    fn small() -> BackboneConfig {
        BackboneConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            visual_tokens: 5,
            patch_dim: 4,
            text_len: 8,
            vocab_size: 13,
            d_joint: 8,
            tau: 0.07,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Backbone::init(small(), &mut rng).unwrap();
        let (x, y) = toy_data(&b.config, &mut rng);
        let config = PretrainConfig {
            steps: 0,
            ..PretrainConfig::default()
        };
        let (params, report) = contrastive_pretrain(&b, &x, &y, &config, &mut rng).unwrap();
        assert_eq!(params, b.params);
        assert!(report.losses.is_empty());
    }

    #[test]
    fn loss_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Backbone::init(small(), &mut rng).unwrap();
        let (x, y) = toy_data(&b.config, &mut rng);
        let config = PretrainConfig {
            steps: 60,
            lr: 3e-3,
            batch_classes: 6,
        };
        let (_, report) = contrastive_pretrain(&b, &x, &y, &config, &mut rng).unwrap();
        let head: f64 = report.losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = report.losses[55..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn info_nce_gradients_reach_every_backbone_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let config = BackboneConfig {
            d_model: 4,
            n_heads: 2,
            visual_tokens: 3,
            patch_dim: 2,
            text_len: 7,
            vocab_size: 10,
            d_joint: 3,
            tau: 0.5,
            ..small()
        };
        let b = Backbone::init(config.clone(), &mut rng).unwrap();
        let x = Tensor::randn(&mut rng, &[3, 2, 2], 1.0);
        let mut flat = Vec::new();
        b.params.for_each(&mut |_, t| flat.push(t.clone()));
        let mut names = Vec::new();
        b.params.for_each(&mut |n, _| names.push(n));
        let report = crate::gradcheck::check_gradients(&flat, 1e-5, |tape, vars| {
            let mut it = vars.iter();
            let w = b.params.map(&mut |_| *it.next().unwrap());
            let xv = tape.constant(x.clone());
            let seq = embed_image(tape, &w.visual_embedding, &config, xv)?;
            let img = encode_plain(tape, &w.visual, &config, EncoderKind::Visual, &seq)?;
            let seq = embed_text(tape, &w.text_embedding, &config, &[0, 1, 2], &TextTemplate::hand_crafted())?;
            let txt = encode_plain(tape, &w.text, &config, EncoderKind::Text, &seq)?;
            symmetric_info_nce(tape, img, txt, config.tau)
        })
        .unwrap();
        let worst = report.worst.map(|(i, j)| format!("{}[{j}]", names[i]));
        assert!(report.max_rel_error < 1e-4, "{report:?} {worst:?}");
    }

    #[test]
    fn frozen_backbone_is_refused() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = Backbone::init(small(), &mut rng).unwrap();
        let (x, y) = toy_data(&b.config, &mut rng);
        b.freeze();
        assert!(matches!(
            contrastive_pretrain(&b, &x, &y, &PretrainConfig::default(), &mut rng),
            Err(Error::Contract(_))
        ));
    }
}
