//! Parameter containers, generic over the leaf type so the same layout holds
//! owned tensors (`T = Tensor`) or their tape bindings (`T = Var`).

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

use super::BackboneConfig;

param_struct! {
    /// One pre-norm transformer block.
    pub struct LayerWeights {
        ln1_gain, ln1_bias,
        wq, bq, wk, bk, wv, bv, wo, bo,
        ln2_gain, ln2_bias,
        w1, b1, w2, b2,
    }
}

param_struct! {
    /// Final norm and projection into the joint embedding space.
    pub struct HeadWeights {
        ln_gain, ln_bias, proj,
    }
}

param_struct! {
    pub struct VisualEmbedding {
        patch_weight, patch_bias, class_embedding, positions,
    }
}

param_struct! {
    pub struct TextEmbedding {
        tokens, positions,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T> {
    pub layers: Vec<LayerWeights<T>>,
    pub head: HeadWeights<T>,
}

impl<T> EncoderWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderWeights<U> {
        EncoderWeights {
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            head: self.head.map(f),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.for_each(&format!("{prefix}layers.{i}."), f);
        }
        self.head.for_each(&format!("{prefix}head."), f);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.for_each_mut(&format!("{prefix}layers.{i}."), f);
        }
        self.head.for_each_mut(&format!("{prefix}head."), f);
    }
}

/// Every tensor of the dual encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights<T> {
    pub visual_embedding: VisualEmbedding<T>,
    pub visual: EncoderWeights<T>,
    pub text_embedding: TextEmbedding<T>,
    pub text: EncoderWeights<T>,
}

pub type BackboneParams = BackboneWeights<Tensor>;

impl<T> BackboneWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BackboneWeights<U> {
        BackboneWeights {
            visual_embedding: self.visual_embedding.map(f),
            visual: self.visual.map(f),
            text_embedding: self.text_embedding.map(f),
            text: self.text.map(f),
        }
    }

    /// Visits tensors in manifest order with dotted names.
    pub fn for_each(&self, f: &mut impl FnMut(String, &T)) {
        self.visual_embedding.for_each("visual.embedding.", f);
        self.visual.for_each("visual.", f);
        self.text_embedding.for_each("text.embedding.", f);
        self.text.for_each("text.", f);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        self.visual_embedding.for_each_mut("visual.embedding.", f);
        self.visual.for_each_mut("visual.", f);
        self.text_embedding.for_each_mut("text.embedding.", f);
        self.text.for_each_mut("text.", f);
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, _| n += 1);
        n
    }
}

impl BackboneParams {
    pub fn init<R: Rng>(config: &BackboneConfig, rng: &mut R) -> Self {
        let d = config.d_model;
        let d_ff = config.mlp_ratio * d;
        let lin = |rng: &mut R, fan_in: usize, fan_out: usize| {
            Tensor::randn(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
        };
        let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let layer = |rng: &mut R| LayerWeights {
            ln1_gain: Tensor::ones(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            wq: lin(rng, d, d),
            bq: Tensor::zeros(&[d]),
            wk: lin(rng, d, d),
            bk: Tensor::zeros(&[d]),
            wv: lin(rng, d, d),
            bv: Tensor::zeros(&[d]),
            wo: lin(rng, d, d).map(|v| v * residual_scale),
            bo: Tensor::zeros(&[d]),
            ln2_gain: Tensor::ones(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
            w1: lin(rng, d, d_ff),
            b1: Tensor::zeros(&[d_ff]),
            w2: lin(rng, d_ff, d).map(|v| v * residual_scale),
            b2: Tensor::zeros(&[d]),
        };
        let encoder = |rng: &mut R| EncoderWeights {
            layers: (0..config.n_layers).map(|_| layer(rng)).collect(),
            head: HeadWeights {
                ln_gain: Tensor::ones(&[d]),
                ln_bias: Tensor::zeros(&[d]),
                proj: lin(rng, d, config.d_joint),
            },
        };
        let visual_embedding = VisualEmbedding {
            patch_weight: lin(rng, config.patch_dim, d),
            patch_bias: Tensor::zeros(&[d]),
            class_embedding: Tensor::randn(rng, &[1, d], 0.5),
            positions: Tensor::randn(rng, &[config.visual_tokens, d], 0.1),
        };
        let visual = encoder(rng);
        let text_embedding = TextEmbedding {
            tokens: Tensor::randn(rng, &[config.vocab_size, d], 0.5),
            positions: Tensor::randn(rng, &[config.text_len, d], 0.1),
        };
        let text = encoder(rng);
        Self {
            visual_embedding,
            visual,
            text_embedding,
            text,
        }
    }

    /// Records every tensor on the tape.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BackboneWeights<Var> {
        self.map(&mut |t| tape.leaf(t.clone(), requires_grad))
    }
}
