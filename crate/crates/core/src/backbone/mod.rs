//! Miniature frozen dual encoder: patch/word embeddings, stacked pre-norm
//! transformer layers, joint-space projection heads.

mod checkpoint;
mod encoder;
mod params;
mod pretrain;
mod text;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use encoder::{
    embed_image, embed_text, encode_plain, encoder_layer_forward, linear, pool_and_project, EncoderKind,
    TokenSequence,
};
pub use params::{
    BackboneParams, BackboneWeights, EncoderWeights, HeadWeights, LayerWeights, TextEmbedding,
    VisualEmbedding,
};
pub use pretrain::{contrastive_pretrain, PretrainConfig, PretrainReport};
pub use text::{class_token, TemplateToken, TextTemplate, Vocab};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Patch tokens plus the class token.
    pub visual_tokens: usize,
    /// Width of one raw patch feature vector.
    pub patch_dim: usize,
    pub text_len: usize,
    pub vocab_size: usize,
    pub d_joint: usize,
    pub tau: f64,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 6,
            n_heads: 4,
            visual_tokens: 17,
            patch_dim: 12,
            text_len: 16,
            vocab_size: Vocab::FIRST_CLASS + 40,
            d_joint: 32,
            tau: 0.07,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.visual_tokens < 2 {
            return fail(format!("visual_tokens must be >= 2, got {}", self.visual_tokens));
        }
        if self.n_layers == 0 || self.patch_dim == 0 || self.d_joint == 0 || self.mlp_ratio == 0 {
            return fail("n_layers, patch_dim, d_joint and mlp_ratio must be positive".into());
        }
        if self.vocab_size <= Vocab::FIRST_CLASS {
            return fail(format!(
                "vocab_size must exceed the {} reserved tokens",
                Vocab::FIRST_CLASS
            ));
        }
        if self.text_len < 3 {
            return fail(format!("text_len must be >= 3, got {}", self.text_len));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.visual_tokens - 1
    }

    pub fn n_classes(&self) -> usize {
        self.vocab_size - Vocab::FIRST_CLASS
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Backbone parameters plus the freeze flag that governs how they are bound.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: BackboneParams,
    frozen: bool,
}

impl Backbone {
    pub fn init(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = BackboneParams::init(&config, rng);
        Ok(Self {
            config,
            params,
            frozen: false,
        })
    }

    pub fn from_params(config: BackboneConfig, params: BackboneParams, frozen: bool) -> Self {
        Self {
            config,
            params,
            frozen,
        }
    }

    /// After this call every binding is a constant: no downstream graph can
    /// produce a gradient for a backbone tensor.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn bind(&self, tape: &mut Tape) -> BackboneWeights<Var> {
        self.params.bind(tape, !self.frozen)
    }

    /// SHA-256 over every parameter's bit pattern in manifest order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.params.for_each(&mut |name, t| {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        });
        hex(&hasher.finalize())
    }

    /// Unit-norm class embeddings `[classes, d_joint]` from the hand-crafted
    /// template.
    pub fn encode_frozen_text(&self, classes: &[usize]) -> Result<Tensor> {
        if classes.is_empty() {
            return Err(Error::Contract("encode_frozen_text needs at least one class".into()));
        }
        let mut tape = Tape::new();
        let w = self.params.bind(&mut tape, false);
        let seq = embed_text(&mut tape, &w.text_embedding, &self.config, classes, &TextTemplate::hand_crafted())?;
        let out = encode_plain(&mut tape, &w.text, &self.config, EncoderKind::Text, &seq)?;
        Ok(tape.value(out).clone())
    }

    /// Unit-norm image embeddings `[N, d_joint]` for patches `[N, P, patch_dim]`.
    pub fn encode_frozen_image(&self, patches: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = self.params.bind(&mut tape, false);
        let x = tape.constant(patches.clone());
        let seq = embed_image(&mut tape, &w.visual_embedding, &self.config, x)?;
        let out = encode_plain(&mut tape, &w.visual, &self.config, EncoderKind::Visual, &seq)?;
        Ok(tape.value(out).clone())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
