//! Self-enhanced prompts: prompt attachment, per-layer token split,
//! representative-token selection and fusion, and the prompted encoder
//! forwards (including the per-layer IVLP baseline).

mod encode;
mod forward;
mod fusion;
mod prompts;
mod select;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, EncoderKind};
use crate::error::{Error, Result};

pub use encode::{encode_images, encode_text_classes};
pub use forward::{
    append_prompt, enhanced_forward, ivlp_forward, merge_tokens, plain_forward, replace_prompt, split_tokens,
    EnhancedOutput, LayerTrace,
};
pub use fusion::{fuse, fuse_add, fuse_mlp, tfm_fuse, tfm_fuse_traced, FusionWeights, MlpWeights, ProjectionWeights};
pub use prompts::{load_prompts, save_prompts, ModalityPrompts, PromptParams, PROMPT_INIT_STD};
pub use select::{activation_scores, select_indices, select_representative};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Highest mean squared feature first.
    Activation,
    /// The first `k` pretrained positions.
    Front,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Add,
    Mlp,
    Tfm,
}

/// How one encoder is prompted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// One input prompt refreshed by fusion at the insertion layers.
    Sep,
    /// A fresh learnable prompt before every layer.
    Ivlp,
    /// No learnable tokens; the hand-crafted template for text.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SepConfig {
    pub visual_prompt_len: usize,
    pub text_prompt_len: usize,
    pub selection_visual: Selection,
    pub selection_text: Selection,
    pub fusion: Fusion,
    /// 1-based layer indices after which fusion runs. Absent means every
    /// layer that has a successor.
    pub insertion_layers: Option<BTreeSet<usize>>,
    pub n_heads_tfm: usize,
    pub learned_projections: bool,
    pub visual_mode: PromptMode,
    pub text_mode: PromptMode,
}

impl Default for SepConfig {
    fn default() -> Self {
        Self {
            visual_prompt_len: 4,
            text_prompt_len: 6,
            selection_visual: Selection::Activation,
            selection_text: Selection::Front,
            fusion: Fusion::Tfm,
            insertion_layers: None,
            n_heads_tfm: 1,
            learned_projections: false,
            visual_mode: PromptMode::Sep,
            text_mode: PromptMode::Sep,
        }
    }
}

impl SepConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.visual_prompt_len == 0 || self.text_prompt_len == 0 {
            return Err(Error::Config("prompt lengths must be >= 1".into()));
        }
        if let Some(bad) = self
            .insertion_layers
            .iter()
            .flatten()
            .find(|&&l| l == 0 || l >= backbone.n_layers)
        {
            return Err(Error::Config(format!(
                "insertion layer {bad} outside 1..={}",
                backbone.n_layers - 1
            )));
        }
        if self.n_heads_tfm == 0 || backbone.d_model % self.n_heads_tfm != 0 {
            return Err(Error::Config(format!(
                "n_heads_tfm {} must divide d_model {}",
                self.n_heads_tfm, backbone.d_model
            )));
        }
        // Non-pretrained text positions: SOS, class, EOS and padding.
        let text_pretrained = backbone.text_len.saturating_sub(self.text_prompt_len);
        if self.text_mode != PromptMode::Frozen && self.text_prompt_len + 3 > backbone.text_len {
            return Err(Error::Config(format!(
                "text_prompt_len {} does not fit text_len {}",
                self.text_prompt_len, backbone.text_len
            )));
        }
        let pretrained = [
            (EncoderKind::Visual, backbone.visual_tokens, self.visual_prompt_len, self.visual_mode),
            (EncoderKind::Text, text_pretrained, self.text_prompt_len, self.text_mode),
        ];
        for (kind, available, k, mode) in pretrained {
            if mode == PromptMode::Sep && self.schedule(backbone.n_layers).len() > 0 && k > available {
                return Err(Error::Config(format!(
                    "{} selection of {k} tokens exceeds {available} pretrained tokens",
                    kind.name()
                )));
            }
        }
        Ok(())
    }

    /// Resolved insertion layers in ascending order.
    pub fn schedule(&self, n_layers: usize) -> Vec<usize> {
        match &self.insertion_layers {
            Some(set) => set.iter().copied().collect(),
            None => (1..n_layers).collect(),
        }
    }

    pub fn mode(&self, kind: EncoderKind) -> PromptMode {
        match kind {
            EncoderKind::Visual => self.visual_mode,
            EncoderKind::Text => self.text_mode,
        }
    }

    pub fn prompt_len(&self, kind: EncoderKind) -> usize {
        match kind {
            EncoderKind::Visual => self.visual_prompt_len,
            EncoderKind::Text => self.text_prompt_len,
        }
    }

    pub fn selection(&self, kind: EncoderKind) -> Selection {
        match kind {
            EncoderKind::Visual => self.selection_visual,
            EncoderKind::Text => self.selection_text,
        }
    }

    /// Whether fusion at each insertion layer owns learnable weights.
    pub fn fusion_is_parameterized(&self) -> bool {
        self.fusion == Fusion::Mlp || (self.fusion == Fusion::Tfm && self.learned_projections)
    }
}
