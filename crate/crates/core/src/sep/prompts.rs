use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, Vocab, CHECKPOINT_MAGIC};
use crate::container::{self, TensorEntry, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{FusionWeights, PromptMode, SepConfig};

/// Standard deviation of freshly drawn prompt rows.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// Learnable tensors for one encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityPrompts<T> {
    /// One `[len, d]` prompt for SEP, one per layer for IVLP, none when frozen.
    pub prompts: Vec<T>,
    /// Fusion weights per insertion layer, in schedule order, when fusion is
    /// parameterized.
    pub fusion: Vec<FusionWeights<T>>,
}

impl<T> ModalityPrompts<T> {
    fn empty() -> Self {
        Self {
            prompts: Vec::new(),
            fusion: Vec::new(),
        }
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModalityPrompts<U> {
        ModalityPrompts {
            prompts: self.prompts.iter().map(&mut *f).collect(),
            fusion: self.fusion.iter().map(|w| w.map(f)).collect(),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
        for (i, p) in self.prompts.iter().enumerate() {
            f(format!("{prefix}prompts.{i}"), p);
        }
        for (i, w) in self.fusion.iter().enumerate() {
            w.for_each(&format!("{prefix}fusion.{i}."), f);
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        for (i, p) in self.prompts.iter_mut().enumerate() {
            f(format!("{prefix}prompts.{i}"), p);
        }
        for (i, w) in self.fusion.iter_mut().enumerate() {
            w.for_each_mut(&format!("{prefix}fusion.{i}."), f);
        }
    }
}

/// Everything that tuning updates.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptParams<T> {
    pub visual: ModalityPrompts<T>,
    pub text: ModalityPrompts<T>,
}

impl<T> PromptParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> PromptParams<U> {
        PromptParams {
            visual: self.visual.map(f),
            text: self.text.map(f),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(String, &T)) {
        self.visual.for_each("visual.", f);
        self.text.for_each("text.", f);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        self.visual.for_each_mut("visual.", f);
        self.text.for_each_mut("text.", f);
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, _| n += 1);
        n
    }
}

impl PromptParams<Tensor> {
    /// Visual prompts are drawn from a narrow Gaussian. The first text prompt
    /// copies the `X` word embedding into every position; deeper IVLP text
    /// prompts are drawn like visual ones.
    pub fn init(sep: &SepConfig, backbone: &Backbone, rng: &mut impl Rng) -> Result<Self> {
        let x_row = backbone.params.text_embedding.tokens.row(Vocab::X).to_vec();
        build(sep, &backbone.config, &x_row, rng)
    }

    pub fn bind(&self, tape: &mut Tape) -> PromptParams<Var> {
        self.map(&mut |t| tape.param(t.clone()))
    }

    /// Tensors in visitation order.
    pub fn flatten(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.count());
        self.for_each(&mut |_, t| out.push(t.clone()));
        out
    }

    pub fn assign(&mut self, flat: &[Tensor]) {
        let mut it = flat.iter();
        self.for_each_mut(&mut |_, t| t.clone_from(it.next().expect("flat matches layout")));
    }

    pub fn round_to_f32(&self) -> Self {
        self.map(&mut Tensor::round_to_f32)
    }
}

fn build(sep: &SepConfig, config: &BackboneConfig, x_row: &[f64], rng: &mut impl Rng) -> Result<PromptParams<Tensor>> {
    sep.validate(config)?;
    let d = config.d_model;
    let fresh = |rng: &mut _, len: usize| Tensor::randn(rng, &[len, d], PROMPT_INIT_STD);
    let schedule = sep.schedule(config.n_layers);
    let fusion = |rng: &mut _| -> Vec<FusionWeights<Tensor>> {
        if sep.fusion_is_parameterized() {
            schedule
                .iter()
                .filter_map(|_| FusionWeights::init(sep.fusion, d, rng))
                .collect()
        } else {
            Vec::new()
        }
    };

    let lv = sep.visual_prompt_len;
    let visual = match sep.visual_mode {
        PromptMode::Sep => ModalityPrompts {
            prompts: vec![fresh(rng, lv)],
            fusion: fusion(rng),
        },
        PromptMode::Ivlp => ModalityPrompts {
            prompts: (0..config.n_layers).map(|_| fresh(rng, lv)).collect(),
            fusion: Vec::new(),
        },
        PromptMode::Frozen => ModalityPrompts::empty(),
    };

    let lt = sep.text_prompt_len;
    let words = Tensor::new(&[lt, d], x_row.repeat(lt))?;
    let text = match sep.text_mode {
        PromptMode::Sep => ModalityPrompts {
            prompts: vec![words],
            fusion: fusion(rng),
        },
        PromptMode::Ivlp => {
            let mut prompts = vec![words];
            prompts.extend((1..config.n_layers).map(|_| fresh(rng, lt)));
            ModalityPrompts {
                prompts,
                fusion: Vec::new(),
            }
        }
        PromptMode::Frozen => ModalityPrompts::empty(),
    };
    Ok(PromptParams { visual, text })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptHeader {
    version: u32,
    kind: String,
    backbone: BackboneConfig,
    sep: SepConfig,
    tensors: Vec<TensorEntry>,
}

const PROMPT_KIND: &str = "prompts";

/// Stores prompts (as f32) with the configs needed to rebuild their layout.
pub fn save_prompts(path: &Path, prompts: &PromptParams<Tensor>, sep: &SepConfig, backbone: &BackboneConfig) -> Result<()> {
    let mut named = Vec::new();
    prompts.for_each(&mut |name, t| named.push((name, t.clone())));
    let mut payload = Vec::new();
    let tensors = container::encode_tensors(named.iter().map(|(n, t)| (n.clone(), t)), &mut payload);
    let header = PromptHeader {
        version: FORMAT_VERSION,
        kind: PROMPT_KIND.into(),
        backbone: backbone.clone(),
        sep: sep.clone(),
        tensors,
    };
    container::write(path, CHECKPOINT_MAGIC, &header, &payload)
}

pub fn load_prompts(path: &Path) -> Result<(PromptParams<Tensor>, SepConfig, BackboneConfig)> {
    let (header, payload): (PromptHeader, _) = container::read(path, CHECKPOINT_MAGIC)?;
    container::check_version(path, header.version)?;
    if header.kind != PROMPT_KIND {
        return Err(Error::format(path, format!("expected a prompt file, found kind {}", header.kind)));
    }
    let x_row = vec![0.0; header.backbone.d_model];
    let mut prompts = build(&header.sep, &header.backbone, &x_row, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Error::format(path, format!("header config: {e}")))?;
    if prompts.count() != header.tensors.len() {
        return Err(Error::format(
            path,
            format!("manifest has {} tensors, config implies {}", header.tensors.len(), prompts.count()),
        ));
    }
    let mut entries = header.tensors.iter();
    let mut failure = None;
    let mut end = 0;
    prompts.for_each_mut(&mut |name, t| {
        let entry = entries.next().expect("counted above");
        if failure.is_some() {
            return;
        }
        if entry.name != name || entry.shape != t.shape() {
            failure = Some(Error::format(path, format!("tensor {} disagrees with config ({name})", entry.name)));
            return;
        }
        end = end.max(entry.offset + t.len());
        match container::decode_tensor(path, entry, &payload) {
            Ok(v) => *t = v,
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if end * 4 != payload.len() {
        return Err(Error::format(path, "payload size disagrees with manifest"));
    }
    Ok((prompts, header.sep, header.backbone))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sep::Fusion;

    fn backbone() -> Backbone {
        Backbone::init(BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn layouts_per_mode() {
        let b = backbone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sep = SepConfig::default();
        let p = PromptParams::init(&sep, &b, &mut rng).unwrap();
        assert_eq!(p.visual.prompts.len(), 1);
        assert_eq!(p.visual.prompts[0].shape(), &[4, 32]);
        assert_eq!(p.text.prompts[0].shape(), &[6, 32]);
        assert_eq!(p.text.prompts[0].row(5), b.params.text_embedding.tokens.row(Vocab::X));
        assert!(p.visual.fusion.is_empty());

        let ivlp = SepConfig {
            visual_mode: PromptMode::Ivlp,
            text_mode: PromptMode::Frozen,
            ..sep.clone()
        };
        let p = PromptParams::init(&ivlp, &b, &mut rng).unwrap();
        assert_eq!(p.visual.prompts.len(), 6);
        assert_eq!(p.text.prompts.len(), 0);

        let mlp = SepConfig {
            fusion: Fusion::Mlp,
            insertion_layers: Some([2, 4].into()),
            ..sep
        };
        let p = PromptParams::init(&mlp, &b, &mut rng).unwrap();
        assert_eq!(p.visual.fusion.len(), 2);
        assert_eq!(p.count(), 2 + 2 * 2 * 4);
    }

    #[test]
    fn prompt_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let b = backbone();
        let sep = SepConfig {
            learned_projections: true,
            ..SepConfig::default()
        };
        let p = PromptParams::init(&sep, &b, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        save_prompts(&path, &p, &sep, &b.config).unwrap();
        let (loaded, sep2, config) = load_prompts(&path).unwrap();
        assert_eq!(loaded, p.round_to_f32());
        assert_eq!(sep2, sep);
        assert_eq!(config, b.config);
        assert!(matches!(crate::backbone::load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
