//! Classification, accuracy and harmonic-mean reporting.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::Backbone;
use crate::data::{Dataset, SplitManifest};
use crate::error::{Error, Result};
use crate::sep::{encode_images, encode_text_classes, PromptParams, SepConfig};
use crate::tensor::Tensor;
use crate::training::gather;

/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

/// Index of the most similar classifier row for every embedding row; ties go
/// to the lower index.
pub fn classify(embeddings: &Tensor, classifier: &Tensor) -> Result<Vec<usize>> {
    if embeddings.rank() != 2 || classifier.rank() != 2 || embeddings.shape()[1] != classifier.shape()[1] {
        return Err(Error::dim("classify", embeddings.shape(), classifier.shape()));
    }
    if classifier.shape()[0] == 0 {
        return Err(Error::Contract("classify needs at least one class".into()));
    }
    let n_classes = classifier.shape()[0];
    Ok((0..embeddings.shape()[0])
        .map(|i| {
            let f = embeddings.row(i);
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for c in 0..n_classes {
                let s: f64 = f.iter().zip(classifier.row(c)).map(|(a, b)| a * b).sum();
                if s > best_score {
                    best = c;
                    best_score = s;
                }
            }
            best
        })
        .collect())
}

/// `2·b·n / (b + n)`, zero when both are zero.
pub fn harmonic_mean(base: f64, new: f64) -> f64 {
    if base + new == 0.0 {
        0.0
    } else {
        2.0 * base * new / (base + new)
    }
}

fn constant_prompts(tape: &mut Tape, prompts: &PromptParams<Tensor>) -> PromptParams<crate::Var> {
    prompts.map(&mut |t| tape.constant(t.clone()))
}

/// Enhanced class embeddings `[classes, d_joint]`.
pub fn class_embeddings(
    backbone: &Backbone,
    prompts: &PromptParams<Tensor>,
    sep: &SepConfig,
    classes: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = backbone.bind(&mut tape);
    let p = constant_prompts(&mut tape, prompts);
    let out = encode_text_classes(&mut tape, &w, &backbone.config, sep, &p.text, classes)?;
    Ok(tape.value(out).clone())
}

/// Enhanced image embeddings `[N, d_joint]`, computed in chunks.
pub fn image_embeddings(
    backbone: &Backbone,
    prompts: &PromptParams<Tensor>,
    sep: &SepConfig,
    images: &Tensor,
) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut data = Vec::with_capacity(n * backbone.config.d_joint);
    let ids: Vec<usize> = (0..n).collect();
    for chunk in ids.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let w = backbone.bind(&mut tape);
        let p = constant_prompts(&mut tape, prompts);
        let x = tape.constant(gather(images, chunk)?);
        let out = encode_images(&mut tape, &w, &backbone.config, sep, &p.visual, x)?;
        data.extend_from_slice(tape.value(out).data());
    }
    Tensor::new(&[n, backbone.config.d_joint], data)
}

fn check_compatible(backbone: &Backbone, dataset: &Dataset) -> Result<()> {
    let c = &backbone.config;
    if dataset.spec.n_patches != c.n_patches() || dataset.spec.patch_dim != c.patch_dim {
        return Err(Error::Contract(format!(
            "dataset patches {}x{} do not fit backbone {}x{}",
            dataset.spec.n_patches,
            dataset.spec.patch_dim,
            c.n_patches(),
            c.patch_dim
        )));
    }
    Ok(())
}

/// Percentage of `ids` whose nearest class among `classes` is their label.
pub fn accuracy(
    backbone: &Backbone,
    prompts: &PromptParams<Tensor>,
    sep: &SepConfig,
    dataset: &Dataset,
    ids: &[usize],
    classes: &[usize],
) -> Result<f64> {
    check_compatible(backbone, dataset)?;
    if ids.is_empty() {
        return Err(Error::Contract("accuracy over an empty example set".into()));
    }
    let labels = dataset.labels_of(ids);
    let targets = labels
        .iter()
        .map(|y| {
            classes
                .iter()
                .position(|c| c == y)
                .ok_or_else(|| Error::Contract(format!("label {y} is outside the evaluated classes")))
        })
        .collect::<Result<Vec<_>>>()?;
    let w = class_embeddings(backbone, prompts, sep, classes)?;
    let f = image_embeddings(backbone, prompts, sep, &dataset.batch(ids)?)?;
    let predicted = classify(&f, &w)?;
    let correct = predicted.iter().zip(&targets).filter(|(a, b)| a == b).count();
    Ok(100.0 * correct as f64 / ids.len() as f64)
}

/// Base accuracy over base test examples with a base-class classifier, new
/// accuracy with the classifier rebuilt over new class names.
pub fn base_to_new_eval(
    backbone: &Backbone,
    prompts: &PromptParams<Tensor>,
    sep: &SepConfig,
    dataset: &Dataset,
    split: &SplitManifest,
) -> Result<(f64, f64, f64)> {
    split.validate()?;
    if split.new.is_empty() {
        return Err(Error::Contract("base-to-new evaluation needs new classes".into()));
    }
    let base = accuracy(backbone, prompts, sep, dataset, &split.test_ids(&split.base), &split.base)?;
    let new = accuracy(backbone, prompts, sep, dataset, &split.test_ids(&split.new), &split.new)?;
    Ok((base, new, harmonic_mean(base, new)))
}

/// Examples of one evaluation target and the classes its classifier covers.
#[derive(Clone, Debug)]
pub struct EvalTarget<'a> {
    pub name: String,
    pub dataset: &'a Dataset,
    pub ids: Vec<usize>,
    pub classes: Vec<usize>,
}

impl<'a> EvalTarget<'a> {
    /// Every example of `dataset` over all of its classes.
    pub fn whole(name: impl Into<String>, dataset: &'a Dataset) -> Self {
        Self {
            name: name.into(),
            dataset,
            ids: (0..dataset.len()).collect(),
            classes: dataset.classes(),
        }
    }
}

/// Accuracy per target with the classifier rebuilt for each target.
pub fn cross_dataset_eval(
    backbone: &Backbone,
    prompts: &PromptParams<Tensor>,
    sep: &SepConfig,
    targets: &[EvalTarget<'_>],
) -> Result<Vec<(String, f64)>> {
    targets
        .iter()
        .map(|t| Ok((t.name.clone(), accuracy(backbone, prompts, sep, t.dataset, &t.ids, &t.classes)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub base: f64,
    pub new: f64,
    pub h: f64,
    pub runtime_s: f64,
}

impl SeedResult {
    pub fn new(seed: u64, base: f64, new: f64, runtime_s: f64) -> Self {
        Self {
            seed,
            base,
            new,
            h: harmonic_mean(base, new),
            runtime_s,
        }
    }
}

/// Seed-averaged base/new accuracy; `h` is the harmonic mean of the averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub key: String,
    pub fingerprint: String,
    pub seeds: Vec<SeedResult>,
    pub base: f64,
    pub new: f64,
    pub h: f64,
    pub runtime_s: f64,
}

impl EvalReport {
    pub fn from_seeds(key: impl Into<String>, fingerprint: impl Into<String>, seeds: Vec<SeedResult>) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::Contract("a report needs at least one seed".into()));
        }
        let distinct: BTreeSet<u64> = seeds.iter().map(|s| s.seed).collect();
        if distinct.len() != seeds.len() {
            return Err(Error::Contract("duplicate seed in report".into()));
        }
        let n = seeds.len() as f64;
        let base = seeds.iter().map(|s| s.base).sum::<f64>() / n;
        let new = seeds.iter().map(|s| s.new).sum::<f64>() / n;
        Ok(Self {
            key: key.into(),
            fingerprint: fingerprint.into(),
            base,
            new,
            h: harmonic_mean(base, new),
            runtime_s: seeds.iter().map(|s| s.runtime_s).sum(),
            seeds,
        })
    }
}

pub const REPORT_HEADER: &str = "key,seed,base,new,h";

/// One row per seed plus a `mean` row per report; runtimes are left out so
/// the file depends only on the computation.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in reports {
        for s in &r.seeds {
            out.push_str(&format!("{},{},{:.2},{:.2},{:.2}\n", r.key, s.seed, s.base, s.new, s.h));
        }
        out.push_str(&format!("{},mean,{:.2},{:.2},{:.2}\n", r.key, r.base, r.new, r.h));
    }
    out
}
