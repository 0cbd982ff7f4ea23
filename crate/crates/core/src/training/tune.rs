use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::eval::classify;
use crate::objectives::{ce_visual, contrastive_ce, kg_text, kg_visual, total_loss, LossParts, LossWeights};
use crate::sep::{encode_images, encode_text_classes, PromptParams, SepConfig};
use crate::tensor::Tensor;

use super::{adam_step, stream, AdamState, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub shots: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2.5e-3,
            batch_size: 16,
            epochs: 50,
            seeds: vec![1, 2, 3],
            shots: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.shots == 0 {
            return Err(Error::Config("batch_size and shots must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}

/// Labelled training images restricted to `classes`.
#[derive(Clone, Copy, Debug)]
pub struct TrainSet<'a> {
    /// `[N, patches, patch_dim]`.
    pub images: &'a Tensor,
    /// Global class ids, one per image.
    pub labels: &'a [usize],
    /// Classes the classifier is built over, in logit order.
    pub classes: &'a [usize],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub kg_text: f64,
    pub kg_visual: f64,
    pub ce_visual: f64,
    pub total: f64,
    /// Batch accuracy of the enhanced embeddings, in percent.
    pub train_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub prompts: PromptParams<Tensor>,
    pub metrics: Vec<StepMetrics>,
    pub backbone_checksum: String,
}

impl TuneOutcome {
    /// Mean total loss per epoch, in epoch order.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for m in &self.metrics {
            let e = sums.entry(m.epoch).or_default();
            e.0 += m.total;
            e.1 += 1;
        }
        sums.values().map(|(s, n)| s / *n as f64).collect()
    }
}

/// Optimizes the prompt (and fusion) tensors of `init` against the full
/// objective with the backbone held fixed. Shuffling draws from the seed's
/// shuffle stream, so `(backbone, init, configs, data, seed)` fix the result.
pub fn tune(
    backbone: &Backbone,
    init: &PromptParams<Tensor>,
    sep: &SepConfig,
    weights: &LossWeights,
    data: TrainSet<'_>,
    train: &TrainConfig,
    seed: u64,
) -> Result<TuneOutcome> {
    if !backbone.is_frozen() {
        return Err(Error::Contract("tune requires a frozen backbone".into()));
    }
    if data.labels.is_empty() || data.classes.is_empty() {
        return Err(Error::Contract("tune needs at least one training image and class".into()));
    }
    if data.images.rank() != 3 || data.images.shape()[0] != data.labels.len() {
        return Err(Error::dim("tune", data.images.shape(), &[data.labels.len()]));
    }
    train.validate()?;
    weights.validate()?;
    sep.validate(&backbone.config)?;
    let position: BTreeMap<usize, usize> = data.classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let targets = data
        .labels
        .iter()
        .map(|y| {
            position
                .get(y)
                .copied()
                .ok_or_else(|| Error::Contract(format!("training label {y} is not among the tuned classes")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let config = &backbone.config;
    let tau = weights.tau_or(config.tau);
    let checksum = backbone.checksum();

    // Frozen anchors: the backbone never changes, so both are computed once.
    let w_clip = backbone.encode_frozen_text(data.classes)?;
    let f_all = backbone.encode_frozen_image(data.images)?;

    let mut prompts = init.clone();
    let mut flat = prompts.flatten();
    let mut adam = AdamState::new(&flat);
    let mut rng = stream(seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..data.labels.len()).collect();
    let mut metrics = Vec::new();
    let mut step = 0;

    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        for ids in order.chunks(train.batch_size) {
            let batch_targets: Vec<usize> = ids.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let w = backbone.bind(&mut tape);
            let p = prompts.bind(&mut tape);
            let x = tape.constant(gather(data.images, ids)?);
            let f = tape.constant(gather(&f_all, ids)?);
            let w_clip_v = tape.constant(w_clip.clone());

            let forward = |tape: &mut Tape| -> Result<_> {
                let f_hat = encode_images(tape, &w, config, sep, &p.visual, x)?;
                let w_sep = encode_text_classes(tape, &w, config, sep, &p.text, data.classes)?;
                let parts = LossParts {
                    ce: contrastive_ce(tape, f_hat, w_sep, &batch_targets, tau)?,
                    kg_text: kg_text(tape, w_clip_v, w_sep)?,
                    kg_visual: kg_visual(tape, f_hat, f)?,
                    ce_visual: ce_visual(tape, f_hat, w_clip_v, &batch_targets, tau)?,
                };
                let (loss, report) = total_loss(tape, &parts, weights)?;
                tape.backward(loss)?;
                Ok((f_hat, w_sep, report))
            };
            let (f_hat, w_sep, report) = forward(&mut tape).map_err(|e| match e {
                Error::Numeric(reason) => Error::Divergence { step, reason },
                other => other,
            })?;
            audit_frozen(&tape, &w)?;

            let mut vars = Vec::with_capacity(flat.len());
            p.for_each(&mut |_, v| vars.push(*v));
            let grads: Vec<Option<&Tensor>> = vars.iter().map(|&v| tape.grad(v)).collect();
            adam_step(&mut flat, &grads, &mut adam, train.lr)?;
            if let Some(bad) = flat.iter().position(|t| !t.all_finite()) {
                return Err(Error::Divergence {
                    step,
                    reason: format!("non-finite values in learnable tensor {bad}"),
                });
            }
            prompts.assign(&flat);

            let predicted = classify(tape.value(f_hat), tape.value(w_sep))?;
            let correct = predicted.iter().zip(&batch_targets).filter(|(a, b)| a == b).count();
            metrics.push(StepMetrics {
                epoch,
                step,
                ce: report.ce,
                kg_text: report.kg_text,
                kg_visual: report.kg_visual,
                ce_visual: report.ce_visual,
                total: report.total,
                train_acc: 100.0 * correct as f64 / ids.len() as f64,
            });
            step += 1;
        }
    }
    if backbone.checksum() != checksum {
        return Err(Error::Contract("backbone changed during tuning".into()));
    }
    Ok(TuneOutcome {
        prompts,
        metrics,
        backbone_checksum: checksum,
    })
}

fn audit_frozen(tape: &Tape, w: &crate::backbone::BackboneWeights<Var>) -> Result<()> {
    let mut leaked = None;
    w.for_each(&mut |name, v| {
        if leaked.is_none() && tape.grad(*v).is_some() {
            leaked = Some(name);
        }
    });
    match leaked {
        Some(name) => Err(Error::Contract(format!("frozen parameter {name} received a gradient"))),
        None => Ok(()),
    }
}

/// Rows `ids` of a tensor along its first axis.
pub fn gather(t: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let per: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(ids.len() * per);
    for &i in ids {
        if i >= t.shape()[0] {
            return Err(Error::Bounds {
                op: "gather",
                start: i,
                end: i + 1,
                extent: t.shape()[0],
            });
        }
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = ids.len();
    Tensor::new(&shape, data)
}

pub const METRICS_HEADER: &str = "epoch,step,ce,kg_text,kg_visual,ce_visual,total,train_acc";

pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.epoch, m.step, m.ce, m.kg_text, m.kg_visual, m.ce_visual, m.total, m.train_acc
        );
    }
    out
}

pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, metrics_csv(metrics)).map_err(|e| Error::io(path, e))
}
