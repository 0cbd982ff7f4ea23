//! Loss terms of the tuning objective.
//!
//! Every term takes unit-norm embeddings: `ce` scores images against a class
//! embedding matrix by cosine similarity over a temperature, the two
//! consistency terms are squared distances to the frozen embeddings.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub omega_t: f64,
    pub omega_v: f64,
    /// Temperature; the backbone's when absent.
    pub tau: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            omega_t: 8.0,
            omega_v: 6.0,
            tau: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega_t >= 0.0 && self.omega_v >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0, got omega_t={} omega_v={}",
                self.omega_t, self.omega_v
            )));
        }
        if let Some(tau) = self.tau.filter(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::Config(format!("tau must be positive, got {tau}")));
        }
        Ok(())
    }

    pub fn tau_or(&self, backbone_tau: f64) -> f64 {
        self.tau.unwrap_or(backbone_tau)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub kg_text: f64,
    pub kg_visual: f64,
    pub ce_visual: f64,
    pub total: f64,
}

/// Mean negative log-likelihood of `labels` under
/// `softmax(images · classesᵀ / tau)`.
pub fn contrastive_ce(tape: &mut Tape, images: Var, classes: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let n_classes = tape.shape(classes)[0];
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Contract(format!("label {bad} outside {n_classes} classes")));
    }
    if labels.len() != tape.shape(images)[0] {
        return Err(Error::dim("contrastive_ce", tape.shape(images), &[labels.len()]));
    }
    let wt = tape.permute(classes, &[1, 0])?;
    let logits = tape.matmul(images, wt)?;
    let logits = tape.scale(logits, 1.0 / tau);
    let logp = tape.log_softmax_rows(logits)?;
    tape.nll(logp, labels)
}

/// Squared distance between two `[rows, d]` matrices divided by `rows`.
fn mean_row_sq_distance(tape: &mut Tape, op: &'static str, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) || tape.shape(a).len() != 2 {
        return Err(Error::dim(op, tape.shape(a), tape.shape(b)));
    }
    let rows = tape.shape(a)[0] as f64;
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / rows))
}

/// `||W_clip − W_sep||² / N_c`.
pub fn kg_text(tape: &mut Tape, w_clip: Var, w_sep: Var) -> Result<Var> {
    mean_row_sq_distance(tape, "kg_text", w_clip, w_sep)
}

/// Per-sample mean of `||f̂_b − f_b||²`.
pub fn kg_visual(tape: &mut Tape, f_hat: Var, f: Var) -> Result<Var> {
    mean_row_sq_distance(tape, "kg_visual", f_hat, f)
}

/// Cross entropy of the tuned image embeddings against the frozen classifier.
pub fn ce_visual(tape: &mut Tape, f_hat: Var, w_clip: Var, labels: &[usize], tau: f64) -> Result<Var> {
    contrastive_ce(tape, f_hat, w_clip, labels, tau)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub ce: Var,
    pub kg_text: Var,
    pub kg_visual: Var,
    pub ce_visual: Var,
}

/// `ce + omega_t·kg_text + omega_v·kg_visual + ce_visual`.
pub fn total_loss(tape: &mut Tape, parts: &LossParts, weights: &LossWeights) -> Result<(Var, LossReport)> {
    let named = [
        ("ce", parts.ce),
        ("kg_text", parts.kg_text),
        ("kg_visual", parts.kg_visual),
        ("ce_visual", parts.ce_visual),
    ];
    let mut values = [0.0; 4];
    for (slot, (name, v)) in values.iter_mut().zip(named) {
        let t = tape.value(v);
        if t.len() != 1 {
            return Err(Error::Contract(format!("loss term {name} is not a scalar")));
        }
        *slot = t.item();
        if !slot.is_finite() {
            return Err(Error::Numeric(format!("loss term {name} is {slot}")));
        }
    }
    let kt = tape.scale(parts.kg_text, weights.omega_t);
    let kv = tape.scale(parts.kg_visual, weights.omega_v);
    let total = tape.add(parts.ce, kt)?;
    let total = tape.add(total, kv)?;
    let total = tape.add(total, parts.ce_visual)?;
    let report = LossReport {
        ce: values[0],
        kg_text: values[1],
        kg_visual: values[2],
        ce_visual: values[3],
        total: tape.value(total).item(),
    };
    Ok((total, report))
}

/// The full tuning objective from the four embedding matrices.
#[allow(clippy::too_many_arguments)]
pub fn full_objective(
    tape: &mut Tape,
    f_hat: Var,
    w_sep: Var,
    f: Var,
    w_clip: Var,
    labels: &[usize],
    weights: &LossWeights,
    tau: f64,
) -> Result<(Var, LossReport)> {
    let parts = LossParts {
        ce: contrastive_ce(tape, f_hat, w_sep, labels, tau)?,
        kg_text: kg_text(tape, w_clip, w_sep)?,
        kg_visual: kg_visual(tape, f_hat, f)?,
        ce_visual: ce_visual(tape, f_hat, w_clip, labels, tau)?,
    };
    total_loss(tape, &parts, weights)
}
