use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::linear;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Fusion;

param_struct! {
    /// Two affine layers over `[selected ; prompt]`.
    pub struct MlpWeights {
        w1, b1, w2, b2,
    }
}

param_struct! {
    /// Query/key/value maps applied before fusion attention.
    pub struct ProjectionWeights {
        wq, wk, wv,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FusionWeights<T> {
    Mlp(MlpWeights<T>),
    Projections(ProjectionWeights<T>),
}

impl<T> FusionWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FusionWeights<U> {
        match self {
            FusionWeights::Mlp(w) => FusionWeights::Mlp(w.map(f)),
            FusionWeights::Projections(w) => FusionWeights::Projections(w.map(f)),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
        match self {
            FusionWeights::Mlp(w) => w.for_each(&format!("{prefix}mlp."), f),
            FusionWeights::Projections(w) => w.for_each(&format!("{prefix}proj."), f),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        match self {
            FusionWeights::Mlp(w) => w.for_each_mut(&format!("{prefix}mlp."), f),
            FusionWeights::Projections(w) => w.for_each_mut(&format!("{prefix}proj."), f),
        }
    }
}

impl FusionWeights<Tensor> {
    /// MLP layers start from scaled Gaussians; projections start at identity
    /// so they initially reproduce the parameter-free module.
    pub fn init(fusion: Fusion, d: usize, rng: &mut impl Rng) -> Option<Self> {
        match fusion {
            Fusion::Mlp => Some(FusionWeights::Mlp(MlpWeights {
                w1: Tensor::randn(rng, &[2 * d, d], 1.0 / ((2 * d) as f64).sqrt()),
                b1: Tensor::zeros(&[d]),
                w2: Tensor::randn(rng, &[d, d], 1.0 / (d as f64).sqrt()),
                b2: Tensor::zeros(&[d]),
            })),
            Fusion::Tfm => {
                let eye = identity(d);
                Some(FusionWeights::Projections(ProjectionWeights {
                    wq: eye.clone(),
                    wk: eye.clone(),
                    wv: eye,
                }))
            }
            Fusion::Add => None,
        }
    }
}

fn identity(d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[d, d]);
    for i in 0..d {
        t.set(&[i, i], 1.0);
    }
    t
}

fn check_pair(tape: &Tape, op: &str, selected: Var, prompt: Var) -> Result<()> {
    let (a, b) = (tape.shape(selected), tape.shape(prompt));
    if a.len() != 3 || a != b {
        return Err(Error::Contract(format!("{op} needs equal [k, N, d] segments, got {a:?} and {b:?}")));
    }
    Ok(())
}

/// Elementwise sum of the selected tokens and the prompt segment.
pub fn fuse_add(tape: &mut Tape, selected: Var, prompt: Var) -> Result<Var> {
    check_pair(tape, "fuse_add", selected, prompt)?;
    tape.add(selected, prompt)
}

/// `w2 · gelu(w1 · [selected ; prompt] + b1) + b2`, applied per token.
pub fn fuse_mlp(tape: &mut Tape, selected: Var, prompt: Var, w: &MlpWeights<Var>) -> Result<Var> {
    check_pair(tape, "fuse_mlp", selected, prompt)?;
    let x = tape.concat(&[selected, prompt], 2)?;
    let h = linear(tape, x, w.w1, w.b1)?;
    let h = tape.gelu(h);
    linear(tape, h, w.w2, w.b2)
}

/// Cross-attention with the selected tokens as queries and values and the
/// prompt tokens as keys: `softmax(S Pᵀ / √d) S` per batch element.
pub fn tfm_fuse(
    tape: &mut Tape,
    selected: Var,
    prompt: Var,
    n_heads: usize,
    projections: Option<&ProjectionWeights<Var>>,
) -> Result<Var> {
    tfm_fuse_traced(tape, selected, prompt, n_heads, projections).map(|(out, _)| out)
}

/// As [`tfm_fuse`], also returning the attention matrix `[N·heads, k, k]`.
pub fn tfm_fuse_traced(
    tape: &mut Tape,
    selected: Var,
    prompt: Var,
    n_heads: usize,
    projections: Option<&ProjectionWeights<Var>>,
) -> Result<(Var, Var)> {
    check_pair(tape, "tfm_fuse", selected, prompt)?;
    let (k, n, d) = {
        let s = tape.shape(selected);
        (s[0], s[1], s[2])
    };
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!("{n_heads} heads do not divide width {d}")));
    }
    let (q, key, v) = match projections {
        Some(p) => (
            tape.matmul(selected, p.wq)?,
            tape.matmul(prompt, p.wk)?,
            tape.matmul(selected, p.wv)?,
        ),
        None => (selected, prompt, selected),
    };
    let dh = d / n_heads;
    let heads = |t: &mut Tape, x: Var| -> Result<Var> {
        let x = t.reshape(x, &[k, n, n_heads, dh])?;
        let x = t.permute(x, &[1, 2, 0, 3])?;
        t.reshape(x, &[n * n_heads, k, dh])
    };
    let q = heads(tape, q)?;
    let key = heads(tape, key)?;
    let v = heads(tape, v)?;
    let scores = tape.batch_matmul(q, key, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax_rows(scores)?;
    let out = tape.batch_matmul(attn, v, false)?;
    let out = tape.reshape(out, &[n, n_heads, k, dh])?;
    let out = tape.permute(out, &[2, 0, 1, 3])?;
    let out = tape.reshape(out, &[k, n, d])?;
    Ok((out, attn))
}

/// Dispatches on the configured fusion strategy.
pub fn fuse(
    tape: &mut Tape,
    fusion: Fusion,
    selected: Var,
    prompt: Var,
    n_heads: usize,
    weights: Option<&FusionWeights<Var>>,
) -> Result<Var> {
    match (fusion, weights) {
        (Fusion::Add, _) => fuse_add(tape, selected, prompt),
        (Fusion::Mlp, Some(FusionWeights::Mlp(w))) => fuse_mlp(tape, selected, prompt, w),
        (Fusion::Mlp, _) => Err(Error::Contract("MLP fusion needs MLP weights".into())),
        (Fusion::Tfm, Some(FusionWeights::Projections(p))) => tfm_fuse(tape, selected, prompt, n_heads, Some(p)),
        (Fusion::Tfm, _) => tfm_fuse(tape, selected, prompt, n_heads, None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct loops over one batch element: `softmax(S Pᵀ/√d) S`.
    fn loop_oracle(s: &Tensor, p: &Tensor) -> Tensor {
        let (k, n, d) = (s.shape()[0], s.shape()[1], s.shape()[2]);
        let mut out = Tensor::zeros(&[k, n, d]);
        for b in 0..n {
            for i in 0..k {
                let mut logits = vec![0.0; k];
                for (j, l) in logits.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for f in 0..d {
                        dot += s.at(&[i, b, f]) * p.at(&[j, b, f]);
                    }
                    *l = dot / (d as f64).sqrt();
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                for f in 0..d {
                    let mut acc = 0.0;
                    for j in 0..k {
                        acc += (logits[j] - max).exp() / z * s.at(&[j, b, f]);
                    }
                    out.set(&[i, b, f], acc);
                }
            }
        }
        out
    }

    fn run_tfm(s: &Tensor, p: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let pv = tape.constant(p.clone());
        let (out, attn) = tfm_fuse_traced(&mut tape, sv, pv, 1, None).unwrap();
        (tape.value(out).clone(), tape.value(attn).clone())
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = Tensor::uniform(&mut rng, &[4, 3, 8], -1.0, 1.0);
        let p = Tensor::uniform(&mut rng, &[4, 3, 8], -1.0, 1.0);
        let (out, attn) = run_tfm(&s, &p);
        assert!(out.max_abs_diff(&loop_oracle(&s, &p)) <= 1e-12);
        for row in attn.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn singleton_returns_selected_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = Tensor::uniform(&mut rng, &[1, 2, 8], -1.0, 1.0);
        let p = Tensor::uniform(&mut rng, &[1, 2, 8], -1.0, 1.0);
        assert_eq!(run_tfm(&s, &p).0, s);
    }

    #[test]
    fn output_stays_in_selected_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = Tensor::uniform(&mut rng, &[5, 2, 6], -1.0, 1.0);
        let p = Tensor::uniform(&mut rng, &[5, 2, 6], -1.0, 1.0);
        for c in [1.0, 0.1, 10.0] {
            let (out, _) = run_tfm(&s, &p.map(|v| v * c));
            for b in 0..2 {
                for f in 0..6 {
                    let col: Vec<f64> = (0..5).map(|j| s.at(&[j, b, f])).collect();
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    for i in 0..5 {
                        let v = out.at(&[i, b, f]);
                        assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_projections_reproduce_parameter_free_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let s = Tensor::uniform(&mut rng, &[3, 2, 8], -1.0, 1.0);
        let p = Tensor::uniform(&mut rng, &[3, 2, 8], -1.0, 1.0);
        let Some(FusionWeights::Projections(w)) = FusionWeights::init(Fusion::Tfm, 8, &mut rng) else {
            panic!("projections expected");
        };
        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let pv = tape.constant(p.clone());
        let w = w.map(&mut |t| tape.constant(t.clone()));
        let out = tfm_fuse(&mut tape, sv, pv, 1, Some(&w)).unwrap();
        assert!(tape.value(out).max_abs_diff(&run_tfm(&s, &p).0) <= 1e-12);
    }

    #[test]
    fn multi_head_rows_are_convex_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let s = Tensor::uniform(&mut rng, &[4, 2, 8], -1.0, 1.0);
        let p = Tensor::uniform(&mut rng, &[4, 2, 8], -1.0, 1.0);
        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let pv = tape.constant(p);
        let (out, attn) = tfm_fuse_traced(&mut tape, sv, pv, 2, None).unwrap();
        assert_eq!(tape.shape(out), &[4, 2, 8]);
        assert_eq!(tape.shape(attn), &[4, 4, 4]);
    }

    #[test]
    fn add_and_mlp_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let a = Tensor::uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let b = Tensor::uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let zero = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let z = fuse_add(&mut tape, zero, bv).unwrap();
        assert_eq!(tape.value(z), &b);
        let ab = fuse_add(&mut tape, av, bv).unwrap();
        let ba = fuse_add(&mut tape, bv, av).unwrap();
        assert_eq!(tape.value(ab), tape.value(ba));

        let w = MlpWeights {
            w1: Tensor::zeros(&[8, 4]),
            b1: Tensor::zeros(&[4]),
            w2: Tensor::zeros(&[4, 4]),
            b2: Tensor::zeros(&[4]),
        }
        .map(&mut |t| tape.constant(t.clone()));
        let m = fuse_mlp(&mut tape, av, bv, &w).unwrap();
        assert_eq!(tape.value(m), &Tensor::zeros(&[2, 3, 4]));

        let short = tape.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(matches!(fuse_add(&mut tape, av, short), Err(Error::Contract(_))));
        assert!(matches!(tfm_fuse(&mut tape, av, short, 1, None), Err(Error::Contract(_))));
    }

    #[test]
    fn tfm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s = Tensor::uniform(&mut rng, &[3, 2, 4], -1.0, 1.0);
        let p = Tensor::uniform(&mut rng, &[3, 2, 4], -1.0, 1.0);
        let probe = Tensor::uniform(&mut rng, &[3, 2, 4], -1.0, 1.0);
        for heads in [1, 2] {
            let report = check_gradients(&[s.clone(), p.clone()], 1e-5, |tape, v| {
                let y = tfm_fuse(tape, v[0], v[1], heads, None)?;
                let pr = tape.constant(probe.clone());
                let y = tape.mul(y, pr)?;
                Ok(tape.sum(y))
            })
            .unwrap();
            assert!(report.max_rel_error <= 1e-4, "{heads} heads: {report:?}");
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let Some(FusionWeights::Mlp(mlp)) = FusionWeights::init(Fusion::Mlp, 4, &mut rng) else {
            panic!("mlp expected");
        };
        let probe = Tensor::uniform(&mut rng, &[3, 2, 4], -1.0, 1.0);
        let mut inputs = vec![
            Tensor::uniform(&mut rng, &[3, 2, 4], -1.0, 1.0),
            Tensor::uniform(&mut rng, &[3, 2, 4], -1.0, 1.0),
        ];
        mlp.for_each("", &mut |_, t| inputs.push(t.clone()));
        let report = check_gradients(&inputs, 1e-5, |tape, v| {
            let w = MlpWeights {
                w1: v[2],
                b1: v[3],
                w2: v[4],
                b2: v[5],
            };
            let y = fuse_mlp(tape, v[0], v[1], &w)?;
            let pr = tape.constant(probe.clone());
            let y = tape.mul(y, pr)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
