use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment buffers for a fixed, ordered list of learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads[i]` must be present for every
/// parameter; a missing one means the parameter fell off the graph.
pub fn adam_step(params: &mut [Tensor], grads: &[Option<&Tensor>], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step got {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(Option::is_none) {
        return Err(Error::Contract(format!("parameter {i} has no gradient")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].expect("checked above");
        if g.shape() != p.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
            *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + EPSILON);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_advances_step() {
        let mut p = vec![Tensor::new(&[2], vec![0.5, -1.0]).unwrap()];
        let g = Tensor::zeros(&[2]);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Some(&g)], &mut s, 0.1).unwrap();
        assert_eq!(p[0].data(), &[0.5, -1.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.2] {
            let mut p = vec![Tensor::scalar(1.0)];
            let grad = Tensor::scalar(g);
            let mut s = AdamState::new(&p);
            adam_step(&mut p, &[Some(&grad)], &mut s, 0.01).unwrap();
            let moved = p[0].item() - 1.0;
            assert!((moved + 0.01 * f64::signum(g)).abs() < 1e-8, "{moved}");
        }
    }

    #[test]
    fn descends_on_a_quadratic() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = AdamState::new(&p);
        let mut prev = 1.0;
        for _ in 0..10 {
            let g = Tensor::scalar(2.0 * p[0].item());
            adam_step(&mut p, &[Some(&g)], &mut s, 0.05).unwrap();
            let f = p[0].item().powi(2);
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut p = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
        let g = Tensor::scalar(1.0);
        let mut s = AdamState::new(&p);
        assert!(matches!(
            adam_step(&mut p, &[Some(&g), None], &mut s, 0.1),
            Err(Error::Contract(_))
        ));
        assert_eq!(s.step, 0);
    }
}
