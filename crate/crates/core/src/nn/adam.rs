//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::nn::params::{ArchSpec, Params};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment buffers for one parameter.
#[derive(Clone, Debug, Default)]
pub struct MomentBuf<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
}

/// One bias-corrected Adam update on a single parameter.
///
/// Weight decay is decoupled: `param -= lr_eff * wd * param` is applied
/// before the adaptive update. `step` is the 1-based update count.
pub fn adam_step<S: Scalar>(
    hyper: &AdamHyper,
    step: u64,
    lr_factor: f64,
    param: &mut [S],
    grad: &[S],
    moments: &mut MomentBuf<S>,
) -> Result<()> {
    if grad.len() != param.len() {
        return Err(Error::shape(
            "adam_step",
            format!("gradient of length {}", param.len()),
            format!("{}", grad.len()),
        ));
    }
    if moments.m.is_empty() {
        moments.m = vec![S::zero(); param.len()];
        moments.v = vec![S::zero(); param.len()];
    }
    if moments.m.len() != param.len() {
        return Err(Error::shape(
            "adam_step",
            format!("moment buffers of length {}", param.len()),
            format!("{}", moments.m.len()),
        ));
    }
    let lr = S::of_f64(hyper.lr * lr_factor);
    let b1 = S::of_f64(hyper.beta1);
    let b2 = S::of_f64(hyper.beta2);
    let eps = S::of_f64(hyper.epsilon);
    let one = S::one();
    let c1 = one - S::of_f64(hyper.beta1.powi(step as i32));
    let c2 = one - S::of_f64(hyper.beta2.powi(step as i32));
    let wd = S::of_f64(hyper.weight_decay);

    for i in 0..param.len() {
        if hyper.weight_decay != 0.0 {
            param[i] = param[i] - lr * wd * param[i];
        }
        let g = grad[i];
        moments.m[i] = b1 * moments.m[i] + (one - b1) * g;
        moments.v[i] = b2 * moments.v[i] + (one - b2) * g * g;
        let m_hat = moments.m[i] / c1;
        let v_hat = moments.v[i] / c2;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Optimizer over a whole parameter set, with a per-parameter learning-rate
/// factor (the encoder fine-tunes at a fraction of the base rate).
pub struct Adam<S> {
    pub hyper: AdamHyper,
    moments: Vec<MomentBuf<S>>,
    step_count: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(arch: &ArchSpec, hyper: AdamHyper) -> Self {
        Adam {
            hyper,
            moments: vec![MomentBuf::default(); arch.specs().len()],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update from `(param index, gradient)` pairs.
    pub fn step(
        &mut self,
        arch: &ArchSpec,
        params: &mut Params<S>,
        grads: &[(usize, Vec<S>)],
        lr_factor: impl Fn(&str) -> f64,
    ) -> Result<()> {
        self.step_count += 1;
        for (idx, grad) in grads {
            let name = &arch.specs()[*idx].name;
            let factor = lr_factor(name);
            if factor == 0.0 {
                continue;
            }
            let moments = &mut self.moments[*idx];
            let param = &mut params.buffers_mut()[*idx];
            adam_step(&self.hyper, self.step_count, factor, param, grad, moments)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        // bias correction makes m_hat = g and v_hat = g^2 on step one
        let hyper = AdamHyper { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut p = vec![1.0f64, -2.0, 0.5];
        let g = vec![0.3f64, -0.7, 2.0];
        let mut mom = MomentBuf::default();
        adam_step(&hyper, 1, 1.0, &mut p, &g, &mut mom).unwrap();
        for (i, (pv, gv)) in p.iter().zip(g.iter()).enumerate() {
            let expect = [1.0, -2.0, 0.5][i] - 0.1 * gv.signum();
            assert!((pv - expect).abs() < 1e-6, "param {i}: {pv} vs {expect}");
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        // all-zero gradients keep the moments at zero, so the parameter
        // never moves
        let hyper = AdamHyper { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut p = vec![1.5f64, -0.25];
        let before = p.clone();
        let mut mom = MomentBuf::default();
        for t in 1..=5 {
            adam_step(&hyper, t, 1.0, &mut p, &[0.0, 0.0], &mut mom).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn moments_decay_toward_zero_on_zero_grad() {
        let hyper = AdamHyper { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut p = vec![1.5f64, -0.25];
        let mut mom = MomentBuf { m: vec![0.4, -0.2], v: vec![0.09, 0.01] };
        let m_before = mom.m.clone();
        let v_before = mom.v.clone();
        adam_step(&hyper, 3, 1.0, &mut p, &[0.0, 0.0], &mut mom).unwrap();
        for i in 0..2 {
            assert!(mom.m[i].abs() < m_before[i].abs());
            assert!(mom.v[i].abs() < v_before[i].abs());
        }
    }

    #[test]
    fn quadratic_descent_decreases_every_step() {
        // f(x) = x^2 from x = 1 with lr 0.1: f strictly decreases for 10 steps
        let hyper = AdamHyper { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut x = vec![1.0f64];
        let mut mom = MomentBuf::default();
        let mut last = x[0] * x[0];
        for t in 1..=10 {
            let g = vec![2.0 * x[0]];
            adam_step(&hyper, t, 1.0, &mut x, &g, &mut mom).unwrap();
            let f = x[0] * x[0];
            assert!(f < last, "step {t}: {f} !< {last}");
            last = f;
        }
    }

    #[test]
    fn decoupled_decay_shrinks_params_before_update() {
        let hyper = AdamHyper { lr: 0.5, weight_decay: 0.1, ..Default::default() };
        let mut p = vec![1.0f64];
        let mut mom = MomentBuf::default();
        // zero gradient (fresh moments): only the decay term acts
        adam_step(&hyper, 1, 1.0, &mut p, &[0.0], &mut mom).unwrap();
        assert!((p[0] - (1.0 - 0.5 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let hyper = AdamHyper::default();
        let mut p = vec![1.0f64, 2.0];
        let mut mom = MomentBuf::default();
        assert!(adam_step(&hyper, 1, 1.0, &mut p, &[0.0], &mut mom).is_err());
    }
}
