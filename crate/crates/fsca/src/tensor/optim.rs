//! Adaptive-moment parameter updates.

use super::{rf, GradTensor, Real};
use crate::error::{Error, Result};

/// Per-parameter first/second moment accumulators plus step bookkeeping.
/// The accumulator layout mirrors the parameter list handed to `new`, and the
/// same list (same order, same shapes) must be passed to every `step`.
pub struct AdamState<F: Real> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    sizes: Vec<usize>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &[GradTensor<F>], lr: f64) -> Self {
        AdamState {
            lr: rf(lr),
            beta1: rf(0.9),
            beta2: rf(0.999),
            eps: rf(1e-8),
            step: 0,
            m: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
            sizes: params.iter().map(|p| p.numel()).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. Missing gradients count as zero, so
    /// untouched parameters stay put and their moments stay zero.
    pub fn step(&mut self, params: &[GradTensor<F>]) -> Result<()> {
        if params.len() != self.sizes.len() {
            return Err(Error::Dimension(format!(
                "adam: {} parameters given, state tracks {}",
                params.len(),
                self.sizes.len()
            )));
        }
        for (p, &n) in params.iter().zip(self.sizes.iter()) {
            if p.numel() != n {
                return Err(Error::Dimension(format!(
                    "adam: parameter of {} elements where state expects {}",
                    p.numel(),
                    n
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let one = F::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        for (idx, p) in params.iter().enumerate() {
            let grad = p.grad();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            p.with_node_mut(|node| {
                for i in 0..node.data.len() {
                    let g = grad.as_ref().map(|g| g[i]).unwrap_or_else(F::zero);
                    m[i] = self.beta1 * m[i] + (one - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (one - self.beta2) * g * g;
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    node.data[i] = node.data[i] - self.lr * mh / (vh.sqrt() + self.eps);
                }
            });
        }
        Ok(())
    }
}

/// Clear gradients on a parameter list.
pub fn zero_grads<F: Real>(params: &[GradTensor<F>]) {
    for p in params {
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let p = GradTensor::param(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut opt = AdamState::new(&[p.clone()], 1e-3);
        opt.step(&[p.clone()]).unwrap();
        assert_eq!(p.data_vec(), vec![1.0, -2.0, 0.5]);
        assert_eq!(opt.step_count(), 1);
        assert!(opt.m[0].iter().all(|&x| x == 0.0) && opt.v[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn first_step_moves_by_roughly_lr_times_sign() {
        let lr = 1e-3;
        for g in [0.5f64, -2.0, 10.0] {
            let p = GradTensor::param(vec![1], vec![0.0]).unwrap();
            p.with_node_mut(|n| n.grad = Some(vec![g]));
            let mut opt = AdamState::new(&[p.clone()], lr);
            opt.step(&[p.clone()]).unwrap();
            let delta = p.data_vec()[0];
            assert!(
                (delta + lr * g.signum()).abs() < 1e-6 * lr.abs() + 1e-9,
                "delta {delta} for gradient {g}"
            );
        }
    }

    #[test]
    fn identical_state_and_grads_give_bitwise_identical_updates() {
        let run = || {
            let p = GradTensor::param(vec![4], vec![0.3, -0.1, 2.0, 0.9]).unwrap();
            let mut opt = AdamState::new(&[p.clone()], 2e-3);
            for k in 0..5 {
                p.with_node_mut(|n| {
                    n.grad = Some(vec![0.1 * k as f64, -0.2, 0.05, 1.0]);
                });
                opt.step(&[p.clone()]).unwrap();
            }
            p.data_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let p = GradTensor::param(vec![2], vec![0.0; 2]).unwrap();
        let q = GradTensor::param(vec![3], vec![0.0; 3]).unwrap();
        let mut opt = AdamState::new(&[p], 1e-3);
        assert!(matches!(
            opt.step(&[q]),
            Err(crate::error::Error::Dimension(_))
        ));
    }
}
