//! AdamW with decoupled weight decay.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters; every param must carry a gradient.
    /// Gradients are cleared afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            for p in params.iter() {
                self.m.push(vec![0.0; p.data.len()]);
                self.v.push(vec![0.0; p.data.len()]);
            }
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad.is_none() {
                return Err(Error::MissingGrad { param: i });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(BETA1, t);
        let bc2 = 1.0 - libm::pow(BETA2, t);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad.take().unwrap();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.data.len() {
                let g = grad[j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                // decoupled decay, applied separately from the moment update
                p.data[j] -= self.lr * (mhat / (libm::sqrt(vhat) + EPS))
                    + self.lr * self.weight_decay * p.data[j];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap().param();
        p.accumulate_grad(&[0.0, 0.0]);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data, vec![1.0, -2.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // p=1, g=1, lr=0.1: mhat=1, vhat=1 -> p ≈ 1 - 0.1/(1+eps)
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap().param();
        p.accumulate_grad(&[1.0]);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + EPS));
        assert!((p.data[0] - expected).abs() < 1e-15);
        assert!((p.data[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_only_shrinks_by_exact_factor() {
        let mut p = Tensor::new(vec![1], vec![2.0]).unwrap().param();
        p.accumulate_grad(&[0.0]);
        let mut opt = AdamW::new(0.1, 0.01);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = Tensor::zeros(&[1]).param();
        let mut opt = AdamW::new(0.1, 0.0);
        assert!(matches!(
            opt.step(&mut [&mut p]),
            Err(Error::MissingGrad { param: 0 })
        ));
    }
}
