use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Classical momentum: `v ← μ·v + g`, then `p ← p − lr·v`.
pub fn sgd_momentum_step(
    param: &mut Tensor,
    grad: &[f32],
    velocity: &mut Tensor,
    lr: f32,
    momentum: f32,
) -> Result<()> {
    if lr.is_nan() || lr < 0.0 || !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!("need lr >= 0 and 0 <= momentum < 1, got lr={lr} momentum={momentum}")));
    }
    if grad.len() != param.len() || velocity.shape() != param.shape() {
        return Err(Error::shape(
            "sgd_momentum_step",
            format!("param {:?}, grad len {}, velocity {:?}", param.shape(), grad.len(), velocity.shape()),
        ));
    }
    for ((p, v), &g) in param.data_mut().iter_mut().zip(velocity.data_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers keyed by parameter name, created lazily at zero.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    lr: f32,
    momentum: f32,
    velocity: BTreeMap<String, Tensor>,
}

impl SgdMomentum {
    pub fn new(lr: f32, momentum: f32) -> Self {
        SgdMomentum { lr, momentum, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &[f32]) -> Result<()> {
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        sgd_momentum_step(param, grad, v, self.lr, self.momentum)
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut v = Tensor::zeros(&[3]);
        sgd_momentum_step(&mut p, &[0.5, 1.0, -1.0], &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.1, 0.5 + 0.1]);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        let mut v = Tensor::zeros(&[2]);
        sgd_momentum_step(&mut p, &[0.0, 0.0], &mut v, 0.01, 0.9).unwrap();
        assert_eq!(p.data(), &[3.0, 4.0]);
    }

    #[test]
    fn two_steps_match_unrolled_recurrence() {
        let (lr, mu) = (0.01f32, 0.9f32);
        let (g1, g2) = (0.7f32, -0.3f32);
        let mut p = Tensor::scalar(1.25);
        let mut v = Tensor::zeros(&[1]);
        sgd_momentum_step(&mut p, &[g1], &mut v, lr, mu).unwrap();
        sgd_momentum_step(&mut p, &[g2], &mut v, lr, mu).unwrap();

        let (lr, mu) = (lr as f64, mu as f64);
        let v1 = g1 as f64;
        let p1 = 1.25 - lr * v1;
        let v2 = mu * v1 + g2 as f64;
        let p2 = p1 - lr * v2;
        assert!((p.data()[0] as f64 - p2).abs() < 1e-7);
        assert!((v.data()[0] as f64 - v2).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_arguments() {
        let mut p = Tensor::zeros(&[2]);
        let mut v = Tensor::zeros(&[2]);
        assert!(sgd_momentum_step(&mut p, &[0.0], &mut v, 0.1, 0.5).is_err());
        assert!(sgd_momentum_step(&mut p, &[0.0, 0.0], &mut v, -0.1, 0.5).is_err());
        assert!(sgd_momentum_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 1.0).is_err());
        let mut v3 = Tensor::zeros(&[3]);
        assert!(sgd_momentum_step(&mut p, &[0.0, 0.0], &mut v3, 0.1, 0.5).is_err());
    }
}
