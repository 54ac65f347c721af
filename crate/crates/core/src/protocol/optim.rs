use crate::tensor::{Tensor, TensorError};
use crate::{Error, Result};

/// `lr_init · (1 − iter/max_iter)^0.9`
pub fn poly_lr(iter: usize, max_iter: usize, lr_init: f64) -> Result<f64> {
    if iter > max_iter || max_iter == 0 {
        return Err(Error::Config(format!("iteration {iter} outside 0..={max_iter}")));
    }
    Ok(lr_init * (1.0 - iter as f64 / max_iter as f64).powf(0.9))
}

/// SGD with momentum and L2 weight decay. Velocities live as long as the
/// optimizer; create a fresh one per learning step.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    /// `v ← m·v + (g + wd·p)`, `p ← p − lr·v` for each parameter, using the
    /// gradient stored on the tensor (zero when absent).
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(TensorError::Invalid(format!("optimizer tracks {} tensors, got {}", self.velocity.len(), params.len())).into());
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if v.len() != p.len() {
                return Err(TensorError::ShapeMismatch { lhs: vec![v.len()], rhs: p.shape().to_vec() }.into());
            }
            let grad = p.grad().map(<[f64]>::to_vec);
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                v[i] = self.momentum * v[i] + (g + self.weight_decay * data[i]);
                data[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_points() {
        assert_eq!(poly_lr(0, 100, 0.01).unwrap(), 0.01);
        assert_eq!(poly_lr(100, 100, 0.01).unwrap(), 0.0);
        assert!((poly_lr(50, 100, 1.0).unwrap() - 0.535887).abs() < 1e-6);
        assert!(poly_lr(101, 100, 1.0).is_err());
    }

    #[test]
    fn hand_update() {
        let mut p = Tensor::from_vec(vec![1.0]);
        p.accumulate_grad(&[1.0]).unwrap();
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
        // second step: v = 0.9·1 + 1 = 1.9
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert!((p.data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = Tensor::from_vec(vec![0.3, -2.0]);
        Sgd::new(0.9, 0.0).step(&mut [&mut p], 0.5).unwrap();
        assert_eq!(p.data(), &[0.3, -2.0]);
    }

    #[test]
    fn tensor_count_must_not_change() {
        let mut a = Tensor::from_vec(vec![1.0]);
        let mut b = Tensor::from_vec(vec![1.0]);
        let mut opt = Sgd::new(0.9, 1e-4);
        opt.step(&mut [&mut a], 0.1).unwrap();
        assert!(opt.step(&mut [&mut a, &mut b], 0.1).is_err());
    }
}
