//! SGD with classical momentum and per-epoch exponential learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub const DEFAULT_LEARNING_RATE: f64 = 0.002;
pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const DEFAULT_LR_DECAY: f64 = 0.985;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr0: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            decay: DEFAULT_LR_DECAY,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be >= 0", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid(format!("decay {} must lie in (0, 1]", self.decay)));
        }
        Ok(())
    }

    /// `lr0 * decay^epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi(epoch as i32)
    }
}

/// Optimizer state: one velocity buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub config: SgdConfig,
    pub velocity: Vec<Vec<T>>,
}

impl<T: Real> SgdState<T> {
    /// Zero velocity mirroring the given parameter tensor lengths.
    pub fn new(config: SgdConfig, shapes: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(SgdState {
            config,
            velocity: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        })
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.config.lr_at_epoch(epoch)
    }

    /// `v <- m v - lr g; w <- w + v` for every tensor.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::DimensionMismatch {
                expected: self.velocity.len(),
                actual: if params.len() != self.velocity.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        for ((w, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if w.len() != v.len() || g.len() != v.len() {
                return Err(Error::DimensionMismatch {
                    expected: v.len(),
                    actual: if w.len() != v.len() { w.len() } else { g.len() },
                });
            }
        }
        let m = T::from_f64_lossy(self.config.momentum);
        let lr = T::from_f64_lossy(lr);
        for ((w, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((wi, &gi), vi) in w.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = m * *vi - lr * gi;
                *wi += *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(lr0: f64, momentum: f64, decay: f64, n: usize) -> SgdState<f64> {
        SgdState::new(SgdConfig { lr0, momentum, decay }, &[n]).unwrap()
    }

    #[test]
    fn schedule() {
        let s = state(0.002, 0.99, 1.0, 1);
        assert_eq!(s.lr_at_epoch(0), 0.002);
        assert_eq!(s.lr_at_epoch(137), 0.002);
        let s = state(0.002, 0.99, 0.985, 1);
        assert_eq!(s.lr_at_epoch(0), 0.002);
        let lr = s.lr_at_epoch(200);
        // direct evaluation: 0.002 * 0.985^200 = 9.7336e-5
        assert!((lr - 9.7336e-5).abs() < 1e-9, "{lr}");
    }

    #[test]
    fn plain_sgd_step() {
        let mut s = state(0.1, 0.0, 1.0, 1);
        let mut w = vec![0.0];
        s.step(&mut [&mut w], &[&[1.0]], 0.1).unwrap();
        assert_eq!(w, vec![-0.1]);
    }

    #[test]
    fn momentum_recurrence() {
        let mut s = state(0.002, 0.99, 1.0, 1);
        let mut w = vec![0.0];
        s.step(&mut [&mut w], &[&[1.0]], 0.002).unwrap();
        assert!((s.velocity[0][0] + 0.002).abs() < 1e-15);
        assert!((w[0] + 0.002).abs() < 1e-15);
        s.step(&mut [&mut w], &[&[1.0]], 0.002).unwrap();
        assert!((s.velocity[0][0] + 0.00398).abs() < 1e-15);
        assert!((w[0] + 0.00598).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_fixed_point_and_decay() {
        let mut s = state(0.5, 0.9, 1.0, 2);
        let mut w = vec![1.0, -2.0];
        s.step(&mut [&mut w], &[&[0.0, 0.0]], 0.5).unwrap();
        assert_eq!(w, vec![1.0, -2.0]);

        s.velocity[0] = vec![1.0, 0.0];
        let v0 = 1.0;
        for t in 1..=5 {
            s.step(&mut [&mut w], &[&[0.0, 0.0]], 0.5).unwrap();
            assert!((s.velocity[0][0] - 0.9f64.powi(t) * v0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut s = state(0.1, 0.0, 1.0, 2);
        let mut w = vec![0.0];
        assert!(s.step(&mut [&mut w], &[&[1.0]], 0.1).is_err());
        assert!(SgdState::<f64>::new(SgdConfig { lr0: 0.1, momentum: 1.0, decay: 1.0 }, &[1]).is_err());
        assert!(SgdState::<f64>::new(SgdConfig { lr0: 0.1, momentum: 0.5, decay: 0.0 }, &[1]).is_err());
    }
}
