use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SGD with (optionally Nesterov) momentum and L2 weight decay, matching the
/// common `buf = m * buf + g; step = g + m * buf` formulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(num_params: usize, momentum: f64, nesterov: bool, weight_decay: f64) -> Self {
        Self {
            momentum,
            nesterov,
            weight_decay,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::input("optimizer state does not match parameters"));
        }
        let m = self.momentum;
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let d = g + self.weight_decay * *p;
            *v = m * *v + d;
            let update = if self.nesterov { d + m * *v } else { *v };
            *p -= lr * update;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_without_momentum() {
        let mut opt = Sgd::new(2, 0.0, false, 0.0);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[0.5, 0.5], 0.1).unwrap();
        assert_eq!(p, vec![0.95, -1.05]);
    }

    #[test]
    fn nesterov_two_steps_by_hand() {
        let mut opt = Sgd::new(1, 0.9, true, 0.0);
        let mut p = vec![0.0];
        opt.step(&mut p, &[1.0], 1.0).unwrap();
        // v = 1, update = 1 + 0.9
        assert!((p[0] + 1.9).abs() < 1e-15);
        opt.step(&mut p, &[1.0], 1.0).unwrap();
        // v = 1.9, update = 1 + 1.71
        assert!((p[0] + 1.9 + 2.71).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut opt = Sgd::new(1, 0.0, false, 0.5);
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0], 0.1).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-15);
        assert!(opt.step(&mut p, &[0.0, 1.0], 0.1).is_err());
    }
}
