use std::f64::consts::PI;

use super::TrainConfig;
use crate::error::{Error, Result};

/// `lr0 * cos(7 pi s / (16 S))`, defined for any `s`.
pub fn cosine_lr(lr0: f64, step: u64, total_steps: u64) -> f64 {
    lr0 * (7.0 * PI * step as f64 / (16.0 * total_steps as f64)).cos()
}

/// Linear warmup from 0 over `warmup_steps`, then the cosine decay.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> Result<f64> {
    if step >= config.steps {
        return Err(Error::input(format!(
            "step {step} outside the schedule of {} steps",
            config.steps
        )));
    }
    if step < config.warmup_steps {
        return Ok(config.lr * step as f64 / config.warmup_steps as f64);
    }
    Ok(cosine_lr(config.lr, step, config.steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn config(steps: u64, warmup: u64) -> TrainConfig {
        TrainConfig {
            steps,
            warmup_steps: warmup,
            lr: 0.03,
            ..TrainConfig::cifar()
        }
    }

    #[test]
    fn schedule_examples() {
        let c = config(1 << 20, 0);
        assert_eq!(lr_schedule(0, &c).unwrap(), 0.03);
        // 0.03 * cos(7 pi / 32) and 0.03 * cos(7 pi / 16)
        assert_abs_diff_eq!(lr_schedule(1 << 19, &c).unwrap(), 0.023_190_3, epsilon = 1e-6);
        assert_abs_diff_eq!(cosine_lr(0.03, 1 << 20, 1 << 20), 0.005_852_7, epsilon = 1e-6);
        assert!(matches!(lr_schedule(1 << 20, &c), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn never_negative_and_non_increasing_after_warmup() {
        let c = config(1000, 100);
        let lrs: Vec<f64> = (0..1000).map(|s| lr_schedule(s, &c).unwrap()).collect();
        assert_eq!(lrs[0], 0.0);
        assert_abs_diff_eq!(lrs[50], 0.015, epsilon = 1e-15);
        assert!(lrs.iter().all(|&v| v >= 0.0));
        assert!(lrs[100..].windows(2).all(|w| w[1] <= w[0]));
    }
}
