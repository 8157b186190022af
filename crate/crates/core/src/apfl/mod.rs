//! Feedback-driven training: learning-rate decay, the rule-based performance
//! monitor, the staged curriculum, and the per-round training step.

mod monitor;
mod stage;
mod trainer;

pub use monitor::{least_squares_slope, Adjustment, Monitor, MonitorConfig};
pub use stage::{instance_noise, Stage, StageConfig, StageSettings};
pub use trainer::{RoundOutcome, Trainer, TrainerRngs, TrainerState};

use crate::error::{invalid, Result};

/// Learning rates never drop below this.
pub const LR_FLOOR: f64 = 1e-6;

/// `η · γ^(1/step)`, clamped at [`LR_FLOOR`].
pub fn steplr_update(eta: f64, gamma: f64, step: u32) -> Result<f64> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid(format!("decay factor {gamma} outside (0, 1]")));
    }
    if step == 0 {
        return Err(invalid("scheduler step must be positive"));
    }
    Ok((eta * gamma.powf(1.0 / step as f64)).max(LR_FLOOR))
}

/// Everything measured in one round.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundMetrics {
    pub round: u64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub loss_fm: f64,
    pub loss_lgcl: f64,
    /// Share of real samples the discriminator scored as real.
    pub d_acc_real: f64,
    /// Share of generated samples it scored as fake.
    pub d_acc_fake: f64,
    pub quality: f64,
    pub coverage: usize,
}

impl RoundMetrics {
    pub fn d_acc(&self) -> f64 {
        0.5 * (self.d_acc_real + self.d_acc_fake)
    }

    pub fn is_finite(&self) -> bool {
        [self.loss_g, self.loss_d, self.loss_fm, self.loss_lgcl, self.d_acc_real, self.d_acc_fake, self.quality]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steplr_examples() {
        assert_eq!(steplr_update(0.1, 1.0, 3).unwrap(), 0.1);
        assert!((steplr_update(0.1, 0.5, 2).unwrap() - 0.1 * 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(steplr_update(2e-6, 0.1, 1).unwrap(), LR_FLOOR);
        assert!(steplr_update(0.1, 0.0, 1).is_err());
        assert!(steplr_update(0.1, 0.5, 0).is_err());
    }

    #[test]
    fn composition_law() {
        let (eta0, gamma, step) = (0.1, 0.9, 4);
        let mut eta = eta0;
        for k in 1..=50 {
            eta = steplr_update(eta, gamma, step).unwrap();
            let closed = eta0 * gamma.powf(k as f64 / step as f64);
            assert!((eta - closed).abs() < 1e-12);
        }
    }
}
