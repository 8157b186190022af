use std::fmt;

/// Curriculum phase. Ordered so comparisons express progress.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Early,
    Middle,
    Late,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Early => "early",
            Stage::Middle => "middle",
            Stage::Late => "late",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Stage boundaries and per-stage toggles.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub middle_from: f64,
    pub late_from: f64,
    /// Instance-noise σ at the start of the late stage.
    pub noise_start: f64,
    /// L2 penalty on discriminator weights in the late stage.
    pub weight_reg: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self { middle_from: 0.2, late_from: 0.7, noise_start: 0.1, weight_reg: 1e-4 }
    }
}

/// Settings in force for one round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSettings {
    pub stage: Stage,
    pub label_smoothing: bool,
    pub d_steps: usize,
    pub noise: f64,
    pub weight_reg: f64,
}

impl StageConfig {
    /// First round of the middle and late stages.
    pub fn boundaries(&self, total: u64) -> (u64, u64) {
        let at = |f: f64| (f * total as f64).ceil() as u64;
        (at(self.middle_from), at(self.late_from))
    }

    pub fn stage(&self, round: u64, total: u64) -> Stage {
        let (mid, late) = self.boundaries(total);
        if round < mid {
            Stage::Early
        } else if round < late {
            Stage::Middle
        } else {
            Stage::Late
        }
    }

    pub fn settings(&self, round: u64, total: u64) -> StageSettings {
        let stage = self.stage(round, total);
        match stage {
            Stage::Early => StageSettings { stage, label_smoothing: true, d_steps: 1, noise: 0.0, weight_reg: 0.0 },
            Stage::Middle => StageSettings { stage, label_smoothing: false, d_steps: 2, noise: 0.0, weight_reg: 0.0 },
            Stage::Late => StageSettings {
                stage,
                label_smoothing: false,
                d_steps: 2,
                noise: instance_noise(round, self.boundaries(total).1, total, self.noise_start),
                weight_reg: self.weight_reg,
            },
        }
    }
}

/// Linear decay from `start` at round `from` to 0 at the final round.
pub fn instance_noise(round: u64, from: u64, total: u64, start: f64) -> f64 {
    if round < from || total == 0 {
        return 0.0;
    }
    let last = total - 1;
    if last <= from {
        return 0.0;
    }
    start * (last.saturating_sub(round)) as f64 / (last - from) as f64
}
