use std::collections::VecDeque;
use std::fmt;

use super::RoundMetrics;

/// Monitor thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct MonitorConfig {
    pub window: usize,
    /// Mean discriminator accuracy above which it counts as too strong.
    pub strong_d: f64,
    /// Accuracy above which a stagnating generator counts as too weak.
    pub overconfident: f64,
    /// Generator-loss slope at or above `-slope_tol` counts as stagnation.
    pub slope_tol: f64,
    /// Quality slope below this counts as a plateau.
    pub quality_tol: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self { window: 20, strong_d: 0.8, overconfident: 0.7, slope_tol: 1e-3, quality_tol: 1e-3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Adjustment {
    /// Halve η_D and cap discriminator steps at one per generator step.
    WeakenDiscriminator,
    /// Turn on label smoothing and double λ_FM (up to its cap).
    SupportGenerator,
    /// Apply one learning-rate decay step to both networks.
    DecayLearningRates,
}

impl Adjustment {
    pub fn name(self) -> &'static str {
        match self {
            Adjustment::WeakenDiscriminator => "weaken_d",
            Adjustment::SupportGenerator => "support_g",
            Adjustment::DecayLearningRates => "decay_lr",
        }
    }
}

impl fmt::Display for Adjustment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordinary least-squares slope of `ys` against `0, 1, 2, ...`.
pub fn least_squares_slope(ys: &[f64]) -> f64 {
    let n = ys.len();
    if n < 2 {
        return 0.0;
    }
    let mean_x = (n - 1) as f64 / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - mean_x;
        num += dx * (y - mean_y);
        den += dx * dx;
    }
    num / den
}

/// Sliding window of round metrics with rule-based triggers. Rules are only
/// evaluated on a full window; the window is cleared after anything fires so
/// the next decision sees only post-adjustment rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct Monitor {
    pub cfg: MonitorConfig,
    pub window: VecDeque<RoundMetrics>,
}

impl Monitor {
    pub fn new(cfg: MonitorConfig) -> Self {
        Self { window: VecDeque::with_capacity(cfg.window), cfg }
    }

    pub fn update(&mut self, m: &RoundMetrics) -> Vec<Adjustment> {
        if self.window.len() == self.cfg.window {
            self.window.pop_front();
        }
        self.window.push_back(m.clone());
        if self.window.len() < self.cfg.window {
            return Vec::new();
        }
        let n = self.window.len() as f64;
        let acc = self.window.iter().map(RoundMetrics::d_acc).sum::<f64>() / n;
        let lg: Vec<f64> = self.window.iter().map(|m| m.loss_g).collect();
        let q: Vec<f64> = self.window.iter().map(|m| m.quality).collect();
        let mut out = Vec::new();
        if acc > self.cfg.strong_d {
            out.push(Adjustment::WeakenDiscriminator);
        }
        if least_squares_slope(&lg) >= -self.cfg.slope_tol && acc > self.cfg.overconfident {
            out.push(Adjustment::SupportGenerator);
        }
        if least_squares_slope(&q) < self.cfg.quality_tol {
            out.push(Adjustment::DecayLearningRates);
        }
        if !out.is_empty() {
            self.window.clear();
        }
        out
    }
}
