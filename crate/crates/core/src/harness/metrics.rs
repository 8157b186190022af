//! Sample-quality measures and the per-round CSV records.

use std::fmt::Write as _;

use super::datasets::RingConfig;

/// Outcome of a coverage measurement.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Coverage {
    pub covered: usize,
    pub modes: usize,
    /// Share of samples close to some mode.
    pub high_quality: f64,
}

impl Coverage {
    /// `covered / modes · high_quality`.
    pub fn quality(&self) -> f64 {
        if self.modes == 0 {
            return 0.0;
        }
        self.covered as f64 / self.modes as f64 * self.high_quality
    }
}

/// Minimum hits for a mode to count as covered.
fn min_hits(n: usize, modes: usize) -> f64 {
    (n as f64 / (10.0 * modes as f64)).max(1.0)
}

fn tally(nearest: impl Iterator<Item = Option<usize>>, n: usize, modes: usize) -> Coverage {
    let mut hits = vec![0usize; modes];
    let mut good = 0usize;
    for m in nearest.flatten() {
        hits[m] += 1;
        good += 1;
    }
    let need = min_hits(n, modes);
    Coverage {
        covered: hits.iter().filter(|&&h| h as f64 >= need).count(),
        modes,
        high_quality: if n == 0 { 0.0 } else { good as f64 / n as f64 },
    }
}

/// A sample is high quality within `30σ` of a mode centre; a mode is covered
/// once it holds at least `max(1, n / (10M))` such samples.
pub fn ring_coverage(samples: &[[f64; 2]], cfg: &RingConfig) -> Coverage {
    let centers = cfg.centers();
    let r2 = (30.0 * cfg.std).powi(2);
    let nearest = samples.iter().map(|p| {
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for (m, c) in centers.iter().enumerate() {
            let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            if d < best_d {
                best = m;
                best_d = d;
            }
        }
        (best_d <= r2).then_some(best)
    });
    tally(nearest, samples.len(), cfg.modes)
}

/// Mean squared pixel error under which an image counts as high quality.
pub const IMAGE_MATCH_MSE: f64 = 0.15;

/// Image analogue: each sample is matched to its nearest reference image; a
/// close match counts towards the reference's class.
pub fn image_coverage(samples: &[Vec<f64>], refs: &[Vec<f64>], labels: &[usize], classes: usize) -> Coverage {
    let nearest = samples.iter().map(|s| {
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for (i, r) in refs.iter().enumerate() {
            let d = s.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s.len() as f64;
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        (best_d < IMAGE_MATCH_MSE && !refs.is_empty()).then(|| labels[best])
    });
    tally(nearest, samples.len(), classes)
}

pub const METRICS_HEADER: &str =
    "round,stage,L_G,L_D,L_FM,L_LGCL,d_acc_real,d_acc_fake,eta_G,eta_D,lambda_aux,balance_action,reward,quality,coverage";

/// One metrics CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub round: u64,
    pub stage: String,
    pub loss_g: f64,
    pub loss_d: f64,
    pub loss_fm: f64,
    pub loss_lgcl: f64,
    pub d_acc_real: f64,
    pub d_acc_fake: f64,
    pub eta_g: f64,
    pub eta_d: f64,
    pub lambda_aux: f64,
    /// `-1` when the referee is off.
    pub action: i64,
    pub reward: f64,
    pub quality: f64,
    pub coverage: usize,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.stage,
            self.loss_g,
            self.loss_d,
            self.loss_fm,
            self.loss_lgcl,
            self.d_acc_real,
            self.d_acc_fake,
            self.eta_g,
            self.eta_d,
            self.lambda_aux,
            self.action,
            self.reward,
            self.quality,
            self.coverage
        )
    }
}

pub const BALANCE_HEADER: &str = "round,s0,s1,s2,s3,s4,s5,s6,s7,action,reward,epsilon,td_loss";

pub fn balance_csv_row(r: &crate::balance::BalanceRecord) -> String {
    let mut s = format!("{}", r.round);
    for v in r.obs {
        write!(s, ",{v}").expect("string write");
    }
    let td = r.td_loss.map(|v| v.to_string()).unwrap_or_default();
    write!(s, ",{},{},{},{}", r.action, r.reward, r.epsilon, td).expect("string write");
    s
}

pub const SCHEDULE_HEADER: &str = "round,eta_G,eta_D,lambda_aux,balance_action,triggers";
