//! Flat `key = value` run configuration.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::apfl::{MonitorConfig, StageConfig};
use crate::balance::{DqnConfig, RewardMode};
use crate::dema::DemaConfig;
use crate::error::{Error, Result};
use crate::gctdrn::FusionMode;
use crate::models::{ModelConfig, SampleSpace};
use crate::nn::OptimKind;

use super::datasets::RingConfig;

/// Where training samples come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetSpec {
    Ring,
    Shapes,
    /// Directory of binary PGM images.
    Dir(PathBuf),
}

impl FromStr for DatasetSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(Self::Ring),
            "shapes" => Ok(Self::Shapes),
            _ => match s.strip_prefix("dir:") {
                Some(p) if !p.is_empty() => Ok(Self::Dir(PathBuf::from(p))),
                _ => Err(Error::Config(format!("dataset must be ring, shapes or dir:PATH, got {s:?}"))),
            },
        }
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ring => f.write_str("ring"),
            Self::Shapes => f.write_str("shapes"),
            Self::Dir(p) => write!(f, "dir:{}", p.display()),
        }
    }
}

fn parse_value<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse().map_err(|_| Error::Config(format!("bad value {raw:?} for {key}")))
}

macro_rules! run_config {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr, )*) => {
        /// Every tunable of a run. Serialized one `key = value` per line in
        /// declaration order.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            /// Sets one key from its text form (no range validation).
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => self.$field = parse_value(key, value)?, )*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $( writeln!(s, "{} = {}", stringify!($field), self.$field).expect("string write"); )*
                s
            }
        }
    };
}

run_config! {
    seed: u64 = 1,
    rounds: u64 = 2000,
    batch: usize = 16,
    dataset: DatasetSpec = DatasetSpec::Ring,
    optimizer: OptimKind = OptimKind::AdamW,
    /// Generator learning rate.
    lr_g: f64 = 1e-3,
    /// Discriminator (and auxiliary discriminator) learning rate.
    lr_d: f64 = 1e-3,
    weight_decay: f64 = 0.01,
    /// First-moment decay of AdamW for the three adversarial networks.
    adam_beta1: f64 = 0.5,
    lr_gamma: f64 = 0.95,
    lr_step: u32 = 2,
    /// Decay both rates every round instead of only when the monitor asks.
    lr_decay_every_round: bool = false,
    ema_decay: f64 = 0.9999,
    ema_warmup: bool = true,
    dropout: f64 = 0.1,
    lambda_fm: f64 = 1.0,
    lambda_fm_cap: f64 = 8.0,
    lambda_lgcl: f64 = 0.1,
    lambda_aux: f64 = 0.1,
    /// Real-label target when smoothing is on.
    real_label: f64 = 0.9,
    middle_from: f64 = 0.2,
    late_from: f64 = 0.7,
    noise_start: f64 = 0.1,
    weight_reg: f64 = 1e-4,
    window: usize = 20,
    strong_d: f64 = 0.8,
    overconfident: f64 = 0.7,
    slope_tol: f64 = 1e-3,
    quality_tol: f64 = 1e-3,
    /// Monitor rules on/off (stages and scheduler plumbing stay active).
    apfl: bool = true,
    balance: bool = true,
    /// Auxiliary feature discriminator on/off.
    afe: bool = true,
    /// Use the both-terms-on-generated-features auxiliary loss.
    aux_literal: bool = false,
    fusion: FusionMode = FusionMode::Additive,
    gen_blocks: usize = 3,
    channels: usize = 6,
    latent_dim: usize = 8,
    context_tokens: usize = 4,
    tau: f64 = 0.1,
    /// The referee keeps each learning rate within `[η₀ / span, η₀ · span]`.
    balance_lr_span: f64 = 1.5,
    dqn_hidden: usize = 64,
    dqn_lr: f64 = 1e-3,
    dqn_gamma: f64 = 0.95,
    replay_capacity: usize = 10_000,
    replay_warmup: usize = 500,
    replay_batch: usize = 64,
    target_sync: u64 = 200,
    eps_start: f64 = 1.0,
    eps_end: f64 = 0.05,
    eps_fraction: f64 = 0.5,
    reward: RewardMode = RewardMode::Shaped,
    ring_modes: usize = 8,
    ring_radius: f64 = 2.0,
    ring_std: f64 = 0.02,
    /// Fixed latent draws used for the per-round quality measurement.
    eval_samples: usize = 64,
}

fn check(ok: bool, key: &str, detail: impl fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{key}: {detail}")))
    }
}

impl RunConfig {
    /// Parses config text on top of the defaults. Unknown and repeated keys
    /// are errors; values are range-checked.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", lineno + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        check(self.rounds >= 1, "rounds", "must be at least 1")?;
        check(self.batch >= 2, "batch", "must be at least 2")?;
        for (k, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("dqn_lr", self.dqn_lr)] {
            check((0.0..=1.0).contains(&v), k, "must lie in [0, 1]")?;
        }
        check(self.weight_decay >= 0.0, "weight_decay", "must be nonnegative")?;
        check((0.0..1.0).contains(&self.adam_beta1), "adam_beta1", "must lie in [0, 1)")?;
        check(self.balance_lr_span >= 1.0, "balance_lr_span", "must be at least 1")?;
        check(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0, "lr_gamma", "must lie in (0, 1]")?;
        check(self.lr_step >= 1, "lr_step", "must be at least 1")?;
        check(unit(self.ema_decay), "ema_decay", "must lie in [0, 1]")?;
        check((0.0..1.0).contains(&self.dropout), "dropout", "must lie in [0, 1)")?;
        for (k, v) in [
            ("lambda_fm", self.lambda_fm),
            ("lambda_lgcl", self.lambda_lgcl),
            ("noise_start", self.noise_start),
            ("weight_reg", self.weight_reg),
        ] {
            check(v >= 0.0 && v.is_finite(), k, "must be finite and nonnegative")?;
        }
        check(self.lambda_fm_cap >= self.lambda_fm, "lambda_fm_cap", "must be at least lambda_fm")?;
        check(unit(self.lambda_aux), "lambda_aux", "must lie in [0, 1]")?;
        check(self.real_label > 0.5 && self.real_label <= 1.0, "real_label", "must lie in (0.5, 1]")?;
        check(
            unit(self.middle_from) && unit(self.late_from) && self.middle_from <= self.late_from,
            "middle_from/late_from",
            "need 0 <= middle_from <= late_from <= 1",
        )?;
        check(self.window >= 2, "window", "must be at least 2")?;
        for (k, v) in [("strong_d", self.strong_d), ("overconfident", self.overconfident)] {
            check(unit(v), k, "must lie in [0, 1]")?;
        }
        check(self.slope_tol >= 0.0, "slope_tol", "must be nonnegative")?;
        check(self.gen_blocks >= 1, "gen_blocks", "must be at least 1")?;
        check(self.channels >= 3 && self.channels.is_multiple_of(3), "channels", "must be a positive multiple of 3")?;
        check(self.latent_dim >= 1, "latent_dim", "must be at least 1")?;
        check(self.context_tokens >= 2, "context_tokens", "must be at least 2")?;
        check(self.tau > 0.0, "tau", "must be positive")?;
        check(self.dqn_hidden >= 1, "dqn_hidden", "must be at least 1")?;
        check(unit(self.dqn_gamma), "dqn_gamma", "must lie in [0, 1]")?;
        check(self.replay_capacity >= 1, "replay_capacity", "must be at least 1")?;
        check(
            self.replay_batch >= 1 && self.replay_batch <= self.replay_capacity,
            "replay_batch",
            "must lie in [1, replay_capacity]",
        )?;
        check(self.target_sync >= 1, "target_sync", "must be at least 1")?;
        check(
            unit(self.eps_start) && unit(self.eps_end) && self.eps_end <= self.eps_start,
            "eps_start/eps_end",
            "need 0 <= eps_end <= eps_start <= 1",
        )?;
        check(self.eps_fraction > 0.0 && self.eps_fraction <= 1.0, "eps_fraction", "must lie in (0, 1]")?;
        check(self.ring_modes >= 2, "ring_modes", "must be at least 2")?;
        check(self.ring_radius > 0.0, "ring_radius", "must be positive")?;
        check(self.ring_std >= 0.0, "ring_std", "must be nonnegative")?;
        check(self.eval_samples >= 1, "eval_samples", "must be at least 1")?;
        Ok(())
    }

    pub fn space(&self) -> SampleSpace {
        match self.dataset {
            DatasetSpec::Ring => SampleSpace::Point,
            _ => SampleSpace::Image,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let base = match self.space() {
            SampleSpace::Point => ModelConfig::ring(),
            SampleSpace::Image => ModelConfig::shapes(),
        };
        let mut dema = DemaConfig::new(self.channels);
        dema.context_tokens = self.context_tokens;
        dema.tau = self.tau;
        dema.dropout = self.dropout;
        let mut m = ModelConfig {
            latent_dim: self.latent_dim,
            channels: self.channels,
            blocks: self.gen_blocks,
            fusion: self.fusion,
            dema,
            dropout: self.dropout,
            ..base
        };
        m.clamp_windows();
        m
    }

    pub fn dqn_config(&self) -> DqnConfig {
        DqnConfig {
            hidden: self.dqn_hidden,
            lr: self.dqn_lr,
            gamma: self.dqn_gamma,
            capacity: self.replay_capacity,
            warmup: self.replay_warmup,
            batch: self.replay_batch,
            sync_every: self.target_sync,
            eps_start: self.eps_start,
            eps_end: self.eps_end,
            eps_fraction: self.eps_fraction,
            reward: self.reward,
        }
    }

    pub fn monitor_config(&self) -> MonitorConfig {
        MonitorConfig {
            window: self.window,
            strong_d: self.strong_d,
            overconfident: self.overconfident,
            slope_tol: self.slope_tol,
            quality_tol: self.quality_tol,
        }
    }

    pub fn stage_config(&self) -> StageConfig {
        StageConfig {
            middle_from: self.middle_from,
            late_from: self.late_from,
            noise_start: self.noise_start,
            weight_reg: self.weight_reg,
        }
    }

    pub fn ring_config(&self) -> RingConfig {
        RingConfig { modes: self.ring_modes, radius: self.ring_radius, std: self.ring_std }
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(s) => s,
        other => other.to_string(),
    }
}
