//! DQN referee: observes each round's training state, nudges learning rates
//! and the auxiliary loss weight, and learns from a replay pool which nudges
//! pay off.

mod qnet;
mod replay;

pub use qnet::{argmax, QNetwork};
pub use replay::{ReplayBuffer, Transition};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::apfl::{RoundMetrics, LR_FLOOR};
use crate::error::{Error, Result};

pub const OBS_DIM: usize = 8;
pub const N_ACTIONS: usize = 7;
pub const LR_CEIL: f64 = 1.0;
const LR_STEP: f64 = 1.2;
const AUX_STEP: f64 = 1.5;

/// Quantities the referee may change.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Knobs {
    pub eta_g: f64,
    pub eta_d: f64,
    pub lambda_aux: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    NoOp = 0,
    RaiseEtaG = 1,
    LowerEtaG = 2,
    RaiseEtaD = 3,
    LowerEtaD = 4,
    RaiseAux = 5,
    LowerAux = 6,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [
        Action::NoOp,
        Action::RaiseEtaG,
        Action::LowerEtaG,
        Action::RaiseEtaD,
        Action::LowerEtaD,
        Action::RaiseAux,
        Action::LowerAux,
    ];

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or_else(|| Error::InvalidArgument(format!("action id {id} out of range")))
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn inverse(self) -> Self {
        match self {
            Action::NoOp => Action::NoOp,
            Action::RaiseEtaG => Action::LowerEtaG,
            Action::LowerEtaG => Action::RaiseEtaG,
            Action::RaiseEtaD => Action::LowerEtaD,
            Action::LowerEtaD => Action::RaiseEtaD,
            Action::RaiseAux => Action::LowerAux,
            Action::LowerAux => Action::RaiseAux,
        }
    }

    /// Applies the action; rates are clamped to `[1e-6, 1]`, λ_aux to `[0, 1]`.
    pub fn apply(self, k: &mut Knobs) {
        let lr = |v: f64| v.clamp(LR_FLOOR, LR_CEIL);
        match self {
            Action::NoOp => {}
            Action::RaiseEtaG => k.eta_g = lr(k.eta_g * LR_STEP),
            Action::LowerEtaG => k.eta_g = lr(k.eta_g / LR_STEP),
            Action::RaiseEtaD => k.eta_d = lr(k.eta_d * LR_STEP),
            Action::LowerEtaD => k.eta_d = lr(k.eta_d / LR_STEP),
            Action::RaiseAux => k.lambda_aux = (k.lambda_aux * AUX_STEP).clamp(0.0, 1.0),
            Action::LowerAux => k.lambda_aux = (k.lambda_aux / AUX_STEP).clamp(0.0, 1.0),
        }
    }
}

/// Per-rate limits on how far the referee may move a learning rate. Raising
/// stops at `hi` and lowering at `lo`; a rate already outside the band (for
/// example after a scheduled decay) is never pulled back into it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateBand {
    pub eta_g: (f64, f64),
    pub eta_d: (f64, f64),
}

impl RateBand {
    /// `[η₀ / span, η₀ · span]` around each starting rate.
    pub fn around(eta_g: f64, eta_d: f64, span: f64) -> Self {
        Self { eta_g: (eta_g / span, eta_g * span), eta_d: (eta_d / span, eta_d * span) }
    }

    pub fn unbounded() -> Self {
        Self { eta_g: (LR_FLOOR, LR_CEIL), eta_d: (LR_FLOOR, LR_CEIL) }
    }
}

fn raise(v: f64, hi: f64) -> f64 {
    (v * LR_STEP).min(hi.max(v))
}

fn lower(v: f64, lo: f64) -> f64 {
    (v / LR_STEP).max(lo.min(v))
}

impl Action {
    /// [`Action::apply`] with rate moves further limited to `band`.
    pub fn apply_within(self, k: &mut Knobs, band: &RateBand) {
        let lr = |v: f64| v.clamp(LR_FLOOR, LR_CEIL);
        match self {
            Action::RaiseEtaG => k.eta_g = lr(raise(k.eta_g, band.eta_g.1)),
            Action::LowerEtaG => k.eta_g = lr(lower(k.eta_g, band.eta_g.0)),
            Action::RaiseEtaD => k.eta_d = lr(raise(k.eta_d, band.eta_d.1)),
            Action::LowerEtaD => k.eta_d = lr(lower(k.eta_d, band.eta_d.0)),
            _ => self.apply(k),
        }
    }
}

/// Bounded 8-vector summarizing one round.
pub fn observe(m: &RoundMetrics, k: &Knobs) -> [f64; OBS_DIM] {
    [
        m.d_acc_real,
        m.d_acc_fake,
        m.loss_g.tanh(),
        m.loss_d.tanh(),
        m.loss_fm.tanh(),
        k.eta_g.max(LR_FLOOR).log10() / 6.0 + 1.0,
        k.eta_d.max(LR_FLOOR).log10() / 6.0 + 1.0,
        m.quality,
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardMode {
    /// Quality gain, closeness of D accuracy to 0.7, and generator progress.
    Shaped,
    /// Quality gain only.
    QualityDelta,
}

impl std::str::FromStr for RewardMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shaped" => Ok(Self::Shaped),
            "quality" => Ok(Self::QualityDelta),
            _ => Err(Error::Config(format!("unknown reward mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for RewardMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Shaped => "shaped",
            Self::QualityDelta => "quality",
        })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Δq − 0.5·|d_acc − 0.7| + 0.1·sign(−ΔL_G)` clipped to `[−1, 1]`.
pub fn compute_reward(prev: &RoundMetrics, curr: &RoundMetrics, mode: RewardMode) -> f64 {
    let dq = curr.quality - prev.quality;
    let r = match mode {
        RewardMode::Shaped => dq - 0.5 * (curr.d_acc() - 0.7).abs() + 0.1 * sign(prev.loss_g - curr.loss_g),
        RewardMode::QualityDelta => dq,
    };
    r.clamp(-1.0, 1.0)
}

/// ε-greedy choice; ties in the greedy branch go to the lowest id.
pub fn select_action<R: Rng + ?Sized>(q_values: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if rng.random::<f64>() < epsilon {
        rng.random_range(0..q_values.len())
    } else {
        argmax(q_values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DqnConfig {
    pub hidden: usize,
    pub lr: f64,
    pub gamma: f64,
    pub capacity: usize,
    pub warmup: usize,
    pub batch: usize,
    pub sync_every: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the run over which ε decays linearly.
    pub eps_fraction: f64,
    pub reward: RewardMode,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr: 1e-3,
            gamma: 0.95,
            capacity: 10_000,
            warmup: 500,
            batch: 64,
            sync_every: 200,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_fraction: 0.5,
            reward: RewardMode::Shaped,
        }
    }
}

impl DqnConfig {
    pub fn epsilon(&self, round: u64, total: u64) -> f64 {
        let span = (self.eps_fraction * total as f64).max(1.0);
        let t = (round as f64 / span).min(1.0);
        self.eps_start + (self.eps_end - self.eps_start) * t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pending {
    pub obs: Vec<f64>,
    pub action: usize,
    pub metrics: RoundMetrics,
}

/// One round of referee activity, as logged.
#[derive(Clone, Debug, PartialEq)]
pub struct BalanceRecord {
    pub round: u64,
    pub obs: [f64; OBS_DIM],
    pub action: usize,
    pub reward: f64,
    pub epsilon: f64,
    pub td_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Balancer {
    pub cfg: DqnConfig,
    pub qnet: QNetwork,
    pub buffer: ReplayBuffer,
    pub updates: u64,
    /// Own stream so enabling the referee leaves model randomness untouched.
    pub rng: ChaCha8Rng,
    pub pending: Option<Pending>,
    pub band: RateBand,
}

/// RNG stream reserved for the referee.
pub const BALANCE_STREAM: u64 = 3;

impl Balancer {
    pub fn new(cfg: DqnConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(BALANCE_STREAM);
        let qnet = QNetwork::new(OBS_DIM, cfg.hidden, N_ACTIONS, cfg.lr, &mut rng)?;
        let buffer = ReplayBuffer::new(cfg.capacity);
        Ok(Self { cfg, qnet, buffer, updates: 0, rng, pending: None, band: RateBand::unbounded() })
    }

    pub fn with_band(self, band: RateBand) -> Self {
        Self { band, ..self }
    }

    /// Stores the previous decision's outcome, learns from a replay batch,
    /// and picks and applies this round's action.
    pub fn step(&mut self, round: u64, total: u64, metrics: &RoundMetrics, knobs: &mut Knobs) -> Result<BalanceRecord> {
        let obs = observe(metrics, knobs);
        let last = round + 1 >= total;
        let mut reward = 0.0;
        let mut td_loss = None;
        if let Some(p) = self.pending.take() {
            reward = compute_reward(&p.metrics, metrics, self.cfg.reward);
            self.buffer.push(Transition {
                state: p.obs,
                action: p.action,
                reward,
                next_state: obs.to_vec(),
                done: last,
            });
            let batch = self.buffer.sample(self.cfg.batch, self.cfg.warmup, &mut self.rng);
            if !batch.is_empty() {
                td_loss = Some(self.qnet.update(&batch, self.cfg.gamma)?);
                self.updates += 1;
                if self.updates.is_multiple_of(self.cfg.sync_every) {
                    self.qnet.sync_target();
                }
            }
        }
        let epsilon = self.cfg.epsilon(round, total);
        let q = self.qnet.q_values(&obs)?;
        let action = select_action(&q, epsilon, &mut self.rng);
        Action::from_id(action)?.apply_within(knobs, &self.band);
        if !last {
            self.pending = Some(Pending { obs: obs.to_vec(), action, metrics: metrics.clone() });
        }
        Ok(BalanceRecord { round, obs, action, reward, epsilon, td_loss })
    }
}
