//! Two-flow dynamic residual blocks: parallel 3/5/7 convolution branches fused
//! either additively alongside a DEMA pass, or by per-position softmax
//! weights, plus an identity shortcut. Also the pooled global-enhancement
//! branch used at the generator tail.

use rand::Rng;

use crate::dema::{Dema, DemaConfig, DemaOptions, DemaOutput};
use crate::error::{invalid, Error, Result};
use crate::nn::{glorot_conv, Linear, ParamId, ParamStore};
use crate::tensor::{Padding, Scalar, Tape, Tensor, Var};

pub const BRANCH_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// `α·ΣBranch + β·DEMA(X) + X`
    Additive,
    /// `Σ W_i·Branch_i + X` with softmax weights per position.
    Weighted,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(Self::Additive),
            "weighted" => Ok(Self::Weighted),
            _ => Err(Error::Config(format!("unknown fusion mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Additive => "additive",
            Self::Weighted => "weighted",
        })
    }
}

#[derive(Clone, Debug)]
pub struct GctdrnBlock {
    pub channels: usize,
    pub mode: FusionMode,
    pub kernels: Vec<usize>,
    branches: Vec<ParamId>,
    alpha: ParamId,
    beta: ParamId,
    score: ParamId,
    score_bias: ParamId,
    dema: Option<Dema>,
}

/// Output of one block.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub branches: Vec<Var>,
    /// Per-branch weights `[B, n, H, W]` in weighted mode.
    pub weights: Option<Var>,
    pub dema: Option<DemaOutput>,
}

impl GctdrnBlock {
    /// `dema` is required for additive mode and ignored in weighted mode.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernels: &[usize],
        mode: FusionMode,
        dema: Option<DemaConfig>,
        rng: &mut R,
    ) -> Result<Self> {
        if kernels.is_empty() || kernels.iter().any(|k| k % 2 == 0) {
            return Err(invalid(format!("branch kernels must be odd and nonempty, got {kernels:?}")));
        }
        if mode == FusionMode::Weighted && kernels.len() < 2 {
            return Err(invalid("weighted fusion needs at least 2 branches"));
        }
        let mut branches = Vec::new();
        for &k in kernels {
            // scaled down so the initial residual stays close to the shortcut
            let w = glorot_conv::<T, R>(channels, channels, k, rng)?.map(|v| v * T::c(0.5));
            branches.push(store.add(format!("{name}.branch{k}"), w));
        }
        let alpha = store.add(format!("{name}.alpha"), Tensor::scalar(T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::scalar(T::c(0.1)));
        let score = store.add(format!("{name}.score"), glorot_conv(1, channels, 1, rng)?);
        let score_bias = store.add(format!("{name}.score_bias"), Tensor::zeros(&[1, 1, 1, 1]));
        let dema = match (mode, dema) {
            (FusionMode::Additive, Some(cfg)) => {
                if cfg.channels != channels {
                    return Err(invalid(format!("dema width {} vs block width {channels}", cfg.channels)));
                }
                Some(Dema::new(store, &format!("{name}.dema"), cfg, rng)?)
            }
            (FusionMode::Additive, None) => return Err(invalid("additive fusion needs a dema config")),
            (FusionMode::Weighted, _) => None,
        };
        Ok(Self { channels, mode, kernels: kernels.to_vec(), branches, alpha, beta, score, score_bias, dema })
    }

    pub fn branch_kernel(&self, i: usize) -> ParamId {
        self.branches[i]
    }

    pub fn alpha(&self) -> ParamId {
        self.alpha
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }

    /// `([1,C,1,1] projection, [1,1,1,1] bias)` scoring each branch.
    pub fn score_projection(&self) -> (ParamId, ParamId) {
        (self.score, self.score_bias)
    }

    pub fn dema(&self) -> Option<&Dema> {
        self.dema.as_ref()
    }

    /// `leaky_relu(conv_k(X))` for every branch kernel.
    pub fn branch_outputs<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Vec<Var>> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::ShapeMismatch { op: "gctdrn", lhs: s.to_vec(), rhs: vec![0, self.channels, 0, 0] });
        }
        self.branches
            .iter()
            .map(|&k| {
                let kv = store.var(tape, k);
                let y = tape.conv2d(x, kv, 1, Padding::Same, false)?;
                tape.leaky_relu(y, BRANCH_SLOPE)
            })
            .collect()
    }

    /// Per-position softmax over the branch scores, `[B, n, H, W]`.
    pub fn fusion_weights<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        branches: &[Var],
    ) -> Result<Var> {
        if branches.len() < 2 {
            return Err(invalid("weighted fusion needs at least 2 branches"));
        }
        let w = store.var(tape, self.score);
        let b = store.var(tape, self.score_bias);
        let mut scores = Vec::with_capacity(branches.len());
        for &br in branches {
            let s = tape.conv2d(br, w, 1, Padding::Valid, false)?;
            scores.push(tape.add(s, b)?);
        }
        let cat = tape.concat(&scores, 1)?;
        tape.softmax(cat, 1)
    }

    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        opts: &DemaOptions,
        rng: Option<&mut R>,
    ) -> Result<BlockOutput> {
        let branches = self.branch_outputs(tape, store, x)?;
        match self.mode {
            FusionMode::Additive => {
                let dema = self.dema.as_ref().expect("additive block owns a dema");
                let mut sum = branches[0];
                for &b in &branches[1..] {
                    sum = tape.add(sum, b)?;
                }
                let a = store.var(tape, self.alpha);
                let bt = store.var(tape, self.beta);
                let att = dema.forward(tape, store, x, opts, rng)?;
                let local = tape.mul(a, sum)?;
                let global = tape.mul(bt, att.out)?;
                let mix = tape.add(local, global)?;
                let out = tape.add(mix, x)?;
                Ok(BlockOutput { out, branches, weights: None, dema: Some(att) })
            }
            FusionMode::Weighted => {
                let weights = self.fusion_weights(tape, store, &branches)?;
                let mut out = x;
                for (i, &br) in branches.iter().enumerate() {
                    let wi = tape.narrow(weights, 1, i, 1)?;
                    let term = tape.mul(wi, br)?;
                    out = tape.add(out, term)?;
                }
                Ok(BlockOutput { out, branches, weights: Some(weights), dema: None })
            }
        }
    }
}

/// `F + W2·leaky(W1·GAP(F) + b1) + b2`, broadcast over positions.
#[derive(Clone, Debug)]
pub struct GlobalEnhance {
    pub channels: usize,
    pub pool: Linear,
    pub broadcast: Linear,
}

impl GlobalEnhance {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            channels,
            pool: Linear::new(store, &format!("{name}.pool"), channels, channels, rng)?,
            broadcast: Linear::new(store, &format!("{name}.broadcast"), channels, channels, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let s = tape.shape(f).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::ShapeMismatch { op: "global_enhance", lhs: s, rhs: vec![0, self.channels, 0, 0] });
        }
        let gap = tape.mean_axes(f, &[2, 3], false)?;
        let h = self.pool.forward(tape, store, gap)?;
        let h = tape.leaky_relu(h, BRANCH_SLOPE)?;
        let g = self.broadcast.forward(tape, store, h)?;
        let g = tape.reshape(g, &[s[0], s[1], 1, 1])?;
        tape.add(f, g)
    }
}
