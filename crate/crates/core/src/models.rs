//! Generator, main and auxiliary discriminators, and the adversarial losses.

use rand::Rng;

use crate::dema::{DemaConfig, DemaOptions, DemaOutput};
use crate::error::{invalid, Error, Result};
use crate::gctdrn::{FusionMode, GctdrnBlock, GlobalEnhance};
use crate::nn::{bce_logits_const, glorot_conv, Activation, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::{Padding, Scalar, Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

/// What the generator produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleSpace {
    /// A point in the plane.
    Point,
    /// A `[1, 16, 16]` grayscale image in `[-1, 1]`.
    Image,
}

impl SampleSpace {
    pub fn sample_shape(self) -> Vec<usize> {
        match self {
            Self::Point => vec![2],
            Self::Image => vec![1, 16, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub space: SampleSpace,
    pub latent_dim: usize,
    pub channels: usize,
    /// Side of the square feature map the blocks operate on.
    pub spatial: usize,
    pub blocks: usize,
    pub kernels: Vec<usize>,
    pub fusion: FusionMode,
    pub dema: DemaConfig,
    pub head_hidden: usize,
    pub disc_hidden: usize,
    pub aux_hidden: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn ring() -> Self {
        Self {
            space: SampleSpace::Point,
            latent_dim: 8,
            channels: 6,
            spatial: 4,
            blocks: 3,
            kernels: vec![3, 5, 7],
            fusion: FusionMode::Additive,
            dema: DemaConfig { head_windows: vec![2, 4, 4], ..DemaConfig::new(6) },
            head_hidden: 64,
            disc_hidden: 64,
            aux_hidden: 32,
            dropout: 0.1,
        }
    }

    pub fn shapes() -> Self {
        Self {
            space: SampleSpace::Image,
            latent_dim: 16,
            spatial: 8,
            blocks: 2,
            dema: DemaConfig::new(6),
            ..Self::ring()
        }
    }

    /// Caps every head window at the feature-map side.
    pub fn clamp_windows(&mut self) {
        let s = self.spatial;
        self.dema.head_windows.iter_mut().for_each(|w| *w = (*w).min(s));
    }

    /// Index of the block whose output is handed to the auxiliary discriminator.
    pub fn tap_block(&self) -> usize {
        (self.blocks - 1) / 2
    }

    /// Element count of the tapped feature map per sample.
    pub fn feature_dim(&self) -> usize {
        self.channels * self.spatial * self.spatial
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.blocks == 0 || self.spatial == 0 {
            return Err(invalid("latent dim, block count and spatial size must be positive"));
        }
        if self.space == SampleSpace::Image && self.spatial != 8 {
            return Err(invalid("image generator upsamples an 8×8 map to 16×16"));
        }
        if self.dema.channels != self.channels {
            return Err(invalid(format!("dema width {} vs generator width {}", self.dema.channels, self.channels)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout {} outside [0,1)", self.dropout)));
        }
        self.dema.validate()
    }
}

/// Training-mode switch: `Some(rng)` enables dropout.
pub type Mode<'a, R> = Option<&'a mut R>;

#[derive(Clone, Debug)]
enum GenHead {
    Point { hidden: Linear, out: Linear },
    Image { conv1: ParamId, conv2: ParamId },
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: ModelConfig,
    input: Linear,
    pub blocks: Vec<GctdrnBlock>,
    pub enhance: GlobalEnhance,
    head: GenHead,
}

#[derive(Clone, Debug)]
pub struct GenOutput {
    pub sample: Var,
    /// Tapped block output `[B, C, S, S]`.
    pub features: Var,
    pub dema: Vec<DemaOutput>,
}

impl GenOutput {
    /// Mean of the per-block contrastive losses, if any were computed.
    pub fn lgcl<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Option<Var>> {
        let terms: Vec<Var> = self.dema.iter().filter_map(|d| d.lgcl).collect();
        let Some((&first, rest)) = terms.split_first() else { return Ok(None) };
        let mut acc = first;
        for &t in rest {
            acc = tape.add(acc, t)?;
        }
        Ok(Some(tape.scale(acc, 1.0 / terms.len() as f64)?))
    }
}

impl Generator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let input = Linear::new(store, "gen.input", cfg.latent_dim, cfg.feature_dim(), rng)?;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                GctdrnBlock::new(
                    store,
                    &format!("gen.block{i}"),
                    c,
                    &cfg.kernels,
                    cfg.fusion,
                    Some(cfg.dema.clone()),
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let enhance = GlobalEnhance::new(store, "gen.enhance", c, rng)?;
        let head = match cfg.space {
            SampleSpace::Point => GenHead::Point {
                hidden: Linear::new(store, "gen.head.hidden", cfg.feature_dim(), cfg.head_hidden, rng)?,
                out: Linear::new(store, "gen.head.out", cfg.head_hidden, 2, rng)?,
            },
            SampleSpace::Image => GenHead::Image {
                conv1: store.add("gen.head.conv1", glorot_conv(c, c, 3, rng)?),
                conv2: store.add("gen.head.conv2", glorot_conv(1, c, 3, rng)?),
            },
        };
        Ok(Self { cfg: cfg.clone(), input, blocks, enhance, head })
    }

    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z: Var,
        opts: &DemaOptions,
        mut mode: Mode<'_, R>,
    ) -> Result<GenOutput> {
        let zs = tape.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.cfg.latent_dim {
            return Err(Error::ShapeMismatch { op: "generator", lhs: zs, rhs: vec![0, self.cfg.latent_dim] });
        }
        let (b, c, s) = (zs[0], self.cfg.channels, self.cfg.spatial);
        let h = self.input.forward(tape, store, z)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let mut h = tape.reshape(h, &[b, c, s, s])?;
        let mut features = None;
        let mut dema = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let out = block.forward(tape, store, h, opts, mode.as_deref_mut())?;
            h = out.out;
            dema.extend(out.dema);
            if i == self.cfg.tap_block() {
                features = Some(h);
            }
        }
        let h = self.enhance.forward(tape, store, h)?;
        let sample = match &self.head {
            GenHead::Point { hidden, out } => {
                let flat = tape.reshape(h, &[b, self.cfg.feature_dim()])?;
                let y = hidden.forward(tape, store, flat)?;
                let y = tape.leaky_relu(y, LEAKY_SLOPE)?;
                out.forward(tape, store, y)?
            }
            GenHead::Image { conv1, conv2 } => {
                let up = tape.upsample2x(h)?;
                let k1 = store.var(tape, *conv1);
                let y = tape.conv2d(up, k1, 1, Padding::Same, false)?;
                let y = tape.leaky_relu(y, LEAKY_SLOPE)?;
                let k2 = store.var(tape, *conv2);
                let y = tape.conv2d(y, k2, 1, Padding::Same, false)?;
                tape.tanh(y)?
            }
        };
        Ok(GenOutput { sample, features: features.expect("tap block exists"), dema })
    }
}

#[derive(Clone, Debug)]
enum DiscBody {
    Point { layers: Vec<Linear>, head: Linear },
    Image { conv1: ParamId, conv2: ParamId, head: Linear },
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub space: SampleSpace,
    pub dropout: f64,
    body: DiscBody,
}

#[derive(Clone, Debug)]
pub struct DiscOutput {
    /// One logit per sample, shape `[B]`.
    pub logits: Var,
    /// Post-activation hidden features, shallowest first.
    pub features: Vec<Var>,
}

impl Discriminator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let hd = cfg.disc_hidden;
        let body = match cfg.space {
            SampleSpace::Point => DiscBody::Point {
                layers: vec![Linear::new(store, "disc.0", 2, hd, rng)?, Linear::new(store, "disc.1", hd, hd, rng)?],
                head: Linear::new(store, "disc.head", hd, 1, rng)?,
            },
            SampleSpace::Image => DiscBody::Image {
                conv1: store.add("disc.conv1", glorot_conv(8, 1, 3, rng)?),
                conv2: store.add("disc.conv2", glorot_conv(16, 8, 3, rng)?),
                head: Linear::new(store, "disc.head", 16 * 4 * 4, 1, rng)?,
            },
        };
        Ok(Self { space: cfg.space, dropout: cfg.dropout, body })
    }

    /// Width of the first feature layer per sample.
    pub fn first_feature_dim(&self) -> usize {
        match &self.body {
            DiscBody::Point { layers, .. } => layers[0].out_dim,
            DiscBody::Image { .. } => 8 * 8 * 8,
        }
    }

    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mut mode: Mode<'_, R>,
    ) -> Result<DiscOutput> {
        let xs = tape.shape(x).to_vec();
        let want = self.space.sample_shape();
        if xs.len() != want.len() + 1 || xs[1..] != want[..] {
            return Err(Error::ShapeMismatch { op: "discriminator", lhs: xs, rhs: want });
        }
        let b = xs[0];
        let mut features = Vec::new();
        let logits = match &self.body {
            DiscBody::Point { layers, head } => {
                let mut h = x;
                for lin in layers {
                    h = lin.forward(tape, store, h)?;
                    h = tape.leaky_relu(h, LEAKY_SLOPE)?;
                    features.push(h);
                    if let Some(rng) = mode.as_deref_mut() {
                        h = tape.dropout(h, self.dropout, rng)?;
                    }
                }
                head.forward(tape, store, h)?
            }
            DiscBody::Image { conv1, conv2, head } => {
                let mut h = x;
                for k in [conv1, conv2] {
                    let kv = store.var(tape, *k);
                    h = tape.conv2d(h, kv, 2, Padding::Same, false)?;
                    h = tape.leaky_relu(h, LEAKY_SLOPE)?;
                    features.push(h);
                    if let Some(rng) = mode.as_deref_mut() {
                        h = tape.dropout(h, self.dropout, rng)?;
                    }
                }
                let flat = tape.reshape(h, &[b, 16 * 4 * 4])?;
                head.forward(tape, store, flat)?
            }
        };
        let logits = tape.reshape(logits, &[b])?;
        Ok(DiscOutput { logits, features })
    }
}

/// Small classifier over generator mid-layer features. Real samples enter
/// through the main discriminator's first feature layer and a learned
/// projection into the generator's feature space.
#[derive(Clone, Debug)]
pub struct AuxDiscriminator {
    pub feature_dim: usize,
    pub projection: Linear,
    pub classifier: Mlp,
}

impl AuxDiscriminator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        disc: &Discriminator,
        rng: &mut R,
    ) -> Result<Self> {
        let fd = cfg.feature_dim();
        Ok(Self {
            feature_dim: fd,
            projection: Linear::new(store, "aux.projection", disc.first_feature_dim(), fd, rng)?,
            classifier: Mlp::new(
                store,
                "aux.mlp",
                &[fd, cfg.aux_hidden, 1],
                Activation::LeakyRelu(LEAKY_SLOPE),
                Activation::Identity,
                rng,
            )?,
        })
    }

    /// Logits `[B]` for generator features `[B, C, S, S]` (or already flat).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let fs = tape.shape(features).to_vec();
        let b = fs[0];
        if fs[1..].iter().product::<usize>() != self.feature_dim {
            return Err(Error::ShapeMismatch { op: "aux discriminator", lhs: fs, rhs: vec![b, self.feature_dim] });
        }
        let flat = tape.reshape(features, &[b, self.feature_dim])?;
        let y = self.classifier.forward(tape, store, flat)?;
        tape.reshape(y, &[b])
    }

    /// Projects a discriminator first-layer encoding into generator feature
    /// space. The encoding is detached so the main discriminator is untouched.
    pub fn encode_real<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, encoding: Var) -> Result<Var> {
        let e = tape.detach(encoding);
        let b = tape.shape(e)[0];
        let flat = tape.reshape(e, &[b, self.projection.in_dim])?;
        self.projection.forward(tape, store, flat)
    }
}

fn same_batch<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 1 || sb.len() != 1 || sa != sb {
        return Err(Error::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
    }
    Ok(())
}

/// `−E[log D(x)] − E[log(1 − D(G(z)))]` on logits, real target `real_target`
/// (1.0, or 0.9 for one-sided smoothing).
pub fn loss_d_main<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var, real_target: f64) -> Result<Var> {
    same_batch(tape, "loss_d_main", real, fake)?;
    let lr = bce_logits_const(tape, real, real_target)?;
    let lf = bce_logits_const(tape, fake, 0.0)?;
    tape.add(lr, lf)
}

/// Real-encoded features target 1, generator features target 0.
pub fn loss_d_aux<T: Scalar>(tape: &mut Tape<T>, real_features: Var, gen_features: Var) -> Result<Var> {
    same_batch(tape, "loss_d_aux", real_features, gen_features)?;
    let lr = bce_logits_const(tape, real_features, 1.0)?;
    let lf = bce_logits_const(tape, gen_features, 0.0)?;
    tape.add(lr, lf)
}

/// Both expectations over generator features; kept for ablation. Its
/// minimizer is the constant 0.5 output.
pub fn loss_d_aux_literal<T: Scalar>(tape: &mut Tape<T>, gen_features: Var) -> Result<Var> {
    let lr = bce_logits_const(tape, gen_features, 1.0)?;
    let lf = bce_logits_const(tape, gen_features, 0.0)?;
    tape.add(lr, lf)
}

/// `−E[log D_main(G(z))] − E[log D_aux(F_gen)]`; the aux term is skipped when
/// `aux` is `None`.
pub fn loss_g<T: Scalar>(tape: &mut Tape<T>, fake: Var, aux: Option<Var>) -> Result<Var> {
    let main = bce_logits_const(tape, fake, 1.0)?;
    match aux {
        Some(a) => {
            let la = bce_logits_const(tape, a, 1.0)?;
            tape.add(main, la)
        }
        None => Ok(main),
    }
}

/// `L_G + λ_aux · L_D_aux`.
pub fn loss_g_total<T: Scalar>(tape: &mut Tape<T>, loss_g: Var, loss_aux: Var, lambda_aux: f64) -> Result<Var> {
    if lambda_aux.is_nan() || lambda_aux < 0.0 {
        return Err(Error::Domain { op: "loss_g_total", detail: format!("λ_aux {lambda_aux} must be nonnegative") });
    }
    let w = tape.scale(loss_aux, lambda_aux)?;
    tape.add(loss_g, w)
}

/// `Σ_i (1/N_i)‖mean_b φ_i(real) − mean_b φ_i(fake)‖²`, with `N_i` the
/// per-sample element count of layer `i`.
pub fn feature_matching_loss<T: Scalar>(tape: &mut Tape<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(invalid(format!("feature layer counts {} vs {}", real.len(), fake.len())));
    }
    let mut total: Option<Var> = None;
    for (&r, &f) in real.iter().zip(fake) {
        let (rs, fs) = (tape.shape(r).to_vec(), tape.shape(f).to_vec());
        if rs[1..] != fs[1..] {
            return Err(Error::ShapeMismatch { op: "feature_matching", lhs: rs, rhs: fs });
        }
        let n: usize = rs[1..].iter().product();
        let rm = tape.mean_axes(r, &[0], false)?;
        let fm = tape.mean_axes(f, &[0], false)?;
        let d = tape.sub(rm, fm)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum(sq)?;
        let term = tape.scale(s, 1.0 / n as f64)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty"))
}
