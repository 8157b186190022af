use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{steplr_update, Adjustment, Monitor, RoundMetrics, Stage, StageConfig, LR_FLOOR};
use crate::balance::{BalanceRecord, Balancer, Knobs, RateBand};
use crate::dema::DemaOptions;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::datasets::{random_shape, Dataset, IMAGE_PIXELS};
use crate::harness::metrics::{image_coverage, ring_coverage, Coverage, MetricsRow};
use crate::models::{
    feature_matching_loss, loss_d_aux, loss_d_aux_literal, loss_d_main, loss_g, loss_g_total, AuxDiscriminator,
    Discriminator, Generator, ModelConfig,
};
use crate::nn::{EmaState, OptimizerState, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

const GEN_TAG: u32 = 1;
const DISC_TAG: u32 = 2;
const AUX_TAG: u32 = 3;

const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const LATENT_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 4;
const EVAL_STREAM: u64 = 5;
const REFERENCE_STREAM: u64 = 6;

const IMAGE_REFERENCES: usize = 300;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

/// Random streams consumed during training. Each has its own purpose so that
/// toggling one feature does not shift the draws of another.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerRngs {
    pub data: ChaCha8Rng,
    pub latent: ChaCha8Rng,
    /// Dropout masks and instance noise.
    pub noise: ChaCha8Rng,
}

impl TrainerRngs {
    pub fn new(seed: u64) -> Self {
        Self { data: stream(seed, DATA_STREAM), latent: stream(seed, LATENT_STREAM), noise: stream(seed, NOISE_STREAM) }
    }
}

/// Mutable schedule state carried between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    /// Index of the next round to run.
    pub round: u64,
    pub knobs: Knobs,
    pub lambda_fm: f64,
    /// Label smoothing forced on by the monitor.
    pub smoothing_forced: bool,
    /// Discriminator steps per generator step capped by the monitor.
    pub d_steps_cap: Option<usize>,
    pub monitor: Monitor,
}

/// How samples are scored for the quality signal.
#[derive(Clone, Debug, PartialEq)]
pub enum QualityProbe {
    Ring(crate::harness::datasets::RingConfig),
    Images { refs: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize },
}

impl QualityProbe {
    pub fn score<T: Scalar>(&self, samples: &Tensor<T>) -> Coverage {
        let data = samples.to_f64();
        match self {
            QualityProbe::Ring(cfg) => {
                let pts: Vec<[f64; 2]> = data.chunks(2).map(|c| [c[0], c[1]]).collect();
                ring_coverage(&pts, cfg)
            }
            QualityProbe::Images { refs, labels, classes } => {
                let imgs: Vec<Vec<f64>> = data.chunks(IMAGE_PIXELS).map(<[f64]>::to_vec).collect();
                image_coverage(&imgs, refs, labels, *classes)
            }
        }
    }
}

/// Result of one round.
#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub metrics: RoundMetrics,
    pub row: MetricsRow,
    pub stage: Stage,
    pub adjustments: Vec<Adjustment>,
    pub balance: Option<BalanceRecord>,
    /// Set when a non-finite value stopped the round before any update.
    pub aborted: Option<String>,
}

/// Full training context: networks, optimizers, averaged weights, schedule
/// state, referee and random streams.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub cfg: RunConfig,
    pub model_cfg: ModelConfig,
    pub gen: Generator,
    pub disc: Discriminator,
    pub aux: AuxDiscriminator,
    pub g_params: ParamStore<T>,
    pub d_params: ParamStore<T>,
    pub a_params: ParamStore<T>,
    pub g_opt: OptimizerState<T>,
    pub d_opt: OptimizerState<T>,
    pub a_opt: OptimizerState<T>,
    pub ema: EmaState<T>,
    pub state: TrainerState,
    pub balancer: Balancer,
    pub rngs: TrainerRngs,
    pub dataset: Dataset,
    pub probe: QualityProbe,
    pub eval_z: Tensor<T>,
    stage_cfg: StageConfig,
}

fn latent<T: Scalar, R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(&[n, dim], |_| T::c(rng.sample::<f64, _>(StandardNormal)))
}

fn frac<T: Scalar>(v: &Tensor<T>, pred: impl Fn(T) -> bool) -> f64 {
    v.data().iter().filter(|&&x| pred(x)).count() as f64 / v.numel().max(1) as f64
}

fn check_finite<T: Scalar>(tape: &Tape<T>, v: Var, what: &str) -> std::result::Result<(), String> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(format!("non-finite {what}"))
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: RunConfig, dataset: Dataset) -> Result<Self> {
        cfg.validate()?;
        let model_cfg = cfg.model_config();
        if dataset.sample_shape() != model_cfg.space.sample_shape() {
            return Err(Error::Config(format!("dataset {} does not match the model output", cfg.dataset)));
        }
        let mut init = stream(cfg.seed, INIT_STREAM);
        let mut g_params = ParamStore::new(GEN_TAG);
        let mut d_params = ParamStore::new(DISC_TAG);
        let mut a_params = ParamStore::new(AUX_TAG);
        let gen = Generator::new(&mut g_params, &model_cfg, &mut init)?;
        let disc = Discriminator::new(&mut d_params, &model_cfg, &mut init)?;
        let aux = AuxDiscriminator::new(&mut a_params, &model_cfg, &disc, &mut init)?;
        let g_opt = OptimizerState::new(cfg.optimizer, &g_params, cfg.lr_g, cfg.weight_decay);
        let d_opt = OptimizerState::new(cfg.optimizer, &d_params, cfg.lr_d, cfg.weight_decay);
        let mut a_opt = OptimizerState::new(cfg.optimizer, &a_params, cfg.lr_d, cfg.weight_decay);
        let (mut g_opt, mut d_opt) = (g_opt, d_opt);
        for o in [&mut g_opt, &mut d_opt, &mut a_opt] {
            o.beta1 = cfg.adam_beta1;
        }
        let ema = EmaState::new(&g_params, cfg.ema_decay, cfg.ema_warmup)?;
        let eval_z = latent(cfg.eval_samples, model_cfg.latent_dim, &mut stream(cfg.seed, EVAL_STREAM));
        let probe = match &dataset {
            Dataset::Ring(rc) => QualityProbe::Ring(rc.clone()),
            Dataset::Shapes => {
                let mut rng = stream(cfg.seed, REFERENCE_STREAM);
                let (refs, labels) = (0..IMAGE_REFERENCES).map(|_| random_shape(&mut rng)).unzip();
                QualityProbe::Images { refs, labels, classes: 3 }
            }
            Dataset::Images(imgs) => {
                let refs: Vec<Vec<f64>> = imgs.iter().take(IMAGE_REFERENCES).cloned().collect();
                QualityProbe::Images { labels: vec![0; refs.len()], refs, classes: 1 }
            }
        };
        let state = TrainerState {
            round: 0,
            knobs: Knobs { eta_g: cfg.lr_g, eta_d: cfg.lr_d, lambda_aux: cfg.lambda_aux },
            lambda_fm: cfg.lambda_fm,
            smoothing_forced: false,
            d_steps_cap: None,
            monitor: Monitor::new(cfg.monitor_config()),
        };
        let band = RateBand::around(cfg.lr_g, cfg.lr_d, cfg.balance_lr_span);
        let balancer = Balancer::new(cfg.dqn_config(), cfg.seed)?.with_band(band);
        Ok(Self {
            stage_cfg: cfg.stage_config(),
            rngs: TrainerRngs::new(cfg.seed),
            cfg,
            model_cfg,
            gen,
            disc,
            aux,
            g_params,
            d_params,
            a_params,
            g_opt,
            d_opt,
            a_opt,
            ema,
            state,
            balancer,
            dataset,
            probe,
            eval_z,
        })
    }

    pub fn finished(&self) -> bool {
        self.state.round >= self.cfg.rounds
    }

    fn noisy(&mut self, tape: &mut Tape<T>, x: Var, sigma: f64) -> Result<Var> {
        if sigma <= 0.0 {
            return Ok(x);
        }
        let shape = tape.shape(x).to_vec();
        let rng = &mut self.rngs.noise;
        let n = tape.constant(Tensor::from_fn(&shape, |_| T::c(sigma * rng.sample::<f64, _>(StandardNormal))));
        tape.add(x, n)
    }

    fn aux_loss(&self, tape: &mut Tape<T>, real_encoding: Var, gen_features: Var) -> Result<(Var, Var)> {
        let gen_logits = self.aux.forward(tape, &self.a_params, gen_features)?;
        let loss = if self.cfg.aux_literal {
            loss_d_aux_literal(tape, gen_logits)?
        } else {
            let enc = self.aux.encode_real(tape, &self.a_params, real_encoding)?;
            let real_logits = self.aux.forward(tape, &self.a_params, enc)?;
            loss_d_aux(tape, real_logits, gen_logits)?
        };
        Ok((loss, gen_logits))
    }

    fn weight_penalty(&self, tape: &mut Tape<T>, weight: f64) -> Result<Option<Var>> {
        if weight <= 0.0 {
            return Ok(None);
        }
        let mut acc: Option<Var> = None;
        for id in self.d_params.ids() {
            let w = self.d_params.var(tape, id);
            let sq = tape.mul(w, w)?;
            let s = tape.sum(sq)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
        acc.map(|a| tape.scale(a, weight)).transpose()
    }

    /// One discriminator update. Returns `(L_D, acc_real, acc_fake)` or an
    /// abort message.
    fn d_step(
        &mut self,
        real_target: f64,
        noise: f64,
        weight_reg: f64,
    ) -> Result<std::result::Result<(f64, f64, f64), String>> {
        let b = self.cfg.batch;
        let real_t: Tensor<T> = self.dataset.batch(b, &mut self.rngs.data)?;
        let z = latent::<T, _>(b, self.model_cfg.latent_dim, &mut self.rngs.latent);
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let g = self.gen.forward(&mut tape, &self.g_params, zv, &DemaOptions::default(), Some(&mut self.rngs.noise))?;
        let fake = tape.detach(g.sample);
        let feats = tape.detach(g.features);
        let real = tape.constant(real_t);
        let real = self.noisy(&mut tape, real, noise)?;
        let fake = self.noisy(&mut tape, fake, noise)?;
        let dr = self.disc.forward(&mut tape, &self.d_params, real, Some(&mut self.rngs.noise))?;
        let df = self.disc.forward(&mut tape, &self.d_params, fake, Some(&mut self.rngs.noise))?;
        let loss_d = loss_d_main(&mut tape, dr.logits, df.logits, real_target)?;
        if let Err(e) = check_finite(&tape, loss_d, "discriminator loss") {
            return Ok(Err(e));
        }
        let mut total = loss_d;
        if let Some(p) = self.weight_penalty(&mut tape, weight_reg)? {
            total = tape.add(total, p)?;
        }
        if self.cfg.afe {
            let (la, _) = self.aux_loss(&mut tape, dr.features[0], feats)?;
            if let Err(e) = check_finite(&tape, la, "auxiliary loss") {
                return Ok(Err(e));
            }
            total = tape.add(total, la)?;
        }
        let acc_real = frac(tape.value(dr.logits), |v| v > T::zero());
        let acc_fake = frac(tape.value(df.logits), |v| v < T::zero());
        let ld = tape.value(loss_d).item().f64();
        tape.backward(total)?;
        self.d_params.zero_grads();
        self.d_params.accumulate_grads(&tape);
        self.d_opt.lr = self.state.knobs.eta_d;
        self.d_opt.step(&mut self.d_params)?;
        if self.cfg.afe {
            self.a_params.zero_grads();
            self.a_params.accumulate_grads(&tape);
            self.a_opt.lr = self.state.knobs.eta_d;
            self.a_opt.step(&mut self.a_params)?;
        }
        Ok(Ok((ld, acc_real, acc_fake)))
    }

    /// One generator update. Returns `(L_G, L_FM, L_LGCL)` or an abort message.
    fn g_step(&mut self, noise: f64) -> Result<std::result::Result<(f64, f64, f64), String>> {
        let b = self.cfg.batch;
        let real_t: Tensor<T> = self.dataset.batch(b, &mut self.rngs.data)?;
        let z = latent::<T, _>(b, self.model_cfg.latent_dim, &mut self.rngs.latent);
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let opts = DemaOptions { contrastive: true, ..DemaOptions::default() };
        let g = self.gen.forward(&mut tape, &self.g_params, zv, &opts, Some(&mut self.rngs.noise))?;
        let real = tape.constant(real_t);
        let real = self.noisy(&mut tape, real, noise)?;
        let fake = self.noisy(&mut tape, g.sample, noise)?;
        let dr = self.disc.forward(&mut tape, &self.d_params, real, Some(&mut self.rngs.noise))?;
        let df = self.disc.forward(&mut tape, &self.d_params, fake, Some(&mut self.rngs.noise))?;
        let mut total = if self.cfg.afe {
            let (ld_aux, gen_logits) = self.aux_loss(&mut tape, dr.features[0], g.features)?;
            let lg = loss_g(&mut tape, df.logits, Some(gen_logits))?;
            if let Err(e) = check_finite(&tape, lg, "generator loss") {
                return Ok(Err(e));
            }
            let lgv = tape.value(lg).item().f64();
            (loss_g_total(&mut tape, lg, ld_aux, self.state.knobs.lambda_aux)?, lgv)
        } else {
            let lg = loss_g(&mut tape, df.logits, None)?;
            let lgv = tape.value(lg).item().f64();
            (lg, lgv)
        };
        let fm = feature_matching_loss(&mut tape, &dr.features, &df.features)?;
        let fmv = tape.value(fm).item().f64();
        if self.state.lambda_fm > 0.0 {
            let w = tape.scale(fm, self.state.lambda_fm)?;
            total.0 = tape.add(total.0, w)?;
        }
        let mut lgclv = 0.0;
        if let Some(l) = g.lgcl(&mut tape)? {
            lgclv = tape.value(l).item().f64();
            if self.cfg.lambda_lgcl > 0.0 {
                let w = tape.scale(l, self.cfg.lambda_lgcl)?;
                total.0 = tape.add(total.0, w)?;
            }
        }
        if let Err(e) = check_finite(&tape, total.0, "generator objective") {
            return Ok(Err(e));
        }
        tape.backward(total.0)?;
        self.g_params.zero_grads();
        self.g_params.accumulate_grads(&tape);
        self.g_opt.lr = self.state.knobs.eta_g;
        self.g_opt.step(&mut self.g_params)?;
        Ok(Ok((total.1, fmv, lgclv)))
    }

    /// Samples for the fixed evaluation latents under `params`.
    pub fn generate_with(&self, params: &ParamStore<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.gen.forward(&mut tape, params, zv, &DemaOptions::default(), None::<&mut ChaCha8Rng>)?;
        Ok(tape.value(out.sample).clone())
    }

    /// Coverage of the current (non-averaged) generator on the fixed latents.
    pub fn evaluate_current(&self) -> Result<Coverage> {
        Ok(self.probe.score(&self.generate_with(&self.g_params, &self.eval_z)?))
    }

    /// `n` samples from the averaged weights, latents drawn from `seed`.
    pub fn sample_ema(&self, n: usize, seed: u64) -> Result<Tensor<T>> {
        let params = self.ema.materialize(&self.g_params)?;
        let z = latent(n, self.model_cfg.latent_dim, &mut stream(seed, EVAL_STREAM + 100));
        self.generate_with(&params, &z)
    }

    /// Coverage of `n` averaged-weight samples.
    pub fn evaluate_ema(&self, n: usize, seed: u64) -> Result<Coverage> {
        Ok(self.probe.score(&self.sample_ema(n, seed)?))
    }

    fn row(&self, m: &RoundMetrics, stage: &str, action: i64, reward: f64) -> MetricsRow {
        MetricsRow {
            round: m.round,
            stage: stage.to_string(),
            loss_g: m.loss_g,
            loss_d: m.loss_d,
            loss_fm: m.loss_fm,
            loss_lgcl: m.loss_lgcl,
            d_acc_real: m.d_acc_real,
            d_acc_fake: m.d_acc_fake,
            eta_g: self.state.knobs.eta_g,
            eta_d: self.state.knobs.eta_d,
            lambda_aux: self.state.knobs.lambda_aux,
            action,
            reward,
            quality: m.quality,
            coverage: m.coverage,
        }
    }

    fn decay(&mut self) -> Result<()> {
        let k = &mut self.state.knobs;
        k.eta_g = steplr_update(k.eta_g, self.cfg.lr_gamma, self.cfg.lr_step)?;
        k.eta_d = steplr_update(k.eta_d, self.cfg.lr_gamma, self.cfg.lr_step)?;
        Ok(())
    }

    fn apply(&mut self, adj: Adjustment) -> Result<()> {
        match adj {
            Adjustment::WeakenDiscriminator => {
                self.state.knobs.eta_d = (self.state.knobs.eta_d * 0.5).max(LR_FLOOR);
                self.state.d_steps_cap = Some(1);
            }
            Adjustment::SupportGenerator => {
                self.state.smoothing_forced = true;
                self.state.lambda_fm = (self.state.lambda_fm * 2.0).min(self.cfg.lambda_fm_cap);
            }
            Adjustment::DecayLearningRates => self.decay()?,
        }
        Ok(())
    }

    /// D step(s), G step, weight averaging, quality measurement, monitor
    /// rules, then the referee.
    pub fn train_round(&mut self) -> Result<RoundOutcome> {
        if self.finished() {
            return Err(Error::InvalidArgument(format!("all {} rounds already run", self.cfg.rounds)));
        }
        let round = self.state.round;
        let total = self.cfg.rounds;
        let st = self.stage_cfg.settings(round, total);
        let smoothing = st.label_smoothing || self.state.smoothing_forced;
        let real_target = if smoothing { self.cfg.real_label } else { 1.0 };
        let d_steps = self.state.d_steps_cap.map_or(st.d_steps, |c| st.d_steps.min(c));

        let mut m = RoundMetrics { round, ..RoundMetrics::default() };
        let abort = |this: &mut Self, m: RoundMetrics, why: String| -> Result<RoundOutcome> {
            let mut m = m;
            m.loss_g = f64::NAN;
            let row = this.row(&m, "aborted", -1, 0.0);
            Ok(RoundOutcome {
                metrics: m,
                row,
                stage: st.stage,
                adjustments: Vec::new(),
                balance: None,
                aborted: Some(why),
            })
        };

        for _ in 0..d_steps {
            match self.d_step(real_target, st.noise, st.weight_reg)? {
                Ok((ld, ar, af)) => {
                    m.loss_d = ld;
                    m.d_acc_real = ar;
                    m.d_acc_fake = af;
                }
                Err(why) => return abort(self, m, why),
            }
        }
        match self.g_step(st.noise)? {
            Ok((lg, fm, lgcl)) => {
                m.loss_g = lg;
                m.loss_fm = fm;
                m.loss_lgcl = lgcl;
            }
            Err(why) => return abort(self, m, why),
        }
        self.ema.update(&self.g_params)?;
        let cov = self.evaluate_current()?;
        m.quality = cov.quality();
        m.coverage = cov.covered;
        if !m.is_finite() {
            return abort(self, m, "non-finite round metrics".into());
        }

        let mut adjustments = Vec::new();
        if self.cfg.apfl {
            adjustments = self.state.monitor.update(&m);
            for &a in &adjustments {
                self.apply(a)?;
            }
        }
        if self.cfg.lr_decay_every_round && !adjustments.contains(&Adjustment::DecayLearningRates) {
            self.decay()?;
        }
        let balance =
            if self.cfg.balance { Some(self.balancer.step(round, total, &m, &mut self.state.knobs)?) } else { None };
        let (action, reward) = balance.as_ref().map_or((-1, 0.0), |b| (b.action as i64, b.reward));
        let row = self.row(&m, st.stage.name(), action, reward);
        self.state.round += 1;
        Ok(RoundOutcome { metrics: m, row, stage: st.stage, adjustments, balance, aborted: None })
    }
}
