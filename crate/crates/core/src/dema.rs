//! Dynamic embedded multi-scale attention.
//!
//! The block turns an NCHW feature map into per-scale *focus* features (local
//! windowed multi-head self-attention) and *expansion* features (cross-attention
//! against a handful of global context tokens), mixes them with a per-sample
//! gate conditioned on the input and a task embedding, and merges the scales
//! with a learned 1×1 map. A local/global InfoNCE term pushes the two flows to
//! stay distinguishable across the batch.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::nn::{glorot, glorot_conv, Activation, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::{Padding, Scalar, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-16;

#[derive(Clone, Debug, PartialEq)]
pub struct DemaConfig {
    pub channels: usize,
    /// Depthwise kernel size per scale.
    pub scales: Vec<usize>,
    /// Window edge per attention head; the head count is `head_windows.len()`.
    pub head_windows: Vec<usize>,
    pub context_tokens: usize,
    pub task_dim: usize,
    pub tasks: usize,
    pub gate_hidden: usize,
    pub tau: f64,
    pub dropout: f64,
}

impl DemaConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            scales: vec![3, 5, 7],
            head_windows: vec![2, 4, 8],
            context_tokens: 4,
            task_dim: 4,
            tasks: 1,
            gate_hidden: 16,
            tau: 0.1,
            dropout: 0.1,
        }
    }

    pub fn heads(&self) -> usize {
        self.head_windows.len()
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads()
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_windows.is_empty() || self.head_windows.contains(&0) {
            return Err(invalid("dema needs at least one head with a positive window"));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(self.heads()) {
            return Err(invalid(format!("{} channels not divisible by {} heads", self.channels, self.heads())));
        }
        if self.scales.is_empty() || self.scales.iter().any(|k| k % 2 == 0) {
            return Err(invalid(format!("scale kernels must be odd, got {:?}", self.scales)));
        }
        if self.context_tokens < 2 {
            return Err(invalid("context attention needs at least 2 tokens"));
        }
        if self.tau <= 0.0 {
            return Err(invalid(format!("temperature {} must be positive", self.tau)));
        }
        if self.tasks == 0 || self.task_dim == 0 {
            return Err(invalid("task table must be nonempty"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct HeadParams {
    q: ParamId,
    k: ParamId,
    v: ParamId,
}

/// Parameter handles of one DEMA block. Values live in the owner's store.
#[derive(Clone, Debug)]
pub struct Dema {
    cfg: DemaConfig,
    scale_kernels: Vec<ParamId>,
    heads: Vec<HeadParams>,
    fuse: ParamId,
    ctx_avg: Linear,
    ctx_max: Linear,
    ctx_mix: Vec<Linear>,
    ctx_q: ParamId,
    ctx_k: ParamId,
    ctx_v: ParamId,
    gate: Mlp,
    task_table: ParamId,
    aggregate: ParamId,
}

/// Forward-pass knobs.
#[derive(Clone, Debug, Default)]
pub struct DemaOptions {
    pub task: usize,
    /// Replaces the learned gate with fixed `(α, β)`.
    pub gate_override: Option<(f64, f64)>,
    /// Compute the local/global contrastive loss (needs batch ≥ 2).
    pub contrastive: bool,
}

/// Everything a forward pass exposes.
#[derive(Clone, Debug)]
pub struct DemaOutput {
    /// Fused output, same shape as the input.
    pub out: Var,
    /// Focus features per scale.
    pub focus: Vec<Var>,
    /// Expansion features per scale.
    pub expansion: Vec<Var>,
    /// Per-scale gated mix before aggregation.
    pub mixed: Vec<Var>,
    /// `[B, 2]` softmax gate, columns (α, β).
    pub gate: Var,
    pub alpha: Var,
    pub beta: Var,
    /// Local/global contrastive loss averaged over scales, when requested.
    pub lgcl: Option<Var>,
    /// Every attention distribution computed, normalized along the last axis.
    pub distributions: Vec<Var>,
}

impl Dema {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: DemaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let d = cfg.head_dim();
        let mut scale_kernels = Vec::new();
        for &k in &cfg.scales {
            // start near identity: centre tap 1 plus small noise
            let noise = glorot::<T, R>(&[c, 1, k, k], k * k, k * k, rng)?;
            let mut kern = noise.map(|v| v * T::c(0.1));
            for ch in 0..c {
                let centre = ((ch * k) + k / 2) * k + k / 2;
                kern.data_mut()[centre] = kern.data()[centre] + T::one();
            }
            scale_kernels.push(store.add(format!("{name}.scale{k}"), kern));
        }
        let mut heads = Vec::new();
        for h in 0..cfg.heads() {
            let mut proj = |tag: &str| -> Result<ParamId> {
                Ok(store.add(format!("{name}.head{h}.{tag}"), glorot(&[d, d], d, d, rng)?))
            };
            heads.push(HeadParams { q: proj("q")?, k: proj("k")?, v: proj("v")? });
        }
        let fuse = store.add(format!("{name}.fuse"), glorot_conv(c, c, 1, rng)?);
        let ctx_avg = Linear::new(store, &format!("{name}.ctx_avg"), c, c, rng)?;
        let ctx_max = Linear::new(store, &format!("{name}.ctx_max"), c, c, rng)?;
        let ctx_mix = (2..cfg.context_tokens)
            .map(|i| Linear::new(store, &format!("{name}.ctx_mix{i}"), 2 * c, c, rng))
            .collect::<Result<Vec<_>>>()?;
        let ctx_q = store.add(format!("{name}.ctx_q"), glorot(&[c, c], c, c, rng)?);
        let ctx_k = store.add(format!("{name}.ctx_k"), glorot(&[c, c], c, c, rng)?);
        let ctx_v = store.add(format!("{name}.ctx_v"), glorot(&[c, c], c, c, rng)?);
        let gate = Mlp::new(
            store,
            &format!("{name}.gate"),
            &[c + cfg.task_dim, cfg.gate_hidden, 2],
            Activation::Relu,
            Activation::Identity,
            rng,
        )?;
        let task_table =
            store.add(format!("{name}.task"), glorot(&[cfg.tasks, cfg.task_dim], cfg.tasks, cfg.task_dim, rng)?);
        let s = cfg.scales.len();
        let aggregate = store.add(format!("{name}.aggregate"), glorot_conv(c, s * c, 1, rng)?);
        Ok(Self {
            cfg,
            scale_kernels,
            heads,
            fuse,
            ctx_avg,
            ctx_max,
            ctx_mix,
            ctx_q,
            ctx_k,
            ctx_v,
            gate,
            task_table,
            aggregate,
        })
    }

    pub fn config(&self) -> &DemaConfig {
        &self.cfg
    }

    pub fn scale_kernel(&self, i: usize) -> ParamId {
        self.scale_kernels[i]
    }

    /// `(W_q, W_k, W_v)` of a head, each `[d, d]` applied as `x·Wᵀ`.
    pub fn head_projections(&self, h: usize) -> (ParamId, ParamId, ParamId) {
        let p = &self.heads[h];
        (p.q, p.k, p.v)
    }

    pub fn fuse_weight(&self) -> ParamId {
        self.fuse
    }

    /// `(avg-pool token, max-pool token, mixture tokens)`.
    pub fn context_embedders(&self) -> (&Linear, &Linear, &[Linear]) {
        (&self.ctx_avg, &self.ctx_max, &self.ctx_mix)
    }

    pub fn context_projections(&self) -> (ParamId, ParamId, ParamId) {
        (self.ctx_q, self.ctx_k, self.ctx_v)
    }

    pub fn aggregate_weight(&self) -> ParamId {
        self.aggregate
    }

    pub fn gate_mlp(&self) -> &Mlp {
        &self.gate
    }

    pub fn task_table(&self) -> ParamId {
        self.task_table
    }

    fn check_input<T: Scalar>(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != self.cfg.channels {
            return Err(Error::ShapeMismatch { op: "dema", lhs: s.to_vec(), rhs: vec![0, self.cfg.channels, 0, 0] });
        }
        Ok(())
    }

    /// Depthwise same-padded convolution at every configured scale.
    pub fn multi_scale_features<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Vec<Var>> {
        self.check_input(tape, x)?;
        self.scale_kernels
            .iter()
            .map(|&k| {
                let kv = store.var(tape, k);
                tape.conv2d(x, kv, 1, Padding::Same, true)
            })
            .collect()
    }

    /// Windowed self-attention of head `h` over its channel slice of `x`.
    /// Returns `(F_i^h [B,d,H,W], weights [windows, w², w²])`.
    pub fn local_head_attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        h: usize,
    ) -> Result<(Var, Var)> {
        self.check_input(tape, x)?;
        let d = self.cfg.head_dim();
        let w = *self.cfg.head_windows.get(h).ok_or_else(|| invalid(format!("no head {h}")))?;
        let shape = tape.shape(x).to_vec();
        let (b, hh, ww) = (shape[0], shape[2], shape[3]);
        if w > hh.max(ww) {
            return Err(invalid(format!("window {w} larger than the {hh}x{ww} feature map")));
        }
        let (ph, pw) = ((w - hh % w) % w, (w - ww % w) % w);
        let (hp, wp) = (hh + ph, ww + pw);
        let (nh, nw) = (hp / w, wp / w);
        let slice = tape.narrow(x, 1, h * d, d)?;
        let padded = tape.pad2d(slice, ph, pw)?;
        let split = tape.reshape(padded, &[b, d, nh, w, nw, w])?;
        let windows = tape.permute(split, &[0, 2, 4, 3, 5, 1])?;
        let n = b * nh * nw;
        let l = w * w;
        let flat = tape.reshape(windows, &[n * l, d])?;
        let p = &self.heads[h];
        let mut project = |id: ParamId| -> Result<Var> {
            let wv = store.var(tape, id);
            let y = tape.matmul_ext(flat, wv, true)?;
            tape.reshape(y, &[n, l, d])
        };
        let (q, k, v) = (project(p.q)?, project(p.k)?, project(p.v)?);
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = tape.softmax(scores, 2)?;
        let out = tape.bmm(attn, v, false)?;
        let out = tape.reshape(out, &[b, nh, nw, w, w, d])?;
        let out = tape.permute(out, &[0, 5, 1, 3, 2, 4])?;
        let out = tape.reshape(out, &[b, d, hp, wp])?;
        let out = if ph > 0 { tape.narrow(out, 2, 0, hh)? } else { out };
        let out = if pw > 0 { tape.narrow(out, 3, 0, ww)? } else { out };
        Ok((out, attn))
    }

    /// Channel-concatenates the heads and applies the 1×1 fusion map.
    pub fn fuse_heads<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, heads: &[Var]) -> Result<Var> {
        let first = tape.shape(*heads.first().ok_or_else(|| invalid("no heads to fuse"))?).to_vec();
        for &h in heads {
            if tape.shape(h) != first.as_slice() {
                return Err(Error::ShapeMismatch { op: "fuse_heads", lhs: first, rhs: tape.shape(h).to_vec() });
            }
        }
        let cat = tape.concat(heads, 1)?;
        let wc = store.var(tape, self.fuse);
        tape.conv2d(cat, wc, 1, Padding::Valid, false)
    }

    /// `[B, K, C]` context tokens: linear(avg-pool), linear(max-pool), then
    /// learned mixtures of both.
    pub fn global_embed<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let (b, c) = (tape.shape(x)[0], self.cfg.channels);
        let avg = tape.mean_axes(x, &[2, 3], false)?;
        let mx = tape.max_axes(x, &[2, 3], false)?;
        let both = tape.concat(&[avg, mx], 1)?;
        let mut tokens = vec![self.ctx_avg.forward(tape, store, avg)?, self.ctx_max.forward(tape, store, mx)?];
        for mix in &self.ctx_mix {
            tokens.push(mix.forward(tape, store, both)?);
        }
        let tokens = tokens.into_iter().map(|t| tape.reshape(t, &[b, 1, c])).collect::<Result<Vec<_>>>()?;
        tape.concat(&tokens, 1)
    }

    /// Cross-attention from every position of `x` to the context tokens.
    /// Returns `(E_i [B,C,H,W], weights [B, HW, K])`.
    pub fn context_attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        ctx: Var,
    ) -> Result<(Var, Var)> {
        self.check_input(tape, x)?;
        let shape = tape.shape(x).to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let cs = tape.shape(ctx).to_vec();
        if cs.len() != 3 || cs[0] != b || cs[2] != c || cs[1] < 2 {
            return Err(Error::ShapeMismatch { op: "context_attention", lhs: shape, rhs: cs });
        }
        let k_tokens = cs[1];
        let pos = tape.permute(x, &[0, 2, 3, 1])?;
        let pos = tape.reshape(pos, &[b * h * w, c])?;
        let wq = store.var(tape, self.ctx_q);
        let q = tape.matmul_ext(pos, wq, true)?;
        let q = tape.reshape(q, &[b, h * w, c])?;
        let toks = tape.reshape(ctx, &[b * k_tokens, c])?;
        let wk = store.var(tape, self.ctx_k);
        let wv = store.var(tape, self.ctx_v);
        let k = tape.matmul_ext(toks, wk, true)?;
        let k = tape.reshape(k, &[b, k_tokens, c])?;
        let v = tape.matmul_ext(toks, wv, true)?;
        let v = tape.reshape(v, &[b, k_tokens, c])?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (c as f64).sqrt())?;
        let attn = tape.softmax(scores, 2)?;
        let out = tape.bmm(attn, v, false)?;
        let out = tape.reshape(out, &[b, h, w, c])?;
        let out = tape.permute(out, &[0, 3, 1, 2])?;
        Ok((out, attn))
    }

    /// Embedding row of task `id`, shape `[task_dim]`.
    pub fn task_embedding<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, id: usize) -> Result<Var> {
        if id >= self.cfg.tasks {
            return Err(invalid(format!("task id {id} outside table of {}", self.cfg.tasks)));
        }
        let table = store.var(tape, self.task_table);
        let row = tape.narrow(table, 0, id, 1)?;
        tape.reshape(row, &[self.cfg.task_dim])
    }

    /// Gate `[B, 2]` from `concat(GAP(x), task)` through the gating MLP.
    pub fn dynamic_gate<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, task: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let ts = tape.shape(task).to_vec();
        if ts != [self.cfg.task_dim] {
            return Err(Error::ShapeMismatch { op: "dynamic_gate", lhs: ts, rhs: vec![self.cfg.task_dim] });
        }
        let b = tape.shape(x)[0];
        let gap = tape.mean_axes(x, &[2, 3], false)?;
        let zeros = tape.constant(Tensor::zeros(&[b, self.cfg.task_dim]));
        let task_b = tape.add(zeros, task)?;
        let input = tape.concat(&[gap, task_b], 1)?;
        let logits = self.gate.forward(tape, store, input)?;
        tape.softmax(logits, 1)
    }

    /// Full block: per-scale focus/expansion features, gated mix, 1×1
    /// aggregation over scales, dropout when `rng` is given.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        opts: &DemaOptions,
        rng: Option<&mut R>,
    ) -> Result<DemaOutput> {
        self.check_input(tape, x)?;
        let b = tape.shape(x)[0];
        let mut distributions = Vec::new();

        let ctx = self.global_embed(tape, store, x)?;
        let task = self.task_embedding(tape, store, opts.task)?;
        let gate = match opts.gate_override {
            Some((a, bb)) => tape.constant(Tensor::from_fn(&[b, 2], |i| T::c(if i % 2 == 0 { a } else { bb }))),
            None => {
                let g = self.dynamic_gate(tape, store, x, task)?;
                distributions.push(g);
                g
            }
        };
        let alpha = tape.narrow(gate, 1, 0, 1)?;
        let alpha = tape.reshape(alpha, &[b, 1, 1, 1])?;
        let beta = tape.narrow(gate, 1, 1, 1)?;
        let beta = tape.reshape(beta, &[b, 1, 1, 1])?;

        let scales = self.multi_scale_features(tape, store, x)?;
        let (mut focus, mut expansion, mut mixed) = (Vec::new(), Vec::new(), Vec::new());
        for &xi in &scales {
            let mut heads = Vec::with_capacity(self.cfg.heads());
            for h in 0..self.cfg.heads() {
                let (fh, wts) = self.local_head_attention(tape, store, xi, h)?;
                heads.push(fh);
                distributions.push(wts);
            }
            let fi = self.fuse_heads(tape, store, &heads)?;
            let (ei, wts) = self.context_attention(tape, store, xi, ctx)?;
            distributions.push(wts);
            let af = tape.mul(alpha, fi)?;
            let be = tape.mul(beta, ei)?;
            mixed.push(tape.add(af, be)?);
            focus.push(fi);
            expansion.push(ei);
        }
        let cat = tape.concat(&mixed, 1)?;
        let agg = store.var(tape, self.aggregate);
        let mut out = tape.conv2d(cat, agg, 1, Padding::Valid, false)?;
        if let Some(rng) = rng {
            out = tape.dropout(out, self.cfg.dropout, rng)?;
        }

        let lgcl = if opts.contrastive && b >= 2 {
            let mut terms = Vec::new();
            for (&f, &e) in focus.iter().zip(&expansion) {
                let fp = tape.mean_axes(f, &[2, 3], false)?;
                let ep = tape.mean_axes(e, &[2, 3], false)?;
                terms.push(lgcl_loss(tape, fp, ep, self.cfg.tau)?);
            }
            let first = terms[0];
            let mut total = first;
            for &t in &terms[1..] {
                total = tape.add(total, t)?;
            }
            Some(tape.scale(total, 1.0 / terms.len() as f64)?)
        } else {
            None
        };

        Ok(DemaOutput { out, focus, expansion, mixed, gate, alpha, beta, lgcl, distributions })
    }
}

/// Row-wise unit normalization with a guard so zero vectors map to zero.
fn normalize_rows<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let ss = tape.sum_axes(sq, &[1], true)?;
    let ss = tape.affine(ss, 1.0, NORM_EPS)?;
    let norm = tape.powf(ss, 0.5)?;
    tape.div(x, norm)
}

/// InfoNCE over the batch: anchor `focus[i]`, positive `expansion[i]`,
/// negatives `expansion[j≠i]`, cosine similarity scaled by `1/τ`, mean over
/// anchors.
pub fn lgcl_loss<T: Scalar>(tape: &mut Tape<T>, focus: Var, expansion: Var, tau: f64) -> Result<Var> {
    let (fs, es) = (tape.shape(focus).to_vec(), tape.shape(expansion).to_vec());
    if fs.len() != 2 || fs != es {
        return Err(Error::ShapeMismatch { op: "lgcl_loss", lhs: fs, rhs: es });
    }
    if fs[0] < 2 {
        return Err(invalid("contrastive loss needs a batch of at least 2 for negatives"));
    }
    if tau <= 0.0 {
        return Err(invalid(format!("temperature {tau} must be positive")));
    }
    let b = fs[0];
    let f = normalize_rows(tape, focus)?;
    let e = normalize_rows(tape, expansion)?;
    let sims = tape.matmul_ext(f, e, true)?;
    let logits = tape.scale(sims, 1.0 / tau)?;
    let logp = tape.log_softmax(logits, 1)?;
    let diag = tape.mask(logp, Tensor::<T>::eye(b).into_data())?;
    let total = tape.sum(diag)?;
    tape.scale(total, -1.0 / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize) -> (ParamStore<f64>, Dema, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new(1);
        let dema = Dema::new(&mut store, "dema", DemaConfig::new(c), &mut rng).unwrap();
        (store, dema, rng)
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn config_rejects_bad_heads_and_tokens() {
        let mut c = DemaConfig::new(7);
        assert!(c.validate().is_err());
        c.channels = 6;
        c.context_tokens = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn identity_scale_kernel_passes_input() {
        let (mut store, dema, mut rng) = setup(6);
        let k = dema.scale_kernel(0);
        *store.get_mut(k) = Tensor::from_fn(&[6, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let x = tape.constant(random(&[2, 6, 4, 4], &mut rng));
        let xs = dema.multi_scale_features(&mut tape, &store, x).unwrap();
        assert_eq!(xs.len(), 3);
        assert_eq!(tape.value(xs[0]), tape.value(x));
        for &xi in &xs {
            assert_eq!(tape.shape(xi), &[2, 6, 4, 4]);
        }
    }

    #[test]
    fn equal_inputs_give_uniform_window_attention() {
        let (store, dema, _) = setup(6);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 6, 4, 4], 0.3));
        let (_, w) = dema.local_head_attention(&mut tape, &store, x, 1).unwrap();
        assert_eq!(tape.shape(w), &[1, 16, 16]);
        for v in tape.value(w).data() {
            assert!((v - 1.0 / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_is_a_distribution() {
        let (store, dema, mut rng) = setup(6);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[3, 6, 4, 4], &mut rng));
        let t = dema.task_embedding(&mut tape, &store, 0).unwrap();
        let g = dema.dynamic_gate(&mut tape, &store, x, t).unwrap();
        for row in tape.value(g).data().chunks(2) {
            assert!(row[0] > 0.0 && row[1] > 0.0);
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(dema.dynamic_gate(&mut tape, &store, x, bad).is_err());
        assert!(dema.task_embedding(&mut tape, &store, 1).is_err());
    }

    #[test]
    fn lgcl_equal_similarity_is_ln_b() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::ones(&[8, 5]));
        let e = tape.constant(Tensor::ones(&[8, 5]));
        let l = lgcl_loss(&mut tape, f, e, 0.1).unwrap();
        assert!((tape.value(l).item() - 8f64.ln()).abs() < 1e-9);
        let one = tape.constant(Tensor::ones(&[1, 5]));
        assert!(lgcl_loss(&mut tape, one, one, 0.1).is_err());
    }

    #[test]
    fn lgcl_zero_vector_guard() {
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(Tensor::zeros(&[2, 3]), true);
        let e = tape.constant(Tensor::from_f64(vec![2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let l = lgcl_loss(&mut tape, f, e, 0.5).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
        tape.backward(l).unwrap();
        assert!(tape.grad(f).unwrap().iter().all(|g| g.is_finite()));
    }
}
