//! Binary trainer snapshots.
//!
//! Layout: `MSPC`, version byte, then length-prefixed sections in a fixed
//! order. Integers and floats are little-endian; tensors use the `MSPT`
//! encoding. Restoring rebuilds the trainer from the embedded config and then
//! overwrites every piece of mutable state, so a resumed run continues exactly
//! where the saved one stopped.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::apfl::{RoundMetrics, Trainer};
use crate::balance::{Pending, Transition};
use crate::error::{Error, Result};
use crate::nn::{OptimizerState, ParamStore};
use crate::tensor::{read_tensor, write_tensor, Scalar, Tensor};

use super::config::RunConfig;
use super::datasets::Dataset;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSPC";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }

    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
    }

    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }

    fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        write_tensor(t, &mut self.buf);
    }

    fn tensors<T: Scalar>(&mut self, ts: &[Tensor<T>]) {
        self.u64(ts.len() as u64);
        ts.iter().for_each(|t| self.tensor(t));
    }

    fn vecs<T: Scalar>(&mut self, vs: &[Vec<T>]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.tensor(&Tensor::new(vec![v.len()], v.clone()).expect("flat tensor"));
        }
    }

    fn metrics(&mut self, m: &RoundMetrics) {
        self.u64(m.round);
        for v in [m.loss_g, m.loss_d, m.loss_fm, m.loss_lgcl, m.d_acc_real, m.d_acc_fake, m.quality] {
            self.f64(v);
        }
        self.u64(m.coverage as u64);
    }

    fn rng(&mut self, r: &ChaCha8Rng) {
        self.buf.extend_from_slice(&r.get_seed());
        self.u64(r.get_stream());
        self.buf.extend_from_slice(&r.get_word_pos().to_le_bytes());
    }

    fn optimizer<T: Scalar>(&mut self, o: &OptimizerState<T>) {
        self.f64(o.lr);
        self.u64(o.step);
        self.vecs(&o.m);
        self.vecs(&o.v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("implausible length {n}")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("bad flag byte {b}"))),
        }
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let (t, used) = read_tensor(&self.buf[self.pos..])?;
        self.pos += used;
        Ok(t)
    }

    fn tensors<T: Scalar>(&mut self) -> Result<Vec<Tensor<T>>> {
        let n = self.len()?;
        (0..n).map(|_| self.tensor()).collect()
    }

    fn vecs<T: Scalar>(&mut self) -> Result<Vec<Vec<T>>> {
        let n = self.len()?;
        (0..n).map(|_| self.tensor::<T>().map(|t| t.data().to_vec())).collect()
    }

    fn metrics(&mut self) -> Result<RoundMetrics> {
        let round = self.u64()?;
        let mut f = [0.0; 7];
        for v in &mut f {
            *v = self.f64()?;
        }
        let coverage = self.len()?;
        Ok(RoundMetrics {
            round,
            loss_g: f[0],
            loss_d: f[1],
            loss_fm: f[2],
            loss_lgcl: f[3],
            d_acc_real: f[4],
            d_acc_fake: f[5],
            quality: f[6],
            coverage,
        })
    }

    fn rng(&mut self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self.take(32)?.try_into().expect("32 bytes");
        let stream = self.u64()?;
        let pos = u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes"));
        let mut r = ChaCha8Rng::from_seed(seed);
        r.set_stream(stream);
        r.set_word_pos(pos);
        Ok(r)
    }

    fn params<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let values = self.tensors()?;
        store.set_values(values)
    }

    fn optimizer<T: Scalar>(&mut self, o: &mut OptimizerState<T>) -> Result<()> {
        o.lr = self.f64()?;
        o.step = self.u64()?;
        let (m, v) = (self.vecs()?, self.vecs()?);
        let fits = |a: &[Vec<T>]| a.len() == o.m.len() && a.iter().zip(&o.m).all(|(x, y)| x.len() == y.len());
        if !fits(&m) || !fits(&v) {
            return Err(Error::Format("optimizer moments do not match the model".into()));
        }
        o.m = m;
        o.v = v;
        Ok(())
    }
}

/// Serializes the complete trainer state.
pub fn to_bytes<T: Scalar>(t: &Trainer<T>) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u8(CHECKPOINT_VERSION);
    w.bytes(t.cfg.to_text().as_bytes());
    w.u64(t.state.round);

    for store in [&t.g_params, &t.d_params, &t.a_params] {
        w.tensors(store.values());
    }
    for opt in [&t.g_opt, &t.d_opt, &t.a_opt] {
        w.optimizer(opt);
    }
    w.u64(t.ema.updates);
    w.tensors(&t.ema.shadow);

    let s = &t.state;
    w.f64(s.knobs.eta_g);
    w.f64(s.knobs.eta_d);
    w.f64(s.knobs.lambda_aux);
    w.f64(s.lambda_fm);
    w.bool(s.smoothing_forced);
    w.bool(s.d_steps_cap.is_some());
    w.u64(s.d_steps_cap.unwrap_or(0) as u64);
    w.u64(s.monitor.window.len() as u64);
    s.monitor.window.iter().for_each(|m| w.metrics(m));

    let b = &t.balancer;
    w.u64(b.updates);
    w.tensors(b.qnet.online.values());
    w.tensors(b.qnet.target.values());
    w.optimizer(&b.qnet.optimizer);
    w.u64(b.buffer.len() as u64);
    for tr in b.buffer.iter() {
        w.f64s(&tr.state);
        w.u64(tr.action as u64);
        w.f64(tr.reward);
        w.f64s(&tr.next_state);
        w.bool(tr.done);
    }
    w.bool(b.pending.is_some());
    if let Some(p) = &b.pending {
        w.f64s(&p.obs);
        w.u64(p.action as u64);
        w.metrics(&p.metrics);
    }

    for r in [&b.rng, &t.rngs.data, &t.rngs.latent, &t.rngs.noise] {
        w.rng(r);
    }
    w.buf
}

fn header(bytes: &[u8]) -> Result<(RunConfig, Reader<'_>)> {
    if bytes.len() < 5 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", bytes[4])));
    }
    let mut r = Reader { buf: bytes, pos: 5 };
    let text = std::str::from_utf8(r.bytes()?).map_err(|_| Error::Format("config echo is not UTF-8".into()))?;
    Ok((RunConfig::parse(text)?, r))
}

/// The run configuration stored in a checkpoint.
pub fn read_config(bytes: &[u8]) -> Result<RunConfig> {
    header(bytes).map(|(c, _)| c)
}

/// Rebuilds a trainer from checkpoint bytes. `dataset` must be the one the
/// stored config names.
pub fn from_bytes<T: Scalar>(bytes: &[u8], dataset: Dataset) -> Result<Trainer<T>> {
    let (cfg, mut r) = header(bytes)?;
    let mut t = Trainer::<T>::new(cfg, dataset)?;
    t.state.round = r.u64()?;

    r.params(&mut t.g_params)?;
    r.params(&mut t.d_params)?;
    r.params(&mut t.a_params)?;
    r.optimizer(&mut t.g_opt)?;
    r.optimizer(&mut t.d_opt)?;
    r.optimizer(&mut t.a_opt)?;
    t.ema.updates = r.u64()?;
    let shadow = r.tensors()?;
    if shadow.len() != t.ema.shadow.len() || shadow.iter().zip(&t.ema.shadow).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::Format("averaged weights do not match the model".into()));
    }
    t.ema.shadow = shadow;

    let s = &mut t.state;
    s.knobs.eta_g = r.f64()?;
    s.knobs.eta_d = r.f64()?;
    s.knobs.lambda_aux = r.f64()?;
    s.lambda_fm = r.f64()?;
    s.smoothing_forced = r.bool()?;
    let capped = r.bool()?;
    let cap = r.len()?;
    s.d_steps_cap = capped.then_some(cap);
    let n = r.len()?;
    s.monitor.window.clear();
    for _ in 0..n {
        let m = r.metrics()?;
        s.monitor.window.push_back(m);
    }

    let b = &mut t.balancer;
    b.updates = r.u64()?;
    r.params(&mut b.qnet.online)?;
    r.params(&mut b.qnet.target)?;
    r.optimizer(&mut b.qnet.optimizer)?;
    let n = r.len()?;
    if n > b.buffer.capacity() {
        return Err(Error::Format(format!("{n} stored transitions exceed capacity {}", b.buffer.capacity())));
    }
    for _ in 0..n {
        let state = r.f64s()?;
        let action = r.len()?;
        let reward = r.f64()?;
        let next_state = r.f64s()?;
        let done = r.bool()?;
        b.buffer.push(Transition { state, action, reward, next_state, done });
    }
    b.pending = if r.bool()? {
        let obs = r.f64s()?;
        let action = r.len()?;
        Some(Pending { obs, action, metrics: r.metrics()? })
    } else {
        None
    };

    b.rng = r.rng()?;
    t.rngs.data = r.rng()?;
    t.rngs.latent = r.rng()?;
    t.rngs.noise = r.rng()?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(t)
}

pub fn save<T: Scalar>(t: &Trainer<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(t))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Format(format!("cannot read checkpoint {}: {e}", path.display())))
}
