//! Shared helpers for the integration tests: a central-difference gradient
//! checker and small random-tensor utilities.

#![allow(dead_code)]

use mspg_core::nn::ParamStore;
use mspg_core::tensor::{Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor so near-zero gradients are compared absolutely.
pub const FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform in `±[0.1, 1]`, keeping values away from the kink at zero.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Worst relative error of a gradient check, with where it happened.
#[derive(Clone, Debug)]
pub struct Report {
    pub worst: f64,
    pub at: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.worst < REL_TOL
    }
}

fn weighted_loss(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Var {
    let w = tape.constant(weights.clone());
    let y = tape.mul(out, w).expect("weights match the output shape");
    tape.sum(y).expect("sum")
}

/// Compares the tape gradient of `sum(w ⊙ f(store))` for a fixed random `w`
/// against central differences, for up to `coords` coordinates of every
/// tensor in `store` (all of them when the tensor is smaller).
pub fn check_store<F>(store: &ParamStore<f64>, coords: usize, seed: u64, f: F) -> Report
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> mspg_core::Result<Var>,
{
    let mut r = rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut tape = Tape::new();
    let out = f(&mut tape, store).expect("forward");
    let weights = uniform(tape.shape(out), -1.0, 1.0, &mut r);
    let loss = weighted_loss(&mut tape, out, &weights);
    tape.backward(loss).expect("backward");
    let mut grads = store.clone();
    grads.zero_grads();
    grads.accumulate_grads(&tape);

    let eval = |s: &ParamStore<f64>| {
        let mut t = Tape::new();
        let o = f(&mut t, s).expect("forward");
        let l = weighted_loss(&mut t, o, &weights);
        t.value(l).item()
    };

    let mut report = Report { worst: 0.0, at: None, checked: 0 };
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).numel();
        let picks: Vec<usize> = if n <= coords { (0..n).collect() } else { sample(&mut r, n, coords).into_vec() };
        for i in picks {
            let orig = store.get(id).data()[i];
            let mut central = |h: f64| {
                probe.get_mut(id).data_mut()[i] = orig + h;
                let up = eval(&probe);
                probe.get_mut(id).data_mut()[i] = orig - h;
                let down = eval(&probe);
                probe.get_mut(id).data_mut()[i] = orig;
                (up - down) / (2.0 * h)
            };
            let analytic = grads.grad(id)[i];
            let mut numeric = central(STEP);
            let mut e = rel_err(analytic, numeric);
            if e >= REL_TOL {
                // a leaky-relu or max kink closer than STEP makes the wide
                // difference straddle it; a narrower one does not
                numeric = central(STEP / 100.0);
                e = rel_err(analytic, numeric);
            }
            report.checked += 1;
            if report.at.is_none() || e > report.worst {
                report.worst = e;
                report.at = Some((store.name(id).to_string(), i, analytic, numeric));
            }
        }
    }
    report
}

/// Builds a store holding `inputs` as named tensors, for checking plain ops.
pub fn store_of(inputs: Vec<Tensor<f64>>) -> ParamStore<f64> {
    let mut s = ParamStore::new(1);
    for (i, t) in inputs.into_iter().enumerate() {
        s.add(format!("input{i}"), t);
    }
    s
}

/// The store's tensors as tape leaves, in insertion order.
pub fn leaves(tape: &mut Tape<f64>, store: &ParamStore<f64>) -> Vec<Var> {
    store.ids().map(|id| store.var(tape, id)).collect()
}

/// Runs `cases` seeded checks and returns the worst report.
pub fn sweep(cases: u64, mut one: impl FnMut(u64) -> Report) -> Report {
    let mut worst = Report { worst: 0.0, at: None, checked: 0 };
    for seed in 0..cases {
        let r = one(seed);
        worst.checked += r.checked;
        if r.worst >= worst.worst {
            worst.worst = r.worst;
            worst.at = r.at;
        }
    }
    worst
}
