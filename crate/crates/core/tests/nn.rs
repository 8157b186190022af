mod common;

use common::{rng, uniform};
use mspg_core::nn::{bce_logits, Activation, EmaState, Linear, Mlp, OptimizerState, ParamStore};
use mspg_core::tensor::{Tape, Tensor};
use proptest::prelude::*;

/// Loads `sum((w - target)^2)` gradients into the store.
fn quadratic_grads(store: &mut ParamStore<f64>, target: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let id = store.ids().next().unwrap();
    let w = store.var(&mut tape, id);
    let t = tape.constant(Tensor::from_f64(vec![target.len()], target).unwrap());
    let d = tape.sub(w, t).unwrap();
    let sq = tape.mul(d, d).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    store.zero_grads();
    store.accumulate_grads(&tape);
    tape.value(loss).item()
}

/// Textbook AdamW with decoupled decay, one coordinate at a time.
struct RefAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl RefAdam {
    fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64, wd: f64) {
        self.t += 1;
        for j in 0..w.len() {
            self.m[j] = 0.9 * self.m[j] + 0.1 * g[j];
            self.v[j] = 0.999 * self.v[j] + 0.001 * g[j] * g[j];
            let mhat = self.m[j] / (1.0 - 0.9f64.powi(self.t));
            let vhat = self.v[j] / (1.0 - 0.999f64.powi(self.t));
            w[j] -= lr * wd * w[j];
            w[j] -= lr * mhat / (vhat.sqrt() + 1e-8);
        }
    }
}

proptest! {
    #[test]
    fn adamw_matches_reference(seed in any::<u64>(), lr in 1e-4f64..0.1, wd in 0.0f64..0.1, steps in 1usize..30) {
        let mut r = rng(seed);
        let init = uniform(&[5], -2.0, 2.0, &mut r);
        let mut store = ParamStore::new(0);
        store.add("w", init.clone());
        let mut opt = OptimizerState::adamw(&store, lr, wd);
        let mut reference = RefAdam { m: vec![0.0; 5], v: vec![0.0; 5], t: 0 };
        let mut w = init.data().to_vec();
        for _ in 0..steps {
            let g = uniform(&[5], -3.0, 3.0, &mut r);
            let id = store.ids().next().unwrap();
            store.zero_grads();
            let mut tape = Tape::new();
            let wv = store.var(&mut tape, id);
            let gv = tape.constant(g.clone());
            let dot = tape.mul(wv, gv).unwrap();
            let loss = tape.sum(dot).unwrap();
            tape.backward(loss).unwrap();
            store.accumulate_grads(&tape);
            opt.step(&mut store).unwrap();
            reference.step(&mut w, g.data(), lr, wd);
        }
        for (a, b) in store.values()[0].data().iter().zip(&w) {
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn ema_is_the_closed_form_average(seed in any::<u64>(), decay in 0.0f64..1.0, n in 1usize..20) {
        let mut r = rng(seed);
        let mut store = ParamStore::new(0);
        let id = store.add("w", uniform(&[3], -1.0, 1.0, &mut r));
        let mut ema = EmaState::new(&store, decay, false).unwrap();
        let mut history = vec![store.get(id).clone()];
        for _ in 0..n {
            *store.get_mut(id) = uniform(&[3], -1.0, 1.0, &mut r);
            history.push(store.get(id).clone());
            ema.update(&store).unwrap();
        }
        for j in 0..3 {
            let mut want = decay.powi(n as i32) * history[0].data()[j];
            for (k, h) in history.iter().enumerate().skip(1) {
                want += (1.0 - decay) * decay.powi((n - k) as i32) * h.data()[j];
            }
            let got = ema.shadow[0].data()[j];
            prop_assert!((got - want).abs() < 1e-12);
            let lo = history.iter().map(|h| h.data()[j]).fold(f64::INFINITY, f64::min);
            let hi = history.iter().map(|h| h.data()[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
        }
    }

    #[test]
    fn bce_matches_naive_formula(seed in any::<u64>(), n in 1usize..20) {
        let mut r = rng(seed);
        let x = uniform(&[n], -15.0, 15.0, &mut r);
        let y = uniform(&[n], 0.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let loss = bce_logits(&mut tape, xv, &y).unwrap();
        let got = tape.value(loss).item();
        let naive: f64 = x.data().iter().zip(y.data()).map(|(&x, &y)| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        }).sum::<f64>() / n as f64;
        prop_assert!((got - naive).abs() < 1e-9);
    }
}

#[test]
fn adamw_descends_a_convex_quadratic() {
    let target = [0.5, -1.5, 2.0];
    let mut store = ParamStore::new(0);
    store.add("w", Tensor::zeros(&[3]));
    let mut opt = OptimizerState::adamw(&store, 0.05, 0.0);
    let first = quadratic_grads(&mut store, &target);
    let mut last = first;
    for _ in 0..500 {
        opt.step(&mut store).unwrap();
        last = quadratic_grads(&mut store, &target);
    }
    assert!(last < 1e-3 * first, "{first} -> {last}");
}

#[test]
fn huge_logits_stay_finite() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::from_f64(vec![2], &[1e4, -1e4]).unwrap(), true);
    let loss = bce_logits(&mut tape, x, &Tensor::from_f64(vec![2], &[0.0, 1.0]).unwrap()).unwrap();
    tape.backward(loss).unwrap();
    assert!((tape.value(loss).item() - 1e4).abs() < 1.0);
    assert_eq!(tape.grad(x).unwrap(), &[0.5, -0.5]);
}

#[test]
fn linear_and_mlp_match_hand_products() {
    let mut r = rng(3);
    let mut store = ParamStore::<f64>::new(0);
    let mlp = Mlp::new(&mut store, "m", &[3, 4, 2], Activation::Tanh, Activation::Identity, &mut r).unwrap();
    let x = uniform(&[5, 3], -1.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let outs = mlp.forward_all(&mut tape, &store, xv).unwrap();
    assert_eq!(outs.len(), 2);
    let apply = |lin: &Linear, input: &[f64], act: fn(f64) -> f64| -> Vec<f64> {
        let (w, b) = (store.get(lin.weight), store.get(lin.bias));
        let rows = input.len() / lin.in_dim;
        let mut out = vec![0.0; rows * lin.out_dim];
        for i in 0..rows {
            for o in 0..lin.out_dim {
                let mut acc = b.data()[o];
                for k in 0..lin.in_dim {
                    acc += w.at(&[o, k]) * input[i * lin.in_dim + k];
                }
                out[i * lin.out_dim + o] = act(acc);
            }
        }
        out
    };
    let h = apply(&mlp.layers[0].0, x.data(), f64::tanh);
    let y = apply(&mlp.layers[1].0, &h, |v| v);
    assert_eq!(tape.shape(outs[1]), &[5, 2]);
    for (a, b) in tape.value(outs[1]).data().iter().zip(&y) {
        assert!((a - b).abs() < 1e-12);
    }
}
