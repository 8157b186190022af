mod common;

use common::{rng, uniform};
use mspg_core::dema::{lgcl_loss, Dema, DemaConfig, DemaOptions};
use mspg_core::nn::{Linear, ParamStore};
use mspg_core::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Dense NCHW-style array for the straight-line reimplementation.
#[derive(Clone, Debug)]
struct Arr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Arr {
    fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }
    fn of(t: &Tensor<f64>) -> Self {
        Self { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }
    fn off(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| acc * n + i)
    }
    fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.off(idx)]
    }
    fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.off(idx);
        self.data[o] = v;
    }
}

fn softmax(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// `y = W x + b` for a `Linear` with weight `[out, in]`.
fn linear(store: &ParamStore<f64>, lin: &Linear, x: &[f64]) -> Vec<f64> {
    let (w, b) = (store.get(lin.weight), store.get(lin.bias));
    (0..lin.out_dim).map(|o| b.data()[o] + (0..lin.in_dim).map(|k| w.at(&[o, k]) * x[k]).sum::<f64>()).collect()
}

/// `x · Wᵀ` for a square `[d, d]` projection.
fn project(w: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..d).map(|o| (0..d).map(|k| w.at(&[o, k]) * x[k]).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn depthwise_same(x: &Arr, k: &Tensor<f64>) -> Arr {
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let ks = k.shape()[2];
    let p = ks / 2;
    let mut out = Arr::zeros(&x.shape);
    for n in 0..b {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for u in 0..ks {
                        for v in 0..ks {
                            let (y, z) = (i as isize + u as isize - p as isize, j as isize + v as isize - p as isize);
                            if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < w {
                                acc += k.at(&[ch, 0, u, v]) * x.get(&[n, ch, y as usize, z as usize]);
                            }
                        }
                    }
                    out.set(&[n, ch, i, j], acc);
                }
            }
        }
    }
    out
}

fn pointwise(x: &Arr, k: &Tensor<f64>) -> Arr {
    let (b, cin, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let cout = k.shape()[0];
    let mut out = Arr::zeros(&[b, cout, h, w]);
    for n in 0..b {
        for o in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let v = (0..cin).map(|c| k.at(&[o, c, 0, 0]) * x.get(&[n, c, i, j])).sum();
                    out.set(&[n, o, i, j], v);
                }
            }
        }
    }
    out
}

/// Windowed attention of one head, returning the head output and the
/// weights of every window in `(batch, window row, window col)` order.
fn head_attention(dema: &Dema, store: &ParamStore<f64>, x: &Arr, head: usize) -> (Arr, Vec<Vec<Vec<f64>>>) {
    let cfg = dema.config();
    let (d, win) = (cfg.head_dim(), cfg.head_windows[head]);
    let (b, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
    let (hp, wp) = (h.div_ceil(win) * win, w.div_ceil(win) * win);
    let (wq, wk, wv) = dema.head_projections(head);
    let (wq, wk, wv) = (store.get(wq), store.get(wk), store.get(wv));
    let mut out = Arr::zeros(&[b, d, h, w]);
    let mut weights = Vec::new();
    for n in 0..b {
        for wy in 0..hp / win {
            for wx in 0..wp / win {
                let cells: Vec<(usize, usize)> =
                    (0..win).flat_map(|ry| (0..win).map(move |rx| (wy * win + ry, wx * win + rx))).collect();
                let feats: Vec<Vec<f64>> = cells
                    .iter()
                    .map(|&(i, j)| {
                        (0..d).map(|c| if i < h && j < w { x.get(&[n, head * d + c, i, j]) } else { 0.0 }).collect()
                    })
                    .collect();
                let q: Vec<Vec<f64>> = feats.iter().map(|f| project(wq, f)).collect();
                let k: Vec<Vec<f64>> = feats.iter().map(|f| project(wk, f)).collect();
                let v: Vec<Vec<f64>> = feats.iter().map(|f| project(wv, f)).collect();
                let mut rows = Vec::new();
                for (a, &(i, j)) in cells.iter().enumerate() {
                    let mut row: Vec<f64> = k.iter().map(|kk| dot(&q[a], kk) / (d as f64).sqrt()).collect();
                    softmax(&mut row);
                    if i < h && j < w {
                        for c in 0..d {
                            out.set(&[n, c, i, j], row.iter().zip(&v).map(|(p, vv)| p * vv[c]).sum());
                        }
                    }
                    rows.push(row);
                }
                weights.push(rows);
            }
        }
    }
    (out, weights)
}

fn concat_channels(parts: &[Arr]) -> Arr {
    let (b, h, w) = (parts[0].shape[0], parts[0].shape[2], parts[0].shape[3]);
    let c: usize = parts.iter().map(|p| p.shape[1]).sum();
    let mut out = Arr::zeros(&[b, c, h, w]);
    for n in 0..b {
        let mut base = 0;
        for p in parts {
            for ch in 0..p.shape[1] {
                for i in 0..h {
                    for j in 0..w {
                        out.set(&[n, base + ch, i, j], p.get(&[n, ch, i, j]));
                    }
                }
            }
            base += p.shape[1];
        }
    }
    out
}

/// Per-sample `(mean, max)` over the spatial axes.
fn pools(x: &Arr, n: usize) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = (x.shape[1], x.shape[2], x.shape[3]);
    let mut avg = vec![0.0; c];
    let mut mx = vec![f64::NEG_INFINITY; c];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x.get(&[n, ch, i, j]);
                avg[ch] += v / (h * w) as f64;
                mx[ch] = mx[ch].max(v);
            }
        }
    }
    (avg, mx)
}

fn context_tokens(dema: &Dema, store: &ParamStore<f64>, x: &Arr, n: usize) -> Vec<Vec<f64>> {
    let (avg, mx) = pools(x, n);
    let (ctx_avg, ctx_max, mix) = dema.context_embedders();
    let both: Vec<f64> = avg.iter().chain(&mx).cloned().collect();
    let mut toks = vec![linear(store, ctx_avg, &avg), linear(store, ctx_max, &mx)];
    toks.extend(mix.iter().map(|m| linear(store, m, &both)));
    toks
}

fn context_attention(
    dema: &Dema,
    store: &ParamStore<f64>,
    x: &Arr,
    tokens: &[Vec<Vec<f64>>],
) -> (Arr, Vec<Vec<Vec<f64>>>) {
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (wq, wk, wv) = dema.context_projections();
    let (wq, wk, wv) = (store.get(wq), store.get(wk), store.get(wv));
    let mut out = Arr::zeros(&x.shape);
    let mut weights = Vec::new();
    for (n, toks) in tokens.iter().enumerate().take(b) {
        let k: Vec<Vec<f64>> = toks.iter().map(|t| project(wk, t)).collect();
        let v: Vec<Vec<f64>> = toks.iter().map(|t| project(wv, t)).collect();
        let mut rows = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let pos: Vec<f64> = (0..c).map(|ch| x.get(&[n, ch, i, j])).collect();
                let q = project(wq, &pos);
                let mut row: Vec<f64> = k.iter().map(|kk| dot(&q, kk) / (c as f64).sqrt()).collect();
                softmax(&mut row);
                for ch in 0..c {
                    out.set(&[n, ch, i, j], row.iter().zip(&v).map(|(p, vv)| p * vv[ch]).sum());
                }
                rows.push(row);
            }
        }
        weights.push(rows);
    }
    (out, weights)
}

fn gate(dema: &Dema, store: &ParamStore<f64>, x: &Arr, n: usize, task: usize) -> (f64, f64) {
    let (avg, _) = pools(x, n);
    let table = store.get(dema.task_table());
    let td = table.shape()[1];
    let mut h: Vec<f64> = avg.into_iter().chain((0..td).map(|k| table.at(&[task, k]))).collect();
    let layers = &dema.gate_mlp().layers;
    for (i, (lin, _)) in layers.iter().enumerate() {
        h = linear(store, lin, &h);
        if i + 1 < layers.len() {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    softmax(&mut h);
    (h[0], h[1])
}

struct Oracle {
    out: Arr,
    focus: Vec<Arr>,
    expansion: Vec<Arr>,
    gates: Vec<(f64, f64)>,
}

fn oracle_forward(dema: &Dema, store: &ParamStore<f64>, x: &Arr) -> Oracle {
    let cfg = dema.config();
    let b = x.shape[0];
    let tokens: Vec<_> = (0..b).map(|n| context_tokens(dema, store, x, n)).collect();
    let gates: Vec<_> = (0..b).map(|n| gate(dema, store, x, n, 0)).collect();
    let (mut focus, mut expansion, mut mixed) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..cfg.scales.len() {
        let xi = depthwise_same(x, store.get(dema.scale_kernel(s)));
        let heads: Vec<Arr> = (0..cfg.heads()).map(|h| head_attention(dema, store, &xi, h).0).collect();
        let fi = pointwise(&concat_channels(&heads), store.get(dema.fuse_weight()));
        let (ei, _) = context_attention(dema, store, &xi, &tokens);
        let mut m = fi.clone();
        let per = m.data.len() / b;
        for (i, v) in m.data.iter_mut().enumerate() {
            let (a, be) = gates[i / per];
            *v = a * fi.data[i] + be * ei.data[i];
        }
        focus.push(fi);
        expansion.push(ei);
        mixed.push(m);
    }
    let out = pointwise(&concat_channels(&mixed), store.get(dema.aggregate_weight()));
    Oracle { out, focus, expansion, gates }
}

fn build(channels: usize, windows: &[usize], seed: u64) -> (ParamStore<f64>, Dema, ChaCha8Rng) {
    let mut r = rng(seed);
    let mut store = ParamStore::new(1);
    let cfg = DemaConfig { head_windows: windows.to_vec(), ..DemaConfig::new(channels) };
    let dema = Dema::new(&mut store, "dema", cfg, &mut r).unwrap();
    (store, dema, r)
}

fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (a, b)) in got.iter().zip(want).enumerate() {
        assert!((a - b).abs() < tol, "{what}[{i}]: {a} vs {b}");
    }
}

#[test]
fn forward_matches_straight_line_reimplementation() {
    let (store, dema, mut r) = build(8, &[2, 3], 21);
    let x = uniform(&[2, 8, 8, 8], -1.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let got = dema.forward(&mut tape, &store, xv, &DemaOptions::default(), None::<&mut ChaCha8Rng>).unwrap();
    let want = oracle_forward(&dema, &store, &Arr::of(&x));
    assert_close(tape.value(got.out).data(), &want.out.data, 1e-5, "out");
    for s in 0..3 {
        assert_close(tape.value(got.focus[s]).data(), &want.focus[s].data, 1e-9, "focus");
        assert_close(tape.value(got.expansion[s]).data(), &want.expansion[s].data, 1e-9, "expansion");
    }
    let g: Vec<f64> = want.gates.iter().flat_map(|&(a, b)| [a, b]).collect();
    assert_close(tape.value(got.gate).data(), &g, 1e-12, "gate");
}

#[test]
fn window_attention_matches_brute_force() {
    let (store, dema, mut r) = build(2, &[2], 4);
    let x = uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (out, weights) = dema.local_head_attention(&mut tape, &store, xv, 0).unwrap();
    let (want_out, want_w) = head_attention(&dema, &store, &Arr::of(&x), 0);
    assert_eq!(tape.shape(weights), &[4, 4, 4]);
    assert_close(tape.value(out).data(), &want_out.data, 1e-12, "head output");
    let flat: Vec<f64> = want_w.into_iter().flatten().flatten().collect();
    assert_close(tape.value(weights).data(), &flat, 1e-12, "weights");
}

#[test]
fn head_fusion_is_a_pointwise_map_of_the_concatenation() {
    let (store, dema, mut r) = build(4, &[2, 2], 5);
    let heads = [uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut r), uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut r)];
    let mut tape = Tape::new();
    let hv: Vec<_> = heads.iter().map(|h| tape.constant(h.clone())).collect();
    let fused = dema.fuse_heads(&mut tape, &store, &hv).unwrap();
    let want = pointwise(&concat_channels(&[Arr::of(&heads[0]), Arr::of(&heads[1])]), store.get(dema.fuse_weight()));
    assert_close(tape.value(fused).data(), &want.data, 1e-12, "fused");
}

#[test]
fn context_attention_over_two_tokens() {
    let (store, dema, mut r) = build(2, &[2], 6);
    let x = uniform(&[1, 2, 2, 3], -1.0, 1.0, &mut r);
    let toks = uniform(&[1, 2, 2], -1.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let (xv, tv) = (tape.constant(x.clone()), tape.constant(toks.clone()));
    let (out, weights) = dema.context_attention(&mut tape, &store, xv, tv).unwrap();
    let tokens = vec![vec![toks.data()[0..2].to_vec(), toks.data()[2..4].to_vec()]];
    let (want, want_w) = context_attention(&dema, &store, &Arr::of(&x), &tokens);
    assert_close(tape.value(out).data(), &want.data, 1e-12, "expansion");
    let flat: Vec<f64> = want_w.into_iter().flatten().flatten().collect();
    assert_close(tape.value(weights).data(), &flat, 1e-12, "weights");
}

#[test]
fn spike_shows_up_in_the_pooled_tokens() {
    let (store, dema, _) = build(2, &[2], 7);
    let mut x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
    x.data_mut()[16 + 5] = 5.0;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let ctx = dema.global_embed(&mut tape, &store, xv).unwrap();
    assert_eq!(tape.shape(ctx), &[1, 4, 2]);
    let (avg, mx, _) = dema.context_embedders();
    let want_avg = linear(&store, avg, &[0.0, 5.0 / 16.0]);
    let want_max = linear(&store, mx, &[0.0, 5.0]);
    assert_close(&tape.value(ctx).data()[0..2], &want_avg, 1e-12, "avg token");
    assert_close(&tape.value(ctx).data()[2..4], &want_max, 1e-12, "max token");
}

#[test]
fn gate_logits_two_and_zero() {
    let (mut store, dema, mut r) = build(2, &[2], 8);
    let (last, _) = dema.gate_mlp().layers.last().unwrap().clone();
    *store.get_mut(last.weight) = Tensor::zeros(store.get(last.weight).shape());
    *store.get_mut(last.bias) = Tensor::from_f64(vec![2], &[2.0, 0.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(uniform(&[3, 2, 4, 4], -1.0, 1.0, &mut r));
    let task = dema.task_embedding(&mut tape, &store, 0).unwrap();
    let g = dema.dynamic_gate(&mut tape, &store, xv, task).unwrap();
    for row in tape.value(g).data().chunks(2) {
        assert!((row[0] - 0.8808).abs() < 1e-4);
        assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn saturated_gate_selects_one_flow() {
    let (store, dema, mut r) = build(4, &[2, 4], 9);
    let x = uniform(&[2, 4, 4, 4], -1.0, 1.0, &mut r);
    for (gate, pick_focus) in [((1.0, 0.0), true), ((0.0, 1.0), false)] {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let opts = DemaOptions { gate_override: Some(gate), ..DemaOptions::default() };
        let o = dema.forward(&mut tape, &store, xv, &opts, None::<&mut ChaCha8Rng>).unwrap();
        for s in 0..3 {
            let want = if pick_focus { o.focus[s] } else { o.expansion[s] };
            assert_eq!(tape.value(o.mixed[s]), tape.value(want));
        }
    }
}

#[test]
fn contrastive_term_matches_direct_formula() {
    let mut r = rng(10);
    let (f, e) = (uniform(&[4, 5], -1.0, 1.0, &mut r), uniform(&[4, 5], -1.0, 1.0, &mut r));
    let tau = 0.3;
    let mut tape = Tape::new();
    let (fv, ev) = (tape.constant(f.clone()), tape.constant(e.clone()));
    let l = lgcl_loss(&mut tape, fv, ev, tau).unwrap();
    let unit = |t: &Tensor<f64>, i: usize| {
        let row = &t.data()[i * 5..(i + 1) * 5];
        let n = dot(row, row).sqrt();
        row.iter().map(|v| v / n).collect::<Vec<_>>()
    };
    let mut want = 0.0;
    for i in 0..4 {
        let sims: Vec<f64> = (0..4).map(|j| dot(&unit(&f, i), &unit(&e, j)) / tau).collect();
        let lse = sims.iter().map(|s| s.exp()).sum::<f64>().ln();
        want += lse - sims[i];
    }
    assert!((tape.value(l).item() - want / 4.0).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn batch_permutation_permutes_outputs(seed in any::<u64>(), swap in 0usize..3) {
        let (store, dema, mut r) = build(4, &[2, 3], seed);
        let x = uniform(&[3, 4, 5, 5], -1.0, 1.0, &mut r);
        let per = 4 * 25;
        let mut order = [0, 1, 2];
        order.swap(swap, (swap + 1) % 3);
        let permuted = Tensor::from_fn(&[3, 4, 5, 5], |i| x.data()[order[i / per] * per + i % per]);
        let run = |input: Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(input);
            let o = dema.forward(&mut tape, &store, xv, &DemaOptions::default(), None::<&mut ChaCha8Rng>).unwrap();
            tape.value(o.out).clone()
        };
        let (a, b) = (run(x.clone()), run(permuted));
        for i in 0..a.numel() {
            prop_assert!((b.data()[i] - a.data()[order[i / per] * per + i % per]).abs() < 1e-12);
        }
    }

    #[test]
    fn mix_lies_between_the_two_flows(seed in any::<u64>()) {
        let (store, dema, mut r) = build(4, &[2, 2], seed);
        let x = uniform(&[2, 4, 4, 4], -2.0, 2.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let o = dema.forward(&mut tape, &store, xv, &DemaOptions::default(), None::<&mut ChaCha8Rng>).unwrap();
        for s in 0..3 {
            let (f, e, m) = (tape.value(o.focus[s]), tape.value(o.expansion[s]), tape.value(o.mixed[s]));
            for i in 0..m.numel() {
                let (lo, hi) = (f.data()[i].min(e.data()[i]), f.data()[i].max(e.data()[i]));
                prop_assert!(m.data()[i] >= lo - 1e-12 && m.data()[i] <= hi + 1e-12);
            }
        }
    }
}
