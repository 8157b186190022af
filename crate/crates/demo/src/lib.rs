//! Three small views of the trainer's building blocks, exported to the page in
//! `www/`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use mspg_core::apfl::steplr_update;
use mspg_core::dema::{Dema, DemaConfig};
use mspg_core::harness::datasets::RingConfig;
use mspg_core::nn::ParamStore;
use mspg_core::tensor::{Tape, Tensor};

fn js_err(e: mspg_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `n` ring samples as `[x0, y0, label0, x1, y1, label1, ...]`.
#[wasm_bindgen]
pub fn ring_samples(n: usize, modes: usize, radius: f64, std: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    let cfg = RingConfig { modes, radius, std };
    let (points, labels) = cfg.sample(n, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(js_err)?;
    Ok(points.iter().zip(labels).flat_map(|(p, m)| [p[0], p[1], m as f64]).collect())
}

/// Learning rate before each of `rounds` rounds, decaying once per round.
#[wasm_bindgen]
pub fn steplr_curve(eta0: f64, gamma: f64, step: u32, rounds: usize) -> Result<Vec<f64>, JsError> {
    let mut eta = eta0;
    let mut out = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        out.push(eta);
        eta = steplr_update(eta, gamma, step).map_err(js_err)?;
    }
    Ok(out)
}

/// A `side × side` test pattern: a bright square on a faint diagonal ramp,
/// repeated over `channels` channels with a per-channel phase.
fn pattern(channels: usize, side: usize) -> Tensor<f64> {
    let lo = side / 4;
    let hi = side - side / 3;
    Tensor::from_fn(&[1, channels, side, side], |i| {
        let (c, y, x) = (i / (side * side), i / side % side, i % side);
        let square = if (lo..hi).contains(&y) && (lo..hi).contains(&x) { 1.0 } else { 0.0 };
        square + 0.1 * ((x + y + c) as f64 / side as f64)
    })
}

/// Attention weights from the query pixel `(qx, qy)` onto the other pixels of
/// its window, for a single head with window edge `window` over a random
/// block. Returns `side²` values, zero outside the query's window.
#[wasm_bindgen]
pub fn attention_heatmap(side: usize, window: usize, qx: usize, qy: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    if qx >= side || qy >= side {
        return Err(JsError::new("query pixel outside the map"));
    }
    let channels = 4;
    let cfg = DemaConfig { head_windows: vec![window], ..DemaConfig::new(channels) };
    let mut store = ParamStore::new(0);
    let dema = Dema::new(&mut store, "demo", cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(js_err)?;
    let mut tape = Tape::new();
    let x = tape.constant(pattern(channels, side));
    let (_, weights) = dema.local_head_attention(&mut tape, &store, x, 0).map_err(js_err)?;
    let weights = tape.value(weights);
    let per_row = side.div_ceil(window);
    let (wy, wx) = (qy / window, qx / window);
    let cells = window * window;
    let query = (qy % window) * window + qx % window;
    let row = &weights.data()[(wy * per_row + wx) * cells * cells + query * cells..][..cells];
    let mut map = vec![0.0; side * side];
    for (k, &w) in row.iter().enumerate() {
        let (y, x) = (wy * window + k / window, wx * window + k % window);
        if y < side && x < side {
            map[y * side + x] = w;
        }
    }
    Ok(map)
}
