//! Raw numeric kernels. Every output element is produced by exactly one loop in
//! a fixed order, so results do not depend on the thread count.

use std::sync::OnceLock;

use rayon::prelude::*;

use super::Scalar;

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

/// Kernel-level thread cap read once from `MSPG_THREADS` (0 or unset = serial).
pub fn threads() -> usize {
    pool().as_ref().map_or(0, |p| p.current_num_threads())
}

fn pool() -> &'static Option<rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let n = std::env::var("MSPG_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
        if n == 0 {
            return None;
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()
    })
}

/// Runs `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `out`.
pub(crate) fn for_chunks<T: Send>(out: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if chunk == 0 {
        return;
    }
    match pool() {
        Some(p) if out.len() >= 4096 => p.install(|| out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c))),
        _ => out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
    }
}

/// `a[m,k] · b[k,n]`
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for_chunks(&mut out, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o = *o + av * bv;
            }
        }
    });
    debug_assert_eq!(out.len(), m * n);
    out
}

/// `a[m,k] · b[n,k]ᵀ`
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for_chunks(&mut out, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ar, &b[j * k..(j + 1) * k]);
        }
    });
    out
}

/// Dot product with four interleaved partial sums.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ar.iter().zip(br) {
        tail = tail + x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `a[k,m]ᵀ · b[k,n]`
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for_chunks(&mut out, n, |p, row| {
        for i in 0..k {
            let av = a[i * m + p];
            let br = &b[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

/// Geometry of a 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
    pub depthwise: bool,
}

impl ConvGeom {
    /// Output positions `lo..hi` touched by kernel tap `kt`; output `o` reads
    /// input `o·stride + kt − pad`.
    fn span(&self, kt: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let lo = if self.pad > kt { (self.pad - kt).div_ceil(self.stride) } else { 0 };
        let hi = if in_len + self.pad > kt { ((in_len + self.pad - kt - 1) / self.stride + 1).min(out_len) } else { 0 };
        (lo, hi.max(lo))
    }

    fn input_at(&self, o: usize, kt: usize) -> usize {
        o * self.stride + kt - self.pad
    }
}

/// `(output, input)` plane offsets linked by each kernel tap `ky·k + kx`.
fn tap_pairs(g: &ConvGeom) -> Vec<Vec<(usize, usize)>> {
    let mut taps = Vec::with_capacity(g.k * g.k);
    for ky in 0..g.k {
        let (y0, y1) = g.span(ky, g.oh, g.h);
        for kx in 0..g.k {
            let (x0, x1) = g.span(kx, g.ow, g.w);
            let mut pairs = Vec::with_capacity((y1 - y0) * (x1 - x0));
            for oy in y0..y1 {
                let iy = g.input_at(oy, ky);
                for ox in x0..x1 {
                    pairs.push((oy * g.ow + ox, iy * g.w + g.input_at(ox, kx)));
                }
            }
            taps.push(pairs);
        }
    }
    taps
}

/// Patch matrix `[batch, oh·ow, in_ch·k·k]` with zeros outside the input.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, taps: &[Vec<(usize, usize)>]) -> Vec<T> {
    let (plane, in_plane, kk) = (g.oh * g.ow, g.h * g.w, g.k * g.k);
    let cols_w = g.in_ch * kk;
    let mut cols = vec![T::zero(); g.batch * plane * cols_w];
    for_chunks(&mut cols, plane * cols_w, |b, dst| {
        for c in 0..g.in_ch {
            let src = &x[(b * g.in_ch + c) * in_plane..][..in_plane];
            for (t, pairs) in taps.iter().enumerate() {
                let col = c * kk + t;
                for &(o, i) in pairs {
                    dst[o * cols_w + col] = src[i];
                }
            }
        }
    });
    cols
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.oh * g.ow;
    let taps = tap_pairs(g);
    if !g.depthwise {
        let cols_w = g.in_ch * g.k * g.k;
        let cols = im2col(x, g, &taps);
        let mut out = Vec::with_capacity(g.batch * g.out_ch * plane);
        for b in 0..g.batch {
            out.extend(mm_nt(k, &cols[b * plane * cols_w..][..plane * cols_w], g.out_ch, cols_w, plane));
        }
        return out;
    }
    let mut out = vec![T::zero(); g.batch * g.out_ch * plane];
    for_chunks(&mut out, plane, |bo, dst| {
        let (b, o) = (bo / g.out_ch, bo % g.out_ch);
        let src = &x[(b * g.in_ch + o) * g.h * g.w..][..g.h * g.w];
        for (t, pairs) in taps.iter().enumerate() {
            let wv = k[o * g.k * g.k + t];
            for &(po, pi) in pairs {
                dst[po] = dst[po] + wv * src[pi];
            }
        }
    });
    out
}

/// Returns `(d_input, d_kernel)` for upstream gradient `gout`.
pub(crate) fn conv2d_backward<T: Scalar>(x: &[T], k: &[T], gout: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let plane = g.oh * g.ow;
    let in_plane = g.h * g.w;
    let kk = g.k * g.k;
    let taps = tap_pairs(g);
    let mut dx = vec![T::zero(); x.len()];
    if !g.depthwise {
        let cols_w = g.in_ch * kk;
        let cols = im2col(x, g, &taps);
        let mut dk = vec![T::zero(); k.len()];
        for b in 0..g.batch {
            let go = &gout[b * g.out_ch * plane..][..g.out_ch * plane];
            let part = mm(go, &cols[b * plane * cols_w..][..plane * cols_w], g.out_ch, plane, cols_w);
            for (d, p) in dk.iter_mut().zip(part) {
                *d = *d + p;
            }
            let dcols = mm_tn(go, k, plane, g.out_ch, cols_w);
            let dxb = &mut dx[b * g.in_ch * in_plane..][..g.in_ch * in_plane];
            for c in 0..g.in_ch {
                let dst = &mut dxb[c * in_plane..][..in_plane];
                for (t, pairs) in taps.iter().enumerate() {
                    let col = c * kk + t;
                    for &(o, i) in pairs {
                        dst[i] = dst[i] + dcols[o * cols_w + col];
                    }
                }
            }
        }
        return (dx, dk);
    }
    for_chunks(&mut dx, in_plane, |bc, dst| {
        let (b, c) = (bc / g.in_ch, bc % g.in_ch);
        let go = &gout[(b * g.out_ch + c) * plane..][..plane];
        for (t, pairs) in taps.iter().enumerate() {
            let wv = k[c * kk + t];
            for &(po, pi) in pairs {
                dst[pi] = dst[pi] + wv * go[po];
            }
        }
    });
    let mut dk = vec![T::zero(); k.len()];
    for_chunks(&mut dk, kk, |o, dst| {
        for b in 0..g.batch {
            let go = &gout[(b * g.out_ch + o) * plane..][..plane];
            let src = &x[(b * g.in_ch + o) * in_plane..][..in_plane];
            for (t, pairs) in taps.iter().enumerate() {
                let mut acc = T::zero();
                for &(po, pi) in pairs {
                    acc = acc + go[po] * src[pi];
                }
                dst[t] = dst[t] + acc;
            }
        }
    });
    (dx, dk)
}

/// Decomposes a shape around `axis` into (outer, axis extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..n {
                mx = mx.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..n {
                let e = (x[at(j)] - mx).exp();
                out[at(j)] = e;
                sum = sum + e;
            }
            if log {
                let lse = mx + sum.ln();
                for j in 0..n {
                    out[at(j)] = x[at(j)] - lse;
                }
            } else {
                let inv = T::one() / sum;
                for j in 0..n {
                    out[at(j)] = out[at(j)] * inv;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let c = mm(&a, &b, 2, 3, 4);
        // bᵀ stored as 4x3
        let mut bt = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                bt[j * 3 + p] = b[p * 4 + j];
            }
        }
        assert_eq!(mm_nt(&a, &bt, 2, 3, 4), c);
        // aᵀ stored as 3x2
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for p in 0..3 {
                at[p * 2 + i] = a[i * 3 + p];
            }
        }
        assert_eq!(mm_tn(&at, &b, 2, 3, 4), c);
    }

    #[test]
    fn strided_valid_conv_geometry() {
        // 1x1x4x4 input of ones, 2x2... odd kernels only: 3x3 stride 2 valid -> 1x1
        let x = vec![1.0f64; 16];
        let k = vec![1.0f64; 9];
        let g = ConvGeom {
            batch: 1,
            in_ch: 1,
            h: 4,
            w: 4,
            out_ch: 1,
            k: 3,
            stride: 2,
            pad: 0,
            oh: 1,
            ow: 1,
            depthwise: false,
        };
        assert_eq!(conv2d_forward(&x, &k, &g), vec![9.0]);
    }

    fn naive(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.out_ch * g.oh * g.ow];
        for b in 0..g.batch {
            for o in 0..g.out_ch {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        let chans: Vec<usize> = if g.depthwise { vec![o] } else { (0..g.in_ch).collect() };
                        for c in chans {
                            let ci = if g.depthwise { 0 } else { c };
                            let kin = if g.depthwise { 1 } else { g.in_ch };
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xv = x[((b * g.in_ch + c) * g.h + iy as usize) * g.w + ix as usize];
                                    acc += xv * k[((o * kin + ci) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                        out[((b * g.out_ch + o) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let val = |i: usize| ((i * 37 % 11) as f64 - 5.0) / 7.0;
        for (k, stride, pad, depthwise) in
            [(3, 1, 1, false), (5, 1, 2, false), (7, 1, 3, true), (3, 2, 1, false), (3, 2, 0, true)]
        {
            let (h, w, c) = (5, 4, 3);
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            let out_ch = if depthwise { c } else { 2 };
            let g = ConvGeom { batch: 2, in_ch: c, h, w, out_ch, k, stride, pad, oh, ow, depthwise };
            let x: Vec<f64> = (0..2 * c * h * w).map(val).collect();
            let kin = if depthwise { 1 } else { c };
            let kern: Vec<f64> = (0..out_ch * kin * k * k).map(|i| val(i + 3)).collect();
            let got = conv2d_forward(&x, &kern, &g);
            for (a, b) in got.iter().zip(naive(&x, &kern, &g)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
