//! Same-padded, stride-1 2-D convolution over CHW buffers.
//!
//! Every output value is produced by exactly one task with a fixed summation
//! order, so results do not depend on the rayon pool size. Accumulators are
//! explicit 8-lane arrays updated with fused multiply-adds. On x86-64 CPUs
//! with AVX2 and FMA the lanes map onto two 256-bit registers; elsewhere the
//! same per-lane `mul_add` sequence runs in scalar code, so both paths round
//! identically.

use rayon::prelude::*;

const LANES: usize = 8;
const CO_BLOCK: usize = 4;
/// Largest supported kernel side.
pub const MAX_KERNEL: usize = 3;

/// Zero-pads each channel by `r` pixels on every side.
pub fn pad(input: &[f64], channels: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut out = vec![0.0; channels * ph * pw];
    for c in 0..channels {
        for y in 0..h {
            let src = &input[(c * h + y) * w..(c * h + y + 1) * w];
            let dst = (c * ph + y + r) * pw + r;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

/// Geometry shared by the kernels: a padded CHW input and the output size.
#[derive(Clone, Copy)]
struct Geom<'a> {
    padded: &'a [f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Geom<'_> {
    fn pw(&self) -> usize {
        self.w + 2 * (self.k / 2)
    }

    fn plane(&self) -> usize {
        (self.h + 2 * (self.k / 2)) * self.pw()
    }

    /// Padded row `py` of channel `ci` starting at column `x`, `len` values.
    #[inline(always)]
    fn row(&self, ci: usize, py: usize, x: usize, len: usize) -> &[f64] {
        let start = ci * self.plane() + py * self.pw() + x;
        &self.padded[start..start + len]
    }
}

#[cfg(target_arch = "x86_64")]
fn has_fma() -> bool {
    std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
}

/// `out[co] = bias[co] + Σ_ci Σ_ky,kx weight[co,ci,ky,kx] · in[ci][y+ky−r][x+kx−r]`.
///
/// `padded` is the input already padded by `k / 2`. Weight layout is
/// `[cout][cin][k][k]`. Output channels are processed in blocks of four so
/// each input window load feeds several accumulators.
#[allow(clippy::too_many_arguments)]
pub fn forward_padded(
    padded: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
    k: usize,
    out: &mut [f64],
) {
    assert!(k <= MAX_KERNEL && k % 2 == 1, "kernel {k} unsupported");
    let g = Geom { padded, cin, h, w, k };
    let hw = h * w;
    let ckk = cin * k * k;
    assert_eq!(padded.len(), cin * g.plane());
    assert_eq!(weight.len(), cout * ckk);
    assert_eq!(out.len(), cout * hw);
    out.par_chunks_mut(CO_BLOCK * hw).enumerate().for_each(|(blk, o)| {
        let co0 = blk * CO_BLOCK;
        let last = co0 + o.len() / hw - 1;
        let wts: [&[f64]; CO_BLOCK] = std::array::from_fn(|j| {
            let c = (co0 + j).min(last);
            &weight[c * ckk..(c + 1) * ckk]
        });
        let bs: [f64; CO_BLOCK] = std::array::from_fn(|j| bias.map_or(0.0, |b| b[(co0 + j).min(last)]));
        for y in 0..h {
            let mut x = 0;
            while x + LANES <= w {
                let acc = window_block(&g, &wts, y, x);
                for (j, plane) in o.chunks_exact_mut(hw).enumerate() {
                    for i in 0..LANES {
                        plane[y * w + x + i] = bs[j] + acc[j][i];
                    }
                }
                x += LANES;
            }
            for xr in x..w {
                for (j, plane) in o.chunks_exact_mut(hw).enumerate() {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            let row = g.row(ci, y + ky, xr, k);
                            for kx in 0..k {
                                acc = wts[j][(ci * k + ky) * k + kx].mul_add(row[kx], acc);
                            }
                        }
                    }
                    plane[y * w + xr] = bs[j] + acc;
                }
            }
        }
    });
}

/// Accumulators for `CO_BLOCK` channels at output row `y`, columns `x..x+8`.
#[inline]
fn window_block(g: &Geom, wts: &[&[f64]; CO_BLOCK], y: usize, x: usize) -> [[f64; LANES]; CO_BLOCK] {
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the CPU reports AVX2 and FMA.
        return unsafe { simd::window_block(g, wts, y, x) };
    }
    let k = g.k;
    let mut acc = [[0.0f64; LANES]; CO_BLOCK];
    for ci in 0..g.cin {
        for ky in 0..k {
            let row = g.row(ci, y + ky, x, LANES + k - 1);
            for kx in 0..k {
                let t = (ci * k + ky) * k + kx;
                for (acc_j, wj) in acc.iter_mut().zip(wts) {
                    let wv = wj[t];
                    for i in 0..LANES {
                        acc_j[i] = wv.mul_add(row[kx + i], acc_j[i]);
                    }
                }
            }
        }
    }
    acc
}

#[allow(clippy::too_many_arguments)]
pub fn forward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
) -> Vec<f64> {
    let padded = pad(input, cin, h, w, k / 2);
    let mut out = vec![0.0; cout * h * w];
    forward_padded(&padded, cin, h, w, weight, Some(bias), cout, k, &mut out);
    out
}

/// Gradient with respect to the layer input: a convolution of the output
/// gradient with the channel-transposed, spatially flipped kernel.
pub fn backward_input(
    grad_out: &[f64],
    cout: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cin: usize,
    k: usize,
) -> Vec<f64> {
    let mut flipped = vec![0.0; weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    flipped[((ci * cout + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                        weight[((co * cin + ci) * k + ky) * k + kx];
                }
            }
        }
    }
    let padded = pad(grad_out, cout, h, w, k / 2);
    let mut out = vec![0.0; cin * h * w];
    forward_padded(&padded, cout, h, w, &flipped, None, cin, k, &mut out);
    out
}

/// Weight and bias gradients: `gw[co,ci,ky,kx] = Σ_y,x g[co][y][x] · in_pad[ci][y+ky][x+kx]`.
pub fn backward_params(
    grad_out: &[f64],
    cout: usize,
    padded_in: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    assert!(k <= MAX_KERNEL && k % 2 == 1, "kernel {k} unsupported");
    let geom = Geom { padded: padded_in, cin, h, w, k };
    assert_eq!(padded_in.len(), cin * geom.plane());
    assert_eq!(grad_out.len(), cout * h * w);
    let kk = k * k;
    let mut gw = vec![0.0; cout * cin * kk];
    gw.par_chunks_mut(cin * kk).enumerate().for_each(|(co, gco)| {
        let g = &grad_out[co * h * w..(co + 1) * h * w];
        for ci in 0..cin {
            for ky in 0..k {
                let (acc, tail) = tap_row(&geom, g, ci, ky);
                for kx in 0..k {
                    gco[(ci * k + ky) * k + kx] = lane_sum(acc[kx]) + tail[kx];
                }
            }
        }
    });
    let gb = grad_out
        .chunks_exact(h * w)
        .map(|g| {
            let mut acc = [0.0f64; LANES];
            let mut c = g.chunks_exact(LANES);
            for a in &mut c {
                for i in 0..LANES {
                    acc[i] += a[i];
                }
            }
            lane_sum(acc) + c.remainder().iter().sum::<f64>()
        })
        .collect();
    (gw, gb)
}

type TapAcc = ([[f64; LANES]; MAX_KERNEL], [f64; MAX_KERNEL]);

/// Lane accumulators (and the scalar remainder) of `Σ g · in` for the taps
/// `(ky, 0..k)` of input channel `ci`.
#[inline]
fn tap_row(geom: &Geom, g: &[f64], ci: usize, ky: usize) -> TapAcc {
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the CPU reports AVX2 and FMA.
        return unsafe { simd::tap_row(geom, g, ci, ky) };
    }
    let (k, w) = (geom.k, geom.w);
    let mut acc = [[0.0f64; LANES]; MAX_KERNEL];
    let mut tail = [0.0f64; MAX_KERNEL];
    for y in 0..geom.h {
        let grow = &g[y * w..(y + 1) * w];
        let irow = geom.row(ci, y + ky, 0, w + k - 1);
        let mut x = 0;
        while x + LANES <= w {
            for (kx, acc_k) in acc.iter_mut().enumerate().take(k) {
                for i in 0..LANES {
                    acc_k[i] = grow[x + i].mul_add(irow[x + kx + i], acc_k[i]);
                }
            }
            x += LANES;
        }
        scalar_tail(grow, irow, x, k, &mut tail);
    }
    (acc, tail)
}

#[inline(always)]
fn scalar_tail(grow: &[f64], irow: &[f64], from: usize, k: usize, tail: &mut [f64; MAX_KERNEL]) {
    for xr in from..grow.len() {
        for kx in 0..k {
            tail[kx] = grow[xr].mul_add(irow[xr + kx], tail[kx]);
        }
    }
}

#[inline(always)]
fn lane_sum(acc: [f64; LANES]) -> f64 {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    use super::{scalar_tail, Geom, TapAcc, CO_BLOCK, LANES, MAX_KERNEL};

    #[inline(always)]
    unsafe fn store(v: [__m256d; 2]) -> [f64; LANES] {
        let mut out = [0.0; LANES];
        _mm256_storeu_pd(out.as_mut_ptr(), v[0]);
        _mm256_storeu_pd(out.as_mut_ptr().add(4), v[1]);
        out
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn window_block(
        g: &Geom,
        wts: &[&[f64]; CO_BLOCK],
        y: usize,
        x: usize,
    ) -> [[f64; LANES]; CO_BLOCK] {
        let k = g.k;
        let taps = g.cin * k * k;
        for wj in wts {
            assert!(wj.len() >= taps);
        }
        let mut acc = [[_mm256_setzero_pd(); 2]; CO_BLOCK];
        for ci in 0..g.cin {
            for ky in 0..k {
                let row = g.row(ci, y + ky, x, LANES + k - 1);
                let p = row.as_ptr();
                for kx in 0..k {
                    let lo = _mm256_loadu_pd(p.add(kx));
                    let hi = _mm256_loadu_pd(p.add(kx + 4));
                    let t = (ci * k + ky) * k + kx;
                    for (a, wj) in acc.iter_mut().zip(wts) {
                        let wv = _mm256_set1_pd(*wj.get_unchecked(t));
                        a[0] = _mm256_fmadd_pd(wv, lo, a[0]);
                        a[1] = _mm256_fmadd_pd(wv, hi, a[1]);
                    }
                }
            }
        }
        let mut out = [[0.0; LANES]; CO_BLOCK];
        for (o, a) in out.iter_mut().zip(acc) {
            *o = store(a);
        }
        out
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn tap_row(geom: &Geom, g: &[f64], ci: usize, ky: usize) -> TapAcc {
        let (k, w) = (geom.k, geom.w);
        let mut acc = [[_mm256_setzero_pd(); 2]; MAX_KERNEL];
        let mut tail = [0.0f64; MAX_KERNEL];
        for y in 0..geom.h {
            let grow = &g[y * w..(y + 1) * w];
            let irow = geom.row(ci, y + ky, 0, w + k - 1);
            let (gp, ip) = (grow.as_ptr(), irow.as_ptr());
            let mut x = 0;
            while x + LANES <= w {
                let g0 = _mm256_loadu_pd(gp.add(x));
                let g1 = _mm256_loadu_pd(gp.add(x + 4));
                for (kx, a) in acc.iter_mut().enumerate().take(k) {
                    a[0] = _mm256_fmadd_pd(g0, _mm256_loadu_pd(ip.add(x + kx)), a[0]);
                    a[1] = _mm256_fmadd_pd(g1, _mm256_loadu_pd(ip.add(x + kx + 4)), a[1]);
                }
                x += LANES;
            }
            scalar_tail(grow, irow, x, k, &mut tail);
        }
        let mut out = [[0.0; LANES]; MAX_KERNEL];
        for (o, a) in out.iter_mut().zip(acc) {
            *o = store(a);
        }
        (out, tail)
    }
}
