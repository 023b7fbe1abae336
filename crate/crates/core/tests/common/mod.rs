//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use cfc_core::diffcore::{ConvLayer, FeatureGrid};
use cfc_core::mask::SparsityMask;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_grid(rng: &mut impl Rng, rows: usize, cols: usize, ch: usize) -> FeatureGrid {
    FeatureGrid::from_fn(rows, cols, ch, |_, _, _| rng.gen_range(-1.0..1.0))
}

pub fn random_layer(rng: &mut impl Rng, k: usize, c_in: usize, c_out: usize) -> ConvLayer {
    let w = (0..k * k * c_in * c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ConvLayer::from_weights(k, c_in, c_out, w, b).unwrap()
}

pub fn random_mask(rng: &mut impl Rng, w: usize, h: usize, p: f64) -> SparsityMask {
    SparsityMask::from_fn(w, h, |_, _| rng.gen_bool(p))
}

/// Direct quadruple loop over output pixel, input channel and kernel taps.
pub fn naive_saconv(x: &FeatureGrid, mask: &SparsityMask, layer: &ConvLayer) -> FeatureGrid {
    let (rows, cols, _) = x.shape();
    let k = layer.kernel as isize;
    let p = k / 2;
    FeatureGrid::from_fn(rows, cols, layer.c_out, |r, c, co| {
        let mut acc = layer.bias[co];
        for ci in 0..layer.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let (sr, sc) = (r as isize + ky - p, c as isize + kx - p);
                    if sr < 0 || sc < 0 || sr >= rows as isize || sc >= cols as isize {
                        continue;
                    }
                    let (sr, sc) = (sr as usize, sc as usize);
                    if !mask.get(sc, sr) {
                        continue;
                    }
                    acc += layer.w(co, ci, ky as usize, kx as usize) * x.get(sr, sc, ci);
                }
            }
        }
        acc
    })
}

/// Transposed convolution by scattering every input value through the
/// kernel onto a padded canvas, then cropping the padding.
pub fn scatter_deconv(x: &FeatureGrid, layer: &ConvLayer) -> FeatureGrid {
    let (rows, cols, _) = x.shape();
    let (pr, pc) = (2 * rows + 2, 2 * cols + 2);
    let mut canvas = vec![0.0; layer.c_out * pr * pc];
    for co in 0..layer.c_out {
        for ci in 0..layer.c_in {
            for i in 0..rows {
                for j in 0..cols {
                    for ky in 0..4 {
                        for kx in 0..4 {
                            canvas[(co * pr + 2 * i + ky) * pc + 2 * j + kx] +=
                                x.get(i, j, ci) * layer.w(co, ci, ky, kx);
                        }
                    }
                }
            }
        }
    }
    FeatureGrid::from_fn(2 * rows, 2 * cols, layer.c_out, |r, c, co| {
        canvas[(co * pr + r + 1) * pc + c + 1] + layer.bias[co]
    })
}

pub fn binary_dilation(m: &SparsityMask) -> SparsityMask {
    let (w, h) = (m.width() as isize, m.height() as isize);
    SparsityMask::from_fn(m.width(), m.height(), |x, y| {
        (-1..=1).any(|dy| {
            (-1..=1).any(|dx| {
                let (sx, sy) = (x as isize + dx, y as isize + dy);
                sx >= 0 && sy >= 0 && sx < w && sy < h && m.get(sx as usize, sy as usize)
            })
        })
    })
}

pub fn plane_matrix(f: &FeatureGrid, ch: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(f.rows(), f.cols(), f.plane(ch))
}

/// `(1/C) Σ (Aⁱ − Ā)(Bⁱ − B̄)ᵀ` by explicit summation.
pub fn naive_cross_cov(a: &FeatureGrid, b: &FeatureGrid) -> DMatrix<f64> {
    let (m, n, c) = a.shape();
    let mean = |f: &FeatureGrid, r: usize, col: usize| {
        (0..c).map(|k| f.get(r, col, k)).sum::<f64>() / c as f64
    };
    DMatrix::from_fn(m, m, |p, q| {
        let mut acc = 0.0;
        for k in 0..c {
            for j in 0..n {
                acc += (a.get(p, j, k) - mean(a, p, j)) * (b.get(q, j, k) - mean(b, q, j));
            }
        }
        acc / c as f64
    })
}

/// Random orthogonal matrix from the QR factor of a Gaussian-ish matrix.
pub fn random_orthogonal(rng: &mut impl Rng, m: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
    a.qr().q()
}

/// Applies `Q` on the left of every channel plane.
pub fn left_multiply(q: &DMatrix<f64>, f: &FeatureGrid) -> FeatureGrid {
    let mut out = f.clone();
    for ch in 0..f.channels() {
        let p = q * plane_matrix(f, ch);
        for (i, v) in out.plane_mut(ch).iter_mut().enumerate() {
            *v = p[(i / f.cols(), i % f.cols())];
        }
    }
    out
}
