//! Raw convolution kernels shared by the graph ops.
//!
//! All convolutions are cross-correlations with `[c_out][c_in][ky][kx]`
//! weights. Same-padding convolutions use stride 1 and zero padding of
//! `k / 2`; the transposed convolution uses kernel 4, stride 2, padding 1.

use super::grid::FeatureGrid;
use super::params::ConvLayer;

pub const DECONV_KERNEL: usize = 4;
pub const DECONV_STRIDE: usize = 2;
pub const DECONV_PAD: usize = 1;

/// Stride-1 same-padded convolution plus bias.
pub fn conv_same(x: &FeatureGrid, layer: &ConvLayer) -> FeatureGrid {
    let (rows, cols, _) = x.shape();
    let k = layer.kernel;
    let pad = (k / 2) as isize;
    let mut out = FeatureGrid::zeros(rows, cols, layer.c_out);
    for co in 0..layer.c_out {
        let plane = out.plane_mut(co);
        plane.iter_mut().for_each(|v| *v = layer.bias[co]);
        for ci in 0..layer.c_in {
            let src = x.plane(ci);
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let w = layer.w(co, ci, ky, kx);
                    if w == 0.0 {
                        continue;
                    }
                    for r in 0..rows {
                        let sr = r as isize + dy;
                        if sr < 0 || sr >= rows as isize {
                            continue;
                        }
                        let (c0, c1) = col_range(cols, dx);
                        let src_row = &src[sr as usize * cols..(sr as usize + 1) * cols];
                        let dst_row = &mut plane[r * cols..(r + 1) * cols];
                        for c in c0..c1 {
                            dst_row[c] += w * src_row[(c as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output columns `c` whose source column `c + dx` lies inside `0..cols`.
#[inline]
fn col_range(cols: usize, dx: isize) -> (usize, usize) {
    let c0 = (-dx).max(0) as usize;
    let c1 = (cols as isize - dx).clamp(0, cols as isize) as usize;
    (c0.min(c1), c1)
}

/// Gradients of [`conv_same`] given the upstream gradient. Returns the input
/// gradient and accumulates weight and bias gradients into `grad_w`, `grad_b`.
pub fn conv_same_backward(
    x: &FeatureGrid,
    layer: &ConvLayer,
    grad_out: &FeatureGrid,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> FeatureGrid {
    let (rows, cols, _) = x.shape();
    let k = layer.kernel;
    let pad = (k / 2) as isize;
    let mut grad_x = FeatureGrid::zeros(rows, cols, layer.c_in);
    for co in 0..layer.c_out {
        let g = grad_out.plane(co);
        grad_b[co] += g.iter().sum::<f64>();
        for ci in 0..layer.c_in {
            let src = x.plane(ci);
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let wi = ((co * layer.c_in + ci) * k + ky) * k + kx;
                    let w = layer.weight[wi];
                    let mut acc = 0.0;
                    let gx = grad_x.plane_mut(ci);
                    for r in 0..rows {
                        let sr = r as isize + dy;
                        if sr < 0 || sr >= rows as isize {
                            continue;
                        }
                        let sr = sr as usize;
                        let (c0, c1) = col_range(cols, dx);
                        for c in c0..c1 {
                            let sc = (c as isize + dx) as usize;
                            let go = g[r * cols + c];
                            acc += go * src[sr * cols + sc];
                            gx[sr * cols + sc] += go * w;
                        }
                    }
                    grad_w[wi] += acc;
                }
            }
        }
    }
    grad_x
}

/// Transposed convolution (kernel 4, stride 2, padding 1) plus bias; doubles
/// both spatial dimensions.
///
/// `out[co, 2i - 1 + ky, 2j - 1 + kx] += x[ci, i, j] * w[co][ci][ky][kx]`.
pub fn deconv2x(x: &FeatureGrid, layer: &ConvLayer) -> FeatureGrid {
    let (rows, cols, _) = x.shape();
    let (orows, ocols) = (rows * DECONV_STRIDE, cols * DECONV_STRIDE);
    let mut out = FeatureGrid::zeros(orows, ocols, layer.c_out);
    for co in 0..layer.c_out {
        let plane = out.plane_mut(co);
        plane.iter_mut().for_each(|v| *v = layer.bias[co]);
        for ci in 0..layer.c_in {
            let src = x.plane(ci);
            for ky in 0..DECONV_KERNEL {
                for kx in 0..DECONV_KERNEL {
                    let w = layer.w(co, ci, ky, kx);
                    if w == 0.0 {
                        continue;
                    }
                    for i in 0..rows {
                        let Some(oy) = deconv_target(i, ky, orows) else {
                            continue;
                        };
                        for j in 0..cols {
                            let Some(ox) = deconv_target(j, kx, ocols) else {
                                continue;
                            };
                            plane[oy * ocols + ox] += w * src[i * cols + j];
                        }
                    }
                }
            }
        }
    }
    out
}

#[inline]
fn deconv_target(i: usize, k: usize, len: usize) -> Option<usize> {
    let o = (DECONV_STRIDE * i + k) as isize - DECONV_PAD as isize;
    (o >= 0 && (o as usize) < len).then_some(o as usize)
}

/// Stride-2 convolution with the same taps as [`deconv2x`], without bias:
/// the adjoint of the linear part of the transposed convolution.
///
/// `z[ci, i, j] = sum y[co, 2i - 1 + ky, 2j - 1 + kx] * w[co][ci][ky][kx]`.
pub fn conv_stride2(y: &FeatureGrid, layer: &ConvLayer) -> FeatureGrid {
    let (orows, ocols, _) = y.shape();
    let (rows, cols) = (orows / DECONV_STRIDE, ocols / DECONV_STRIDE);
    let mut z = FeatureGrid::zeros(rows, cols, layer.c_in);
    for co in 0..layer.c_out {
        let src = y.plane(co);
        for ci in 0..layer.c_in {
            let dst = z.plane_mut(ci);
            for ky in 0..DECONV_KERNEL {
                for kx in 0..DECONV_KERNEL {
                    let w = layer.w(co, ci, ky, kx);
                    if w == 0.0 {
                        continue;
                    }
                    for i in 0..rows {
                        let Some(oy) = deconv_target(i, ky, orows) else {
                            continue;
                        };
                        for j in 0..cols {
                            let Some(ox) = deconv_target(j, kx, ocols) else {
                                continue;
                            };
                            dst[i * cols + j] += w * src[oy * ocols + ox];
                        }
                    }
                }
            }
        }
    }
    z
}

/// Accumulates the weight and bias gradients of [`deconv2x`].
pub fn deconv2x_param_grads(
    x: &FeatureGrid,
    layer: &ConvLayer,
    grad_out: &FeatureGrid,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let (rows, cols, _) = x.shape();
    let (orows, ocols, _) = grad_out.shape();
    let k = DECONV_KERNEL;
    for co in 0..layer.c_out {
        let g = grad_out.plane(co);
        grad_b[co] += g.iter().sum::<f64>();
        for ci in 0..layer.c_in {
            let src = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for i in 0..rows {
                        let Some(oy) = deconv_target(i, ky, orows) else {
                            continue;
                        };
                        for j in 0..cols {
                            let Some(ox) = deconv_target(j, kx, ocols) else {
                                continue;
                            };
                            acc += src[i * cols + j] * g[oy * ocols + ox];
                        }
                    }
                    grad_w[((co * layer.c_in + ci) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}
