//! Dense 2-D convolution (im2col + GEMM), group normalization, and nearest
//! upsampling, with hand-written backward passes.
//!
//! Feature maps are `[C, H, W]`, weights `[Cout, Cin, k, k]`, everything f64.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView3, ArrayView4, Axis};

pub fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Unfold `x` into a `[Cin*k*k, Ho*Wo]` matrix; out-of-bounds taps are zero.
pub fn im2col(x: &ArrayView3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut cols = Array2::<f64>::zeros((c_in * k * k, ho * wo));
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let mut out_row = cols.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * wo + ox] = x[(c, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a `[Cin*k*k, Ho*Wo]` gradient matrix back onto the input grid
/// (the adjoint of [`im2col`]).
pub fn col2im(
    gcols: &Array2<f64>,
    dims: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (c_in, h, w) = dims;
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut gx = Array3::<f64>::zeros(dims);
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let grow = gcols.row(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[(c, iy as usize, ix as usize)] += grow[oy * wo + ox];
                    }
                }
            }
        }
    }
    gx
}

pub(super) fn weight_matrix(w: &ArrayView4<f64>) -> Array2<f64> {
    let (co, ci, kh, kw) = w.dim();
    w.to_owned()
        .into_shape_with_order((co, ci * kh * kw))
        .expect("contiguous weight reshape")
}

/// Matrix products may come back in transposed layout for degenerate operand
/// shapes (single-row/column factors); reshapes need standard layout.
pub(super) fn standardize(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Convolution forward. Returns the output and the unfolded input, which the
/// backward pass reuses.
pub fn conv2d(
    x: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    b: Option<&ArrayView1<f64>>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Array2<f64>) {
    let (c_in, h, win) = x.dim();
    let (c_out, wci, kh, kw) = w.dim();
    assert_eq!(kh, kw, "square kernels only");
    assert_eq!(c_in, wci, "input channels disagree with weights");
    let k = kh;
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(win, k, stride, pad);
    let cols = im2col(x, k, stride, pad);
    let mut y2 = standardize(weight_matrix(w).dot(&cols));
    if let Some(b) = b {
        for (mut row, bv) in y2.rows_mut().into_iter().zip(b.iter()) {
            row += *bv;
        }
    }
    let y = y2.into_shape_with_order((c_out, ho, wo)).expect("conv output reshape");
    (y, cols)
}

/// Gradients of a convolution w.r.t. input, weights, and bias.
pub fn conv2d_backward(
    gy: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    cols: &Array2<f64>,
    x_dims: (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (c_out, ho, wo) = gy.dim();
    let (wco, ci, kh, kw) = w.dim();
    assert_eq!(c_out, wco);
    let gy2 = gy
        .to_owned()
        .into_shape_with_order((c_out, ho * wo))
        .expect("grad reshape");
    let gb = gy2.sum_axis(Axis(1));
    let gw = standardize(gy2.dot(&cols.t()))
        .into_shape_with_order((c_out, ci, kh, kw))
        .expect("weight grad reshape");
    let gcols = weight_matrix(w).t().dot(&gy2);
    let gx = col2im(&gcols, x_dims, kh, stride, pad);
    (gx, gw, gb)
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Per-group statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GroupNormStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Group normalization over channel groups with per-channel affine.
pub fn group_norm(
    x: &ArrayView3<f64>,
    gamma: &ArrayView1<f64>,
    beta: &ArrayView1<f64>,
    groups: usize,
) -> (Array3<f64>, GroupNormStats) {
    let (c, h, w) = x.dim();
    assert!(groups >= 1 && c % groups == 0, "channels must split evenly into groups");
    assert_eq!(gamma.len(), c);
    assert_eq!(beta.len(), c);
    let per = c / groups;
    let m = (per * h * w) as f64;
    let mut y = Array3::<f64>::zeros((c, h, w));
    let mut stats = GroupNormStats { mean: Vec::with_capacity(groups), inv_std: Vec::with_capacity(groups) };
    for g in 0..groups {
        let cs = g * per..(g + 1) * per;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for ch in cs.clone() {
            for v in x.index_axis(Axis(0), ch) {
                sum += v;
                sq += v * v;
            }
        }
        let mean = sum / m;
        let var = (sq / m - mean * mean).max(0.0);
        let inv_std = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        for ch in cs {
            let ga = gamma[ch];
            let be = beta[ch];
            let xin = x.index_axis(Axis(0), ch);
            let mut yout = y.index_axis_mut(Axis(0), ch);
            ndarray::Zip::from(&mut yout).and(&xin).for_each(|o, &v| {
                *o = ga * (v - mean) * inv_std + be;
            });
        }
        stats.mean.push(mean);
        stats.inv_std.push(inv_std);
    }
    (y, stats)
}

pub fn group_norm_backward(
    gy: &ArrayView3<f64>,
    x: &ArrayView3<f64>,
    gamma: &ArrayView1<f64>,
    stats: &GroupNormStats,
    groups: usize,
) -> (Array3<f64>, Array1<f64>, Array1<f64>) {
    let (c, h, w) = x.dim();
    let per = c / groups;
    let m = (per * h * w) as f64;
    let mut gx = Array3::<f64>::zeros((c, h, w));
    let mut ggamma = Array1::<f64>::zeros(c);
    let mut gbeta = Array1::<f64>::zeros(c);
    for g in 0..groups {
        let mean = stats.mean[g];
        let inv_std = stats.inv_std[g];
        let cs = g * per..(g + 1) * per;
        // Reductions over the group: sum(dxhat) and sum(dxhat * xhat).
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for ch in cs.clone() {
            let ga = gamma[ch];
            let gyc = gy.index_axis(Axis(0), ch);
            let xc = x.index_axis(Axis(0), ch);
            let mut gg = 0.0;
            let mut gb = 0.0;
            ndarray::Zip::from(&gyc).and(&xc).for_each(|&gyv, &xv| {
                let xh = (xv - mean) * inv_std;
                gg += gyv * xh;
                gb += gyv;
                sum_dxh += gyv * ga;
                sum_dxh_xh += gyv * ga * xh;
            });
            ggamma[ch] = gg;
            gbeta[ch] = gb;
        }
        for ch in cs {
            let ga = gamma[ch];
            let gyc = gy.index_axis(Axis(0), ch);
            let xc = x.index_axis(Axis(0), ch);
            let mut gxc = gx.index_axis_mut(Axis(0), ch);
            ndarray::Zip::from(&mut gxc).and(&gyc).and(&xc).for_each(|o, &gyv, &xv| {
                let xh = (xv - mean) * inv_std;
                let dxh = gyv * ga;
                *o = inv_std * (dxh - sum_dxh / m - xh * sum_dxh_xh / m);
            });
        }
    }
    (gx, ggamma, gbeta)
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2x(x: &ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<f64>::zeros((c, 2 * h, 2 * w));
    for ch in 0..c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                y[(ch, i, j)] = x[(ch, i / 2, j / 2)];
            }
        }
    }
    y
}

pub fn upsample2x_backward(gy: &ArrayView3<f64>) -> Array3<f64> {
    let (c, h2, w2) = gy.dim();
    let mut gx = Array3::<f64>::zeros((c, h2 / 2, w2 / 2));
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                gx[(ch, i / 2, j / 2)] += gy[(ch, i, j)];
            }
        }
    }
    gx
}
