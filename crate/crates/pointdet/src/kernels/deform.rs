//! Bilinear sampling at irregular positions and the 3x3 deformable
//! convolution whose sample positions are steered by an offset field.
//!
//! Coordinates are in feature-map units: integer `(x, y)` lands exactly on a
//! grid node, anything outside the map reads as zero. An offset field has 18
//! channels per location — `(dx, dy)` for each of the 9 kernel slots in
//! row-major order — expressed relative to the regular 3x3 grid.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3, ArrayView4, Axis};

use super::conv::{standardize, weight_matrix};

/// Relative positions of the regular 3x3 grid, interleaved `(dx, dy)` per
/// slot: slot `g = row*3 + col` sits at `(col-1, row-1)`.
pub fn grid_template() -> [f64; 18] {
    let mut t = [0.0; 18];
    for g in 0..9 {
        t[2 * g] = (g % 3) as f64 - 1.0;
        t[2 * g + 1] = (g / 3) as f64 - 1.0;
    }
    t
}

/// Subtract the regular-grid template from predicted per-point offsets,
/// turning "points relative to the location center" into a deformable-conv
/// offset field. Both sides are 18-channel maps in feature units.
pub fn offsets_to_field(offsets: &ArrayView3<f64>) -> Array3<f64> {
    assert_eq!(offsets.dim().0, 18, "offset field needs 9 points (18 channels)");
    let t = grid_template();
    let mut field = offsets.to_owned();
    for (c, tv) in t.iter().enumerate() {
        field.index_axis_mut(Axis(0), c).mapv_inplace(|v| v - tv);
    }
    field
}

/// Bilinear read of one channel at a fractional position; out-of-bounds
/// neighborhoods contribute zero.
pub fn bilinear(x: &ArrayView3<f64>, c: usize, px: f64, py: f64) -> f64 {
    sample_with_pos_grad(x, c, px, py).0
}

/// Bilinear read returning `(value, d value/d px, d value/d py)`.
pub fn sample_with_pos_grad(x: &ArrayView3<f64>, c: usize, px: f64, py: f64) -> (f64, f64, f64) {
    let (_, h, w) = x.dim();
    let x0 = px.floor();
    let y0 = py.floor();
    let wx = px - x0;
    let wy = py - y0;
    let read = |iy: f64, ix: f64| -> f64 {
        if iy < 0.0 || ix < 0.0 || iy >= h as f64 || ix >= w as f64 {
            0.0
        } else {
            x[(c, iy as usize, ix as usize)]
        }
    };
    let v00 = read(y0, x0);
    let v01 = read(y0, x0 + 1.0);
    let v10 = read(y0 + 1.0, x0);
    let v11 = read(y0 + 1.0, x0 + 1.0);
    let top = v00 * (1.0 - wx) + v01 * wx;
    let bot = v10 * (1.0 - wx) + v11 * wx;
    let value = top * (1.0 - wy) + bot * wy;
    let dpx = (v01 - v00) * (1.0 - wy) + (v11 - v10) * wy;
    let dpy = bot - top;
    (value, dpx, dpy)
}

fn slot_position(ox: usize, oy: usize, g: usize, field: &ArrayView3<f64>) -> (f64, f64) {
    let dx = field[(2 * g, oy, ox)];
    let dy = field[(2 * g + 1, oy, ox)];
    let px = ox as f64 + (g % 3) as f64 - 1.0 + dx;
    let py = oy as f64 + (g / 3) as f64 - 1.0 + dy;
    (px, py)
}

/// 3x3 deformable convolution, stride 1, same-size output. Returns the
/// output and the sampled-patch matrix (the deformable analogue of im2col)
/// for the backward pass.
pub fn deform_conv3x3(
    x: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    b: &ArrayView1<f64>,
    field: &ArrayView3<f64>,
) -> (Array3<f64>, Array2<f64>) {
    let (c_in, h, wid) = x.dim();
    let (c_out, wci, kh, kw) = w.dim();
    assert_eq!((kh, kw), (3, 3), "deformable kernel is fixed at 3x3");
    assert_eq!(wci, c_in, "input channels disagree with weights");
    assert_eq!(field.dim(), (18, h, wid), "offset field shape mismatch");
    let n = h * wid;
    let mut cols = Array2::<f64>::zeros((c_in * 9, n));
    for oy in 0..h {
        for ox in 0..wid {
            let loc = oy * wid + ox;
            for g in 0..9 {
                let (px, py) = slot_position(ox, oy, g, field);
                // Neighborhood shared across channels.
                let x0 = px.floor();
                let y0 = py.floor();
                let wx = px - x0;
                let wy = py - y0;
                let in_h = |v: f64| v >= 0.0 && v < h as f64;
                let in_w = |v: f64| v >= 0.0 && v < wid as f64;
                for c in 0..c_in {
                    let read = |iy: f64, ix: f64| -> f64 {
                        if in_h(iy) && in_w(ix) {
                            x[(c, iy as usize, ix as usize)]
                        } else {
                            0.0
                        }
                    };
                    let v00 = read(y0, x0);
                    let v01 = read(y0, x0 + 1.0);
                    let v10 = read(y0 + 1.0, x0);
                    let v11 = read(y0 + 1.0, x0 + 1.0);
                    let top = v00 * (1.0 - wx) + v01 * wx;
                    let bot = v10 * (1.0 - wx) + v11 * wx;
                    cols[(c * 9 + g, loc)] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
    }
    let mut y2 = standardize(weight_matrix(w).dot(&cols));
    for (mut row, bv) in y2.rows_mut().into_iter().zip(b.iter()) {
        row += *bv;
    }
    let y = y2.into_shape_with_order((c_out, h, wid)).expect("deform conv output reshape");
    (y, cols)
}

/// Gradients of [`deform_conv3x3`] w.r.t. input, weights, bias, and the
/// offset field.
pub fn deform_conv3x3_backward(
    gy: &ArrayView3<f64>,
    x: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    field: &ArrayView3<f64>,
    cols: &Array2<f64>,
) -> (Array3<f64>, ndarray::Array4<f64>, Array1<f64>, Array3<f64>) {
    let (c_in, h, wid) = x.dim();
    let (c_out, _, _, _) = w.dim();
    let n = h * wid;
    let gy2 = gy.to_owned().into_shape_with_order((c_out, n)).expect("grad reshape");
    let gb = gy2.sum_axis(Axis(1));
    let gw = standardize(gy2.dot(&cols.t()))
        .into_shape_with_order(w.dim())
        .expect("weight grad reshape");
    let gcols = weight_matrix(w).t().dot(&gy2);
    let mut gx = Array3::<f64>::zeros((c_in, h, wid));
    let mut gfield = Array3::<f64>::zeros((18, h, wid));
    for oy in 0..h {
        for ox in 0..wid {
            let loc = oy * wid + ox;
            for g in 0..9 {
                let (px, py) = slot_position(ox, oy, g, field);
                let x0 = px.floor();
                let y0 = py.floor();
                let wx = px - x0;
                let wy = py - y0;
                let mut gpx = 0.0;
                let mut gpy = 0.0;
                for c in 0..c_in {
                    let gv = gcols[(c * 9 + g, loc)];
                    if gv == 0.0 {
                        continue;
                    }
                    let mut vals = [0.0; 4];
                    for (idx, (dy, dx)) in
                        [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)].iter().enumerate()
                    {
                        let iy = y0 + dy;
                        let ix = x0 + dx;
                        if iy >= 0.0 && ix >= 0.0 && iy < h as f64 && ix < wid as f64 {
                            let (iy, ix) = (iy as usize, ix as usize);
                            vals[idx] = x[(c, iy, ix)];
                            let wgt = (if *dx == 0.0 { 1.0 - wx } else { wx })
                                * (if *dy == 0.0 { 1.0 - wy } else { wy });
                            gx[(c, iy, ix)] += gv * wgt;
                        }
                    }
                    let [v00, v01, v10, v11] = vals;
                    gpx += gv * ((v01 - v00) * (1.0 - wy) + (v11 - v10) * wy);
                    gpy += gv * ((v10 * (1.0 - wx) + v11 * wx) - (v00 * (1.0 - wx) + v01 * wx));
                }
                gfield[(2 * g, oy, ox)] += gpx;
                gfield[(2 * g + 1, oy, ox)] += gpy;
            }
        }
    }
    (gx, gw, gb, gfield)
}
