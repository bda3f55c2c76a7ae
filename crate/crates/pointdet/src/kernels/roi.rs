//! Region feature pooling on a fixed 3x3 grid: plain RoIAlign and its
//! deformable variant whose sample points shift by predicted offsets scaled
//! with the proposal size.
//!
//! Boxes and sample points are in feature-map units here; callers convert
//! from image coordinates before pooling.

use ndarray::{Array2, ArrayView3};

use crate::error::{Error, Result};
use crate::geometry::BBox;

use super::deform::sample_with_pos_grad;

/// Centers of the 3x3 cells tiling a box, row-major.
pub fn roi_grid_3x3(b: &BBox) -> [[f64; 2]; 9] {
    let cw = b.width() / 3.0;
    let ch = b.height() / 3.0;
    let mut grid = [[0.0; 2]; 9];
    for (g, cell) in grid.iter_mut().enumerate() {
        let (i, j) = (g / 3, g % 3);
        *cell = [b.x0 + (j as f64 + 0.5) * cw, b.y0 + (i as f64 + 0.5) * ch];
    }
    grid
}

fn check_proposal(b: &BBox) -> Result<()> {
    if !(b.width() > 0.0 && b.height() > 0.0) {
        return Err(Error::Shape(format!("degenerate proposal {b:?}")));
    }
    Ok(())
}

/// RoIAlign with a 3x3 output and one bilinear sample per cell (its center).
/// Returns `[C, 9]` pooled features.
pub fn roi_align_3x3(f: &ArrayView3<f64>, b: &BBox) -> Result<Array2<f64>> {
    check_proposal(b)?;
    let c = f.dim().0;
    let grid = roi_grid_3x3(b);
    let mut out = Array2::<f64>::zeros((c, 9));
    for (g, p) in grid.iter().enumerate() {
        for ch in 0..c {
            out[(ch, g)] = sample_with_pos_grad(f, ch, p[0], p[1]).0;
        }
    }
    Ok(out)
}

/// Deformable RoI pooling: each 3x3 cell's sample point is the cell center
/// displaced by `gamma * (offset_x * box_w, offset_y * box_h)`, where the 18
/// normalized offsets are interleaved `(dx, dy)` per cell, row-major.
///
/// Returns the `[C, 9]` pooled features and the absolute sample points.
pub fn deform_roi_pool_3x3(
    f: &ArrayView3<f64>,
    b: &BBox,
    offsets: &[f64; 18],
    gamma: f64,
) -> Result<(Array2<f64>, [[f64; 2]; 9])> {
    check_proposal(b)?;
    let c = f.dim().0;
    let (w, h) = (b.width(), b.height());
    let grid = roi_grid_3x3(b);
    let mut points = [[0.0; 2]; 9];
    let mut out = Array2::<f64>::zeros((c, 9));
    for g in 0..9 {
        let px = grid[g][0] + gamma * offsets[2 * g] * w;
        let py = grid[g][1] + gamma * offsets[2 * g + 1] * h;
        points[g] = [px, py];
        for ch in 0..c {
            out[(ch, g)] = sample_with_pos_grad(f, ch, px, py).0;
        }
    }
    Ok((out, points))
}

/// Gradient of [`deform_roi_pool_3x3`] w.r.t. the normalized offsets; the
/// feature map and proposal are treated as constants (the study trains only
/// the offset/regression layers, not the frozen feature extractor).
pub fn deform_roi_pool_3x3_backward(
    g_pooled: &Array2<f64>,
    f: &ArrayView3<f64>,
    b: &BBox,
    offsets: &[f64; 18],
    gamma: f64,
) -> [f64; 18] {
    let c = f.dim().0;
    let (w, h) = (b.width(), b.height());
    let grid = roi_grid_3x3(b);
    let mut g_off = [0.0; 18];
    for g in 0..9 {
        let px = grid[g][0] + gamma * offsets[2 * g] * w;
        let py = grid[g][1] + gamma * offsets[2 * g + 1] * h;
        let mut gpx = 0.0;
        let mut gpy = 0.0;
        for ch in 0..c {
            let (_, dpx, dpy) = sample_with_pos_grad(f, ch, px, py);
            gpx += g_pooled[(ch, g)] * dpx;
            gpy += g_pooled[(ch, g)] * dpy;
        }
        g_off[2 * g] = gpx * gamma * w;
        g_off[2 * g + 1] = gpy * gamma * h;
    }
    g_off
}
