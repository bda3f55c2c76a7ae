//! Boxes, point sets, and the differentiable conversions between them.
//!
//! Everything here is plain `f64` math with hand-written vector-Jacobian
//! products; the autodiff tape wraps these functions rather than re-deriving
//! them. Boxes are axis-aligned `(x0, y0, x1, y1)` corner pairs in image
//! coordinates (x right, y down).

/// Axis-aligned box, corner form. `x1 >= x0` and `y1 >= y0` for a valid box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Gradient with respect to a box, ordered `(x0, y0, x1, y1)`.
pub type BoxGrad = [f64; 4];

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn xywh(&self) -> [f64; 4] {
        [self.x0, self.y0, self.width(), self.height()]
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn is_valid(&self) -> bool {
        self.x0.is_finite()
            && self.y0.is_finite()
            && self.x1.is_finite()
            && self.y1.is_finite()
            && self.x1 >= self.x0
            && self.y1 >= self.y0
    }

    /// Inclusive point-in-box test (edges count as inside).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    /// Box grown by `frac` of its own width/height, same center.
    /// `dilate(0.1)` makes each side 10% longer.
    pub fn dilate(&self, frac: f64) -> BBox {
        let (cx, cy) = self.center();
        BBox::from_center(cx, cy, self.width() * (1.0 + frac), self.height() * (1.0 + frac))
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x0.clamp(0.0, width),
            self.y0.clamp(0.0, height),
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }
}

/// Intersection-over-union of two boxes. Degenerate unions give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Ordered set of 2-D sample points representing one object.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub pts: Vec<[f64; 2]>,
}

impl PointSet {
    pub fn new(pts: Vec<[f64; 2]>) -> Self {
        Self { pts }
    }

    /// Interleaved `[x0, y0, x1, y1, ...]` layout, matching the offset-map
    /// channel order used by the network heads.
    pub fn from_flat(flat: &[f64]) -> Self {
        assert!(flat.len() % 2 == 0, "flat point buffer must have even length");
        Self::new(flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.pts.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> PointSet {
        PointSet::new(self.pts.iter().map(|p| [p[0] + dx, p[1] + dy]).collect())
    }

    pub fn inside(&self, b: &BBox) -> bool {
        self.pts.iter().all(|p| b.contains(p[0], p[1]))
    }

    /// Mean of the points.
    pub fn centroid(&self) -> (f64, f64) {
        let n = self.pts.len() as f64;
        let sx: f64 = self.pts.iter().map(|p| p[0]).sum();
        let sy: f64 = self.pts.iter().map(|p| p[1]).sum();
        (sx / n, sy / n)
    }
}

/// A rule for collapsing a point set into a pseudo box.
///
/// `Moment` carries the current values of the globally shared log-space scale
/// parameters; the half extents are `exp(log_scale) * sigma` around the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoxConverter {
    /// Tight bounds over all points.
    MinMax,
    /// Tight bounds over the first `count` points only.
    PartialMinMax { count: usize },
    /// Mean +/- exp(log_scale) * population std deviation, per axis.
    Moment { log_scale_x: f64, log_scale_y: f64 },
}

impl BoxConverter {
    pub fn convert(&self, ps: &PointSet) -> BBox {
        match *self {
            BoxConverter::MinMax => minmax_box(&ps.pts),
            BoxConverter::PartialMinMax { count } => {
                assert!(count >= 1 && count <= ps.len(), "partial count out of range");
                minmax_box(&ps.pts[..count])
            }
            BoxConverter::Moment { log_scale_x, log_scale_y } => {
                moment_box(&ps.pts, log_scale_x, log_scale_y)
            }
        }
    }

    /// Pull a gradient w.r.t. the box corners back to the points (and, for the
    /// moment converter, to the two log-scale parameters).
    pub fn vjp(&self, ps: &PointSet, gbox: BoxGrad) -> (Vec<[f64; 2]>, [f64; 2]) {
        match *self {
            BoxConverter::MinMax => (minmax_box_vjp(&ps.pts, gbox), [0.0, 0.0]),
            BoxConverter::PartialMinMax { count } => {
                let mut g = minmax_box_vjp(&ps.pts[..count], gbox);
                g.resize(ps.len(), [0.0, 0.0]);
                (g, [0.0, 0.0])
            }
            BoxConverter::Moment { log_scale_x, log_scale_y } => {
                moment_box_vjp(&ps.pts, log_scale_x, log_scale_y, gbox)
            }
        }
    }
}

fn minmax_box(pts: &[[f64; 2]]) -> BBox {
    assert!(!pts.is_empty());
    let mut b = BBox::new(pts[0][0], pts[0][1], pts[0][0], pts[0][1]);
    for p in &pts[1..] {
        b.x0 = b.x0.min(p[0]);
        b.y0 = b.y0.min(p[1]);
        b.x1 = b.x1.max(p[0]);
        b.y1 = b.y1.max(p[1]);
    }
    b
}

// Subgradient convention for ties: the first point attaining the extremum
// receives the whole gradient.
fn minmax_box_vjp(pts: &[[f64; 2]], gbox: BoxGrad) -> Vec<[f64; 2]> {
    let argmin = |axis: usize| {
        let mut best = 0;
        for (i, p) in pts.iter().enumerate() {
            if p[axis] < pts[best][axis] {
                best = i;
            }
        }
        best
    };
    let argmax = |axis: usize| {
        let mut best = 0;
        for (i, p) in pts.iter().enumerate() {
            if p[axis] > pts[best][axis] {
                best = i;
            }
        }
        best
    };
    let mut g = vec![[0.0, 0.0]; pts.len()];
    g[argmin(0)][0] += gbox[0];
    g[argmin(1)][1] += gbox[1];
    g[argmax(0)][0] += gbox[2];
    g[argmax(1)][1] += gbox[3];
    g
}

struct Moments {
    mean: f64,
    sigma: f64,
}

fn axis_moments(pts: &[[f64; 2]], axis: usize) -> Moments {
    let n = pts.len() as f64;
    let mean = pts.iter().map(|p| p[axis]).sum::<f64>() / n;
    let var = pts.iter().map(|p| (p[axis] - mean).powi(2)).sum::<f64>() / n;
    Moments { mean, sigma: var.sqrt() }
}

fn moment_box(pts: &[[f64; 2]], log_scale_x: f64, log_scale_y: f64) -> BBox {
    assert!(!pts.is_empty());
    let mx = axis_moments(pts, 0);
    let my = axis_moments(pts, 1);
    let hx = log_scale_x.exp() * mx.sigma;
    let hy = log_scale_y.exp() * my.sigma;
    BBox::new(mx.mean - hx, my.mean - hy, mx.mean + hx, my.mean + hy)
}

// d sigma / d p_k = (p_k - mean) / (n * sigma); taken as 0 when the points are
// collapsed (sigma == 0), which is the usual subgradient choice for sqrt at 0.
fn moment_box_vjp(
    pts: &[[f64; 2]],
    log_scale_x: f64,
    log_scale_y: f64,
    gbox: BoxGrad,
) -> (Vec<[f64; 2]>, [f64; 2]) {
    let n = pts.len() as f64;
    let mut g = vec![[0.0, 0.0]; pts.len()];
    let mut g_log = [0.0, 0.0];
    for (axis, (g_lo, g_hi, log_scale)) in
        [(gbox[0], gbox[2], log_scale_x), (gbox[1], gbox[3], log_scale_y)]
            .into_iter()
            .enumerate()
    {
        let m = axis_moments(pts, axis);
        let e = log_scale.exp();
        // box = mean -/+ e * sigma
        let g_mean = g_lo + g_hi;
        let g_sigma = (g_hi - g_lo) * e;
        g_log[axis] = (g_hi - g_lo) * e * m.sigma;
        for (k, p) in pts.iter().enumerate() {
            let ds = if m.sigma > 0.0 { (p[axis] - m.mean) / (n * m.sigma) } else { 0.0 };
            g[k][axis] += g_mean / n + g_sigma * ds;
        }
    }
    (g, g_log)
}

/// Decode a point set from per-point offsets around a center:
/// `p_k = center + stride * offset_k`.
pub fn offsets_to_points(cx: f64, cy: f64, stride: f64, offsets: &[[f64; 2]]) -> PointSet {
    PointSet::new(offsets.iter().map(|o| [cx + stride * o[0], cy + stride * o[1]]).collect())
}

/// Second-stage decode: move each point by a further scaled offset,
/// `p_k' = p_k + stride * offset_k`.
pub fn refine_points(base: &PointSet, offsets: &[[f64; 2]], stride: f64) -> PointSet {
    assert_eq!(base.len(), offsets.len());
    PointSet::new(
        base.pts
            .iter()
            .zip(offsets)
            .map(|(p, o)| [p[0] + stride * o[0], p[1] + stride * o[1]])
            .collect(),
    )
}

/// Standard box regression decode. `d = (dx, dy, dw, dh)` moves the center by
/// fractions of the source size and rescales it exponentially:
/// `cx' = cx + w * dx`, `w' = w * exp(dw)` (same for y/h).
pub fn apply_box_delta(b: &BBox, d: [f64; 4]) -> BBox {
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    BBox::from_center(cx + w * d[0], cy + h * d[1], w * d[2].exp(), h * d[3].exp())
}

/// Encode the delta that carries `from` onto `to`; inverse of
/// [`apply_box_delta`].
pub fn box_delta_between(from: &BBox, to: &BBox) -> [f64; 4] {
    let (fcx, fcy) = from.center();
    let (tcx, tcy) = to.center();
    let (fw, fh) = (from.width(), from.height());
    [
        (tcx - fcx) / fw,
        (tcy - fcy) / fh,
        (to.width() / fw).ln(),
        (to.height() / fh).ln(),
    ]
}

/// Gradient of [`apply_box_delta`] w.r.t. the delta, with the source box held
/// constant (the source is always a fixed anchor or a detached proposal).
pub fn apply_box_delta_vjp(b: &BBox, d: [f64; 4], gbox: BoxGrad) -> [f64; 4] {
    let (w, h) = (b.width(), b.height());
    let ew = d[2].exp();
    let eh = d[3].exp();
    // out = from_center(cx + w dx, cy + h dy, w e^dw, h e^dh)
    // x0 = cx + w dx - 0.5 w e^dw, x1 = cx + w dx + 0.5 w e^dw
    let g_cx = gbox[0] + gbox[2];
    let g_cy = gbox[1] + gbox[3];
    let g_w = (gbox[2] - gbox[0]) * 0.5;
    let g_h = (gbox[3] - gbox[1]) * 0.5;
    [g_cx * w, g_cy * h, g_w * w * ew, g_h * h * eh]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::fd;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_known_value() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert_relative_eq!(iou(&a, &b), 1.0 / 7.0, max_relative = 1e-12);
        assert_eq!(iou(&a, &a), 1.0);
        let far = BBox::new(10.0, 10.0, 11.0, 11.0);
        assert_eq!(iou(&a, &far), 0.0);
    }

    #[test]
    fn minmax_bounds_points() {
        let ps = PointSet::new(vec![[1.0, 5.0], [3.0, 2.0], [-1.0, 4.0]]);
        let b = BoxConverter::MinMax.convert(&ps);
        assert_eq!(b, BBox::new(-1.0, 2.0, 3.0, 5.0));
        assert!(ps.inside(&b));
    }

    #[test]
    fn partial_uses_prefix_only() {
        let ps = PointSet::new(vec![[0.0, 0.0], [1.0, 1.0], [100.0, 100.0]]);
        let b = BoxConverter::PartialMinMax { count: 2 }.convert(&ps);
        assert_eq!(b, BBox::new(0.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn moment_box_matches_hand_value() {
        // x: [0, 2] -> mean 1, sigma 1; y: [0, 0] -> sigma 0.
        let ps = PointSet::new(vec![[0.0, 0.0], [2.0, 0.0]]);
        let b = BoxConverter::Moment { log_scale_x: 0.0, log_scale_y: 0.0 }.convert(&ps);
        assert_relative_eq!(b.x0, 0.0, epsilon = 1e-12);
        assert_relative_eq!(b.x1, 2.0, epsilon = 1e-12);
        assert_eq!(b.y0, 0.0);
        assert_eq!(b.y1, 0.0);
        // Doubling exp(log_scale) doubles the half extent.
        let b2 = BoxConverter::Moment { log_scale_x: 2f64.ln(), log_scale_y: 0.0 }.convert(&ps);
        assert_relative_eq!(b2.x0, -1.0, epsilon = 1e-12);
        assert_relative_eq!(b2.x1, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn box_delta_round_trip() {
        let a = BBox::new(3.0, 4.0, 10.0, 20.0);
        let b = BBox::new(5.0, 2.0, 13.0, 21.0);
        let d = box_delta_between(&a, &b);
        let r = apply_box_delta(&a, d);
        for (x, y) in r.corners().iter().zip(b.corners()) {
            assert_relative_eq!(*x, y, epsilon = 1e-9);
        }
    }

    /// Random scalar projection of a converter output, for gradient checks.
    fn converter_scalar(conv: &BoxConverter, flat: &[f64], w: BoxGrad) -> f64 {
        let ps = PointSet::from_flat(flat);
        let b = conv.convert(&ps);
        b.corners().iter().zip(w).map(|(c, wi)| c * wi).sum()
    }

    fn check_converter_grad(conv: BoxConverter, rng: &mut ChaCha8Rng) {
        // Sample points with distinct coordinates so min/max argmaxes are
        // stable across the finite-difference step.
        let n = 9;
        let flat: Vec<f64> = loop {
            let cand: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let spaced = |axis: usize| {
                let mut v: Vec<f64> = cand.iter().skip(axis).step_by(2).copied().collect();
                v.sort_by(f64::total_cmp);
                v.windows(2).all(|w| w[1] - w[0] > 1e-2)
            };
            if spaced(0) && spaced(1) {
                break cand;
            }
        };
        let w: BoxGrad = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let ps = PointSet::from_flat(&flat);
        let (gpts, _) = conv.vjp(&ps, w);
        let analytic: Vec<f64> = gpts.iter().flat_map(|p| p.iter().copied()).collect();
        let report = fd::check_gradient(
            |x| converter_scalar(&conv, x, w),
            &flat,
            &analytic,
            1e-4,
            fd::KinkPolicy::Forbid,
        );
        assert!(
            report.max_rel_err < 1e-4,
            "converter {:?}: max rel err {}",
            conv,
            report.max_rel_err
        );
    }

    #[test]
    fn converter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..5 {
            check_converter_grad(BoxConverter::MinMax, &mut rng);
            check_converter_grad(BoxConverter::PartialMinMax { count: 4 }, &mut rng);
            check_converter_grad(
                BoxConverter::Moment {
                    log_scale_x: 0.1 * i as f64 - 0.2,
                    log_scale_y: 0.3 - 0.1 * i as f64,
                },
                &mut rng,
            );
        }
    }

    #[test]
    fn moment_log_scale_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let flat: Vec<f64> = (0..18).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let ps = PointSet::from_flat(&flat);
        let w: BoxGrad = [0.3, -0.7, 1.1, 0.4];
        let conv = BoxConverter::Moment { log_scale_x: 0.2, log_scale_y: -0.1 };
        let (_, g_log) = conv.vjp(&ps, w);
        let report = fd::check_gradient(
            |ls| {
                let c = BoxConverter::Moment { log_scale_x: ls[0], log_scale_y: ls[1] };
                converter_scalar(&c, &flat, w)
            },
            &[0.2, -0.1],
            &g_log,
            1e-5,
            fd::KinkPolicy::Forbid,
        );
        assert!(report.max_rel_err < 1e-6, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn box_delta_gradient() {
        let b = BBox::new(2.0, 3.0, 9.0, 8.0);
        let d = [0.2, -0.3, 0.1, 0.4];
        let w: BoxGrad = [0.5, -1.0, 0.7, 0.2];
        let analytic = apply_box_delta_vjp(&b, d, w);
        let report = fd::check_gradient(
            |dd| {
                let out = apply_box_delta(&b, [dd[0], dd[1], dd[2], dd[3]]);
                out.corners().iter().zip(w).map(|(c, wi)| c * wi).sum()
            },
            &d,
            &analytic,
            1e-5,
            fd::KinkPolicy::Forbid,
        );
        assert!(report.max_rel_err < 1e-6, "max rel err {}", report.max_rel_err);
    }

    proptest! {
        #[test]
        fn minmax_contains_all_points(pts in proptest::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 1..12)) {
            let ps = PointSet::new(pts.iter().map(|&(x, y)| [x, y]).collect());
            let b = BoxConverter::MinMax.convert(&ps);
            prop_assert!(ps.inside(&b));
            // Minimality: shrinking any side excludes a point.
            let eps = 1e-9;
            let shrunk = BBox::new(b.x0 + eps, b.y0 + eps, b.x1 - eps, b.y1 - eps);
            if shrunk.is_valid() {
                prop_assert!(!ps.inside(&shrunk));
            }
        }

        #[test]
        fn partial_box_inside_full_box(pts in proptest::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 4..12)) {
            let ps = PointSet::new(pts.iter().map(|&(x, y)| [x, y]).collect());
            let full = BoxConverter::MinMax.convert(&ps);
            let part = BoxConverter::PartialMinMax { count: 4 }.convert(&ps);
            prop_assert!(part.x0 >= full.x0 - 1e-12);
            prop_assert!(part.y0 >= full.y0 - 1e-12);
            prop_assert!(part.x1 <= full.x1 + 1e-12);
            prop_assert!(part.y1 <= full.y1 + 1e-12);
        }

        #[test]
        fn converters_are_translation_equivariant(
            pts in proptest::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 9),
            dx in -30.0..30.0f64,
            dy in -30.0..30.0f64,
        ) {
            let ps = PointSet::new(pts.iter().map(|&(x, y)| [x, y]).collect());
            let moved = ps.translate(dx, dy);
            for conv in [
                BoxConverter::MinMax,
                BoxConverter::PartialMinMax { count: 4 },
                BoxConverter::Moment { log_scale_x: 0.3, log_scale_y: -0.2 },
            ] {
                let a = conv.convert(&ps).translate(dx, dy);
                let b = conv.convert(&moved);
                for (u, v) in a.corners().iter().zip(b.corners()) {
                    prop_assert!((u - v).abs() < 1e-9, "{conv:?}: {u} vs {v}");
                }
            }
        }

        #[test]
        fn iou_is_symmetric_and_bounded(
            a in (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64),
            b in (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64),
        ) {
            let ba = BBox::from_xywh(a.0, a.1, a.2, a.3);
            let bb = BBox::from_xywh(b.0, b.1, b.2, b.3);
            let ab = iou(&ba, &bb);
            prop_assert_eq!(ab, iou(&bb, &ba));
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
