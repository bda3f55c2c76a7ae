//! Loss functions: smooth-L1 point/box localization and focal classification.
//!
//! The scalar kernels here return both values and derivatives so the autodiff
//! tape can wrap them without re-deriving any math.

use crate::error::{Error, Result};
use crate::geometry::{BBox, BoxConverter, PointSet};

/// Shared loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub smooth_l1_beta: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub cls_weight: f64,
    pub loc_weight_stage1: f64,
    pub loc_weight_stage2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            smooth_l1_beta: 1.0 / 9.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            cls_weight: 1.0,
            loc_weight_stage1: 0.5,
            loc_weight_stage2: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config(format!(
                "smooth_l1_beta must be positive, got {}",
                self.smooth_l1_beta
            )));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::Config(format!(
                "focal_alpha must lie in (0,1), got {}",
                self.focal_alpha
            )));
        }
        if self.focal_gamma < 0.0
            || self.cls_weight < 0.0
            || self.loc_weight_stage1 < 0.0
            || self.loc_weight_stage2 < 0.0
        {
            return Err(Error::Config("negative loss weight".into()));
        }
        Ok(())
    }
}

/// Huber-style loss: quadratic inside `|x| < beta`, linear outside, C1 at the
/// junction.
pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Probability clamp used inside the focal loss to keep `ln` finite.
pub const FOCAL_EPS: f64 = 1e-6;

/// Focal loss in probability space. `positive` selects the target.
pub fn focal(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    if positive {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Focal loss straight from a logit; returns `(loss, dloss/dlogit)`.
///
/// When the sigmoid output lands in the clamped region the derivative is
/// taken as 0 (the loss is constant there by construction).
pub fn focal_from_logit(z: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let raw = 1.0 / (1.0 + (-z).exp());
    let p = raw.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    let clamped = raw != p;
    let loss = focal(p, positive, alpha, gamma);
    if clamped {
        return (loss, 0.0);
    }
    let dldp = if positive {
        // d/dp [ -a (1-p)^g ln p ]
        alpha * gamma * (1.0 - p).powf(gamma - 1.0) * p.ln() - alpha * (1.0 - p).powf(gamma) / p
    } else {
        // d/dp [ -(1-a) p^g ln(1-p) ]
        -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * (1.0 - p).ln() - p.powf(gamma) / (1.0 - p))
    };
    (loss, dldp * p * (1.0 - p))
}

/// Value and input gradients of the point-set localization loss.
#[derive(Debug, Clone)]
pub struct PointsLoss {
    pub value: f64,
    pub g_points: Vec<[f64; 2]>,
    /// Gradient w.r.t. the moment converter's `(log_scale_x, log_scale_y)`;
    /// zero for the other converters.
    pub g_log_scales: [f64; 2],
}

/// Localization loss of one point set against one ground-truth box: the point
/// set is collapsed to a pseudo box and the four corner-coordinate
/// differences, each divided by the location's stride, go through smooth-L1.
pub fn points_loss(
    points: &PointSet,
    gt: &BBox,
    converter: &BoxConverter,
    stride: f64,
    beta: f64,
) -> Result<PointsLoss> {
    if !(gt.width() > 0.0 && gt.height() > 0.0) {
        return Err(Error::Dataset(format!("degenerate ground-truth box {gt:?}")));
    }
    debug_assert!(stride > 0.0);
    let pred = converter.convert(points);
    let mut value = 0.0;
    let mut gbox = [0.0; 4];
    for (i, (p, g)) in pred.corners().iter().zip(gt.corners()).enumerate() {
        let d = (p - g) / stride;
        value += smooth_l1(d, beta);
        gbox[i] = smooth_l1_grad(d, beta) / stride;
    }
    let (g_points, g_log_scales) = converter.vjp(points, gbox);
    Ok(PointsLoss { value, g_points, g_log_scales })
}

/// Raw per-term sums and positive counts for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossSums {
    pub cls_sum: f64,
    pub cls_positives: usize,
    pub loc1_sum: f64,
    pub loc1_count: usize,
    pub loc2_sum: f64,
    pub loc2_count: usize,
}

impl LossSums {
    pub fn accumulate(&mut self, other: &LossSums) {
        self.cls_sum += other.cls_sum;
        self.cls_positives += other.cls_positives;
        self.loc1_sum += other.loc1_sum;
        self.loc1_count += other.loc1_count;
        self.loc2_sum += other.loc2_sum;
        self.loc2_count += other.loc2_count;
    }

    /// Seed weights for backpropagation: the factor each raw sum is scaled by
    /// inside [`combine`], so gradients match the combined total.
    pub fn seed_weights(&self, cfg: &LossConfig) -> [f64; 3] {
        [
            cfg.cls_weight / self.cls_positives.max(1) as f64,
            if self.loc1_count == 0 { 0.0 } else { cfg.loc_weight_stage1 / self.loc1_count as f64 },
            if self.loc2_count == 0 { 0.0 } else { cfg.loc_weight_stage2 / self.loc2_count as f64 },
        ]
    }
}

/// Weighted, normalized loss with its per-term breakdown.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub loc_stage1: f64,
    pub loc_stage2: f64,
}

/// Combine raw sums into the training objective:
/// classification is normalized by `max(1, #cls positives)`, each
/// localization term is the mean over its own positives (0 when empty).
pub fn combine(sums: &LossSums, cfg: &LossConfig) -> LossBreakdown {
    let [wc, w1, w2] = sums.seed_weights(cfg);
    let cls = wc * sums.cls_sum;
    let loc_stage1 = w1 * sums.loc1_sum;
    let loc_stage2 = w2 * sums.loc2_sum;
    LossBreakdown { total: cls + loc_stage1 + loc_stage2, cls, loc_stage1, loc_stage2 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::fd;
    use approx::assert_relative_eq;

    const BETA: f64 = 1.0 / 9.0;

    #[test]
    fn smooth_l1_known_values() {
        assert_eq!(smooth_l1(0.0, BETA), 0.0);
        // Continuity at |x| = beta: both branches give 0.5*beta.
        assert_relative_eq!(0.5 * BETA * BETA / BETA, 0.5 * BETA);
        assert_relative_eq!(smooth_l1(BETA, BETA), 0.5 * BETA, max_relative = 1e-12);
        assert_relative_eq!(smooth_l1(10.0, BETA), 10.0 - 1.0 / 18.0, max_relative = 1e-12);
        assert_eq!(smooth_l1(-3.0, BETA), smooth_l1(3.0, BETA));
    }

    #[test]
    fn smooth_l1_gradient_matches_fd() {
        for &x in &[-2.0, -0.08, 0.01, 0.05, 0.3, 4.0] {
            let r = fd::check_gradient(
                |v| smooth_l1(v[0], BETA),
                &[x],
                &[smooth_l1_grad(x, BETA)],
                1e-6,
                fd::KinkPolicy::Forbid,
            );
            assert!(r.max_rel_err < 1e-6, "x={x}: {r:?}");
        }
    }

    #[test]
    fn focal_known_values() {
        // Confident correct positive: loss ~ 0.
        assert!(focal(1.0 - 1e-9, true, 0.25, 2.0) < 1e-6);
        // gamma = 0, alpha = 0.5 reduces to half of cross-entropy.
        let p = 0.37;
        assert_relative_eq!(focal(p, true, 0.5, 0.0), -0.5 * p.ln(), max_relative = 1e-12);
        assert_relative_eq!(focal(p, false, 0.5, 0.0), -0.5 * (1.0 - p).ln(), max_relative = 1e-12);
        // Hand-evaluated: 0.25 * 0.01 * (-ln 0.9).
        assert_relative_eq!(focal(0.9, true, 0.25, 2.0), 0.25 * 0.01 * -(0.9f64.ln()), max_relative = 1e-12);
        assert_relative_eq!(focal(0.9, true, 0.25, 2.0), 2.634e-4, max_relative = 1e-3);
    }

    #[test]
    fn focal_is_monotonic_in_p_for_positives() {
        let mut last = f64::INFINITY;
        for i in 1..100 {
            let p = i as f64 / 100.0;
            let l = focal(p, true, 0.25, 2.0);
            assert!(l < last, "focal not decreasing at p={p}");
            last = l;
        }
    }

    #[test]
    fn focal_logit_gradient_matches_fd() {
        for &z in &[-6.0, -4.595, -1.0, 0.0, 0.7, 3.0, 6.0] {
            for positive in [true, false] {
                let (_, g) = focal_from_logit(z, positive, 0.25, 2.0);
                let r = fd::check_gradient(
                    |v| focal_from_logit(v[0], positive, 0.25, 2.0).0,
                    &[z],
                    &[g],
                    1e-5,
                    fd::KinkPolicy::Forbid,
                );
                assert!(r.max_rel_err < 1e-6, "z={z} pos={positive}: {r:?}");
            }
        }
    }

    #[test]
    fn points_loss_zero_at_exact_match() {
        let gt = BBox::new(10.0, 20.0, 40.0, 60.0);
        let points = PointSet::new(vec![
            [10.0, 20.0],
            [40.0, 60.0],
            [25.0, 30.0],
            [30.0, 44.0],
        ]);
        let l = points_loss(&points, &gt, &BoxConverter::MinMax, 8.0, BETA).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn points_loss_shifted_gt_hand_value() {
        let points = PointSet::new(vec![[10.0, 20.0], [40.0, 60.0], [25.0, 30.0]]);
        let stride = 8.0;
        let gt = BBox::new(10.0 + stride, 20.0, 40.0 + stride, 60.0);
        let l = points_loss(&points, &gt, &BoxConverter::MinMax, stride, BETA).unwrap();
        assert_relative_eq!(l.value, 2.0 * smooth_l1(1.0, BETA), max_relative = 1e-12);
    }

    #[test]
    fn points_loss_treats_axes_symmetrically() {
        // Same corner error on x as on y gives the same loss: no hidden
        // per-coordinate weights.
        let stride = 16.0;
        let base = PointSet::new(vec![[0.0, 0.0], [32.0, 32.0]]);
        let gt_dx = BBox::new(3.0, 0.0, 35.0, 32.0);
        let gt_dy = BBox::new(0.0, 3.0, 32.0, 35.0);
        let lx = points_loss(&base, &gt_dx, &BoxConverter::MinMax, stride, BETA).unwrap();
        let ly = points_loss(&base, &gt_dy, &BoxConverter::MinMax, stride, BETA).unwrap();
        assert_eq!(lx.value, ly.value);
    }

    #[test]
    fn points_loss_rejects_degenerate_gt() {
        let points = PointSet::new(vec![[0.0, 0.0], [1.0, 1.0]]);
        let gt = BBox::new(5.0, 5.0, 5.0, 9.0);
        assert!(points_loss(&points, &gt, &BoxConverter::MinMax, 8.0, BETA).is_err());
    }

    #[test]
    fn points_loss_gradients_match_fd() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let gt = BBox::new(4.0, 6.0, 36.0, 30.0);
        let stride = 8.0;
        for conv in [
            BoxConverter::MinMax,
            BoxConverter::PartialMinMax { count: 4 },
            BoxConverter::Moment { log_scale_x: 0.15, log_scale_y: -0.1 },
        ] {
            // Spaced coordinates keep min/max unambiguous; corner diffs away
            // from |d| == beta keep smooth-L1 off its junction.
            let flat: Vec<f64> = (0..18)
                .map(|i| 2.7 * i as f64 + rng.gen_range(0.0..1.0))
                .collect();
            let ps = PointSet::from_flat(&flat);
            let l = points_loss(&ps, &gt, &conv, stride, BETA).unwrap();
            let analytic: Vec<f64> = l.g_points.iter().flat_map(|p| [p[0], p[1]]).collect();
            let r = fd::check_gradient(
                |v| {
                    points_loss(&PointSet::from_flat(v), &gt, &conv, stride, BETA)
                        .unwrap()
                        .value
                },
                &flat,
                &analytic,
                1e-5,
                fd::KinkPolicy::Forbid,
            );
            assert!(r.max_rel_err < 1e-5, "{conv:?}: {r:?}");
        }
    }

    #[test]
    fn combine_handles_empty_positives() {
        let cfg = LossConfig::default();
        let sums = LossSums { cls_sum: 7.0, ..Default::default() };
        let b = combine(&sums, &cfg);
        // No positives anywhere: background focal sum normalized by 1.
        assert_eq!(b.cls, 7.0);
        assert_eq!(b.loc_stage1, 0.0);
        assert_eq!(b.loc_stage2, 0.0);
        assert_eq!(b.total, 7.0);
    }

    #[test]
    fn combine_is_linear_in_weights() {
        let cfg = LossConfig::default();
        let doubled = LossConfig {
            cls_weight: 2.0 * cfg.cls_weight,
            loc_weight_stage1: 2.0 * cfg.loc_weight_stage1,
            loc_weight_stage2: 2.0 * cfg.loc_weight_stage2,
            ..cfg
        };
        let sums = LossSums {
            cls_sum: 3.0,
            cls_positives: 4,
            loc1_sum: 2.0,
            loc1_count: 2,
            loc2_sum: 5.0,
            loc2_count: 3,
        };
        let a = combine(&sums, &cfg);
        let b = combine(&sums, &doubled);
        assert_relative_eq!(b.total, 2.0 * a.total, max_relative = 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { smooth_l1_beta: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { focal_alpha: 1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { cls_weight: -1.0, ..Default::default() }.validate().is_err());
    }
}
