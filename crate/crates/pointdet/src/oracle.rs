//! Independent reference implementations used by the test suite.
//!
//! Nothing in here is called from the library's production paths. The
//! submodules deliberately re-derive results with the dumbest code that can
//! possibly work (exhaustive scans, nested loops, numeric differentiation) so
//! the fast implementations have something honest to be compared against.

/// Central-difference gradient checking.
pub mod fd {
    /// What to do when a coordinate sits too close to a non-differentiable
    /// point (detected by disagreeing one-sided differences).
    #[derive(Debug, Clone, Copy)]
    pub enum KinkPolicy {
        /// Treat kinks as ordinary errors. Use when the caller has sampled
        /// inputs away from every kink by construction.
        Forbid,
        /// Skip coordinates whose forward/backward differences disagree by
        /// more than `tol * max(1, |fwd|, |bwd|)`. Use for functions with
        /// ReLU-style kinks at data-dependent locations.
        Skip { tol: f64 },
    }

    #[derive(Debug, Clone)]
    pub struct GradCheckReport {
        pub checked: usize,
        pub skipped: usize,
        pub max_rel_err: f64,
        pub worst_coord: usize,
        pub worst_analytic: f64,
        pub worst_numeric: f64,
    }

    impl GradCheckReport {
        pub fn skipped_fraction(&self) -> f64 {
            let total = self.checked + self.skipped;
            if total == 0 {
                0.0
            } else {
                self.skipped as f64 / total as f64
            }
        }
    }

    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Compare `analytic` against central differences of `f` at `x`.
    ///
    /// Every coordinate is perturbed by `+/- step` with all others held fixed.
    pub fn check_gradient(
        mut f: impl FnMut(&[f64]) -> f64,
        x: &[f64],
        analytic: &[f64],
        step: f64,
        policy: KinkPolicy,
    ) -> GradCheckReport {
        assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
        let f0 = match policy {
            KinkPolicy::Skip { .. } => Some(f(x)),
            KinkPolicy::Forbid => None,
        };
        let mut buf = x.to_vec();
        let mut report = GradCheckReport {
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst_coord: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in 0..x.len() {
            buf[i] = x[i] + step;
            let fp = f(&buf);
            buf[i] = x[i] - step;
            let fm = f(&buf);
            buf[i] = x[i];
            let central = (fp - fm) / (2.0 * step);
            if let (KinkPolicy::Skip { tol }, Some(f0)) = (policy, f0) {
                let fwd = (fp - f0) / step;
                let bwd = (f0 - fm) / step;
                if (fwd - bwd).abs() > tol * fwd.abs().max(bwd.abs()).max(1.0) {
                    report.skipped += 1;
                    continue;
                }
            }
            report.checked += 1;
            let err = rel_err(analytic[i], central);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_coord = i;
                report.worst_analytic = analytic[i];
                report.worst_numeric = central;
            }
        }
        report
    }
}

/// Brute-force target assignment: loops over every (location, ground-truth)
/// pair and applies the assignment rules directly, without any of the
/// grouping or early-outs the production code uses.
pub mod assign {
    use crate::assign::{ClsLabel, GtObject, PosSample, PyramidLayout, MAX_LEVEL, MIN_LEVEL};
    use crate::geometry::BBox;

    // Deliberately re-derived here rather than shared with production code.
    fn box_iou(a: &BBox, b: &BBox) -> f64 {
        let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
        let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
        let inter = ix * iy;
        let area = |r: &BBox| (r.x1 - r.x0) * (r.y1 - r.y0);
        let union = area(a) + area(b) - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn gt_level(g: &BBox) -> usize {
        let size = ((g.x1 - g.x0) * (g.y1 - g.y0)).sqrt();
        let mut level = (size / 4.0).log2().floor() as i64;
        if level < MIN_LEVEL as i64 {
            level = MIN_LEVEL as i64;
        }
        if level > MAX_LEVEL as i64 {
            level = MAX_LEVEL as i64;
        }
        level as usize - MIN_LEVEL
    }

    /// For every location, find the ground truths whose center rule selects
    /// it; keep the smallest-area claimant (lowest index on ties).
    pub fn stage1(gts: &[GtObject], layout: &PyramidLayout) -> Vec<PosSample> {
        let mut out = Vec::new();
        for (level_idx, &(h, w)) in layout.shapes.iter().enumerate() {
            let stride = (1usize << (MIN_LEVEL + level_idx)) as f64;
            for iy in 0..h {
                for ix in 0..w {
                    let mut winner: Option<usize> = None;
                    for (gi, gt) in gts.iter().enumerate() {
                        if gt_level(&gt.bbox) != level_idx {
                            continue;
                        }
                        let cx = 0.5 * (gt.bbox.x0 + gt.bbox.x1);
                        let cy = 0.5 * (gt.bbox.y0 + gt.bbox.y1);
                        let bx = ((cx / stride).floor() as usize).min(w - 1);
                        let by = ((cy / stride).floor() as usize).min(h - 1);
                        if (by, bx) != (iy, ix) {
                            continue;
                        }
                        winner = match winner {
                            None => Some(gi),
                            Some(prev) => {
                                let pa = (gts[prev].bbox.x1 - gts[prev].bbox.x0)
                                    * (gts[prev].bbox.y1 - gts[prev].bbox.y0);
                                let ga = (gt.bbox.x1 - gt.bbox.x0) * (gt.bbox.y1 - gt.bbox.y0);
                                if ga < pa {
                                    Some(gi)
                                } else {
                                    Some(prev)
                                }
                            }
                        };
                    }
                    if let Some(gt) = winner {
                        out.push(PosSample { level_idx, iy, ix, gt });
                    }
                }
            }
        }
        out
    }

    pub fn stage2(pseudo: &[Vec<BBox>], gts: &[GtObject], layout: &PyramidLayout) -> Vec<PosSample> {
        let mut out = Vec::new();
        for (level_idx, boxes) in pseudo.iter().enumerate() {
            let (_, w) = layout.shapes[level_idx];
            for (loc, b) in boxes.iter().enumerate() {
                let mut best = 0.0;
                let mut best_gt = 0;
                for (gi, gt) in gts.iter().enumerate() {
                    let v = box_iou(b, &gt.bbox);
                    if v > best {
                        best = v;
                        best_gt = gi;
                    }
                }
                if best > 0.5 {
                    out.push(PosSample { level_idx, iy: loc / w, ix: loc % w, gt: best_gt });
                }
            }
        }
        out
    }

    pub fn classification(pseudo: &[Vec<BBox>], gts: &[GtObject]) -> Vec<Vec<ClsLabel>> {
        pseudo
            .iter()
            .map(|boxes| {
                boxes
                    .iter()
                    .map(|b| {
                        let mut best = 0.0;
                        let mut best_gt = 0;
                        for (gi, gt) in gts.iter().enumerate() {
                            let v = box_iou(b, &gt.bbox);
                            if v > best {
                                best = v;
                                best_gt = gi;
                            }
                        }
                        if best >= 0.5 {
                            ClsLabel::Object { gt: best_gt }
                        } else if best < 0.4 {
                            ClsLabel::Background
                        } else {
                            ClsLabel::Ignore
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Quadratic-time non-maximum suppression reference.
pub mod nms {
    use crate::geometry::BBox;

    fn box_iou(a: &BBox, b: &BBox) -> f64 {
        let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
        let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
        let inter = ix * iy;
        let area = |r: &BBox| (r.x1 - r.x0) * (r.y1 - r.y0);
        let union = area(a) + area(b) - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Indices kept by greedy per-class suppression, ascending. Instead of
    /// sorting, repeatedly scans for the best remaining detection (score
    /// desc, index asc) and crosses out everything it suppresses.
    pub fn keep(dets: &[(usize, f64, BBox)], iou_thresh: f64) -> Vec<usize> {
        #[derive(Clone, Copy, PartialEq)]
        enum State {
            Pending,
            Kept,
            Suppressed,
        }
        let mut state = vec![State::Pending; dets.len()];
        loop {
            let mut best: Option<usize> = None;
            for (i, s) in state.iter().enumerate() {
                if *s != State::Pending {
                    continue;
                }
                best = match best {
                    None => Some(i),
                    Some(j) if dets[i].1 > dets[j].1 => Some(i),
                    keep => keep,
                };
            }
            let Some(i) = best else { break };
            state[i] = State::Kept;
            for (j, s) in state.iter_mut().enumerate() {
                if *s == State::Pending
                    && dets[j].0 == dets[i].0
                    && box_iou(&dets[j].2, &dets[i].2) > iou_thresh
                {
                    *s = State::Suppressed;
                }
            }
        }
        state
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == State::Kept)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Average-precision reference for one class at one IoU threshold, built
/// from explicit recursion and per-recall-level exhaustive scans.
pub mod ap {
    use crate::geometry::BBox;

    fn box_iou(a: &BBox, b: &BBox) -> f64 {
        let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
        let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
        let inter = ix * iy;
        let area = |r: &BBox| (r.x1 - r.x0) * (r.y1 - r.y0);
        let union = area(a) + area(b) - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Match detections to ground truth one at a time, by recursion: the
    /// highest-priority remaining detection takes the best unused same-image
    /// ground truth with IoU >= threshold (ties to the lowest index), then
    /// the rest are matched in the smaller problem.
    fn match_labels(
        order: &[usize],
        dets: &[(u64, f64, BBox)],
        gts: &[(u64, BBox)],
        used: &mut Vec<bool>,
        iou_thresh: f64,
        labels: &mut Vec<bool>,
    ) {
        let Some((&d, rest)) = order.split_first() else { return };
        let (img, _, ref dbox) = dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gimg, gbox)) in gts.iter().enumerate() {
            if used[gi] || *gimg != img {
                continue;
            }
            let iou = box_iou(dbox, gbox);
            if iou < iou_thresh {
                continue;
            }
            best = match best {
                None => Some((gi, iou)),
                Some((_, bi)) if iou > bi => Some((gi, iou)),
                keep => keep,
            };
        }
        if let Some((gi, _)) = best {
            used[gi] = true;
            labels[d] = true;
        }
        match_labels(rest, dets, gts, used, iou_thresh, labels);
    }

    /// 101-point interpolated AP for one class at one IoU threshold.
    /// `dets` are `(image_id, score, box)`, `gts` are `(image_id, box)`.
    pub fn ap_single(dets: &[(u64, f64, BBox)], gts: &[(u64, BBox)], iou_thresh: f64) -> f64 {
        if gts.is_empty() {
            return 0.0;
        }
        // Priority order: score desc, original index asc, found by scanning.
        let mut order = Vec::with_capacity(dets.len());
        let mut taken = vec![false; dets.len()];
        for _ in 0..dets.len() {
            let mut best: Option<usize> = None;
            for i in 0..dets.len() {
                if taken[i] {
                    continue;
                }
                best = match best {
                    None => Some(i),
                    Some(j) if dets[i].1 > dets[j].1 => Some(i),
                    keep => keep,
                };
            }
            let i = best.expect("one per round");
            taken[i] = true;
            order.push(i);
        }
        let mut labels = vec![false; dets.len()];
        let mut used = vec![false; gts.len()];
        match_labels(&order, dets, gts, &mut used, iou_thresh, &mut labels);

        // PR points in priority order.
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut recalls = Vec::with_capacity(dets.len());
        let mut precisions = Vec::with_capacity(dets.len());
        for &d in &order {
            if labels[d] {
                tp += 1;
            } else {
                fp += 1;
            }
            recalls.push(tp as f64 / gts.len() as f64);
            precisions.push(tp as f64 / (tp + fp) as f64);
        }
        // For each of the 101 recall levels take the max precision at any
        // point with recall >= level, by full scan.
        let mut total = 0.0;
        for r in 0..=100 {
            let level = r as f64 / 100.0;
            let mut best = 0.0f64;
            for k in 0..recalls.len() {
                if recalls[k] >= level && precisions[k] > best {
                    best = precisions[k];
                }
            }
            total += best;
        }
        total / 101.0
    }
}
