//! Detections, greedy NMS, and COCO-style average precision.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::CocoDoc;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, PointSet};

/// One scored detection, with the point sets that produced its box.
#[derive(Debug, Clone)]
pub struct Detection {
    pub image_id: u64,
    /// 0-based class index.
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
    /// Initial point set, before refinement.
    pub points1: PointSet,
    /// Refined point set; `bbox` is its converted form.
    pub points: PointSet,
}

/// COCO results-format row: `bbox` is `[x, y, width, height]` and
/// `category_id` is 1-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionExport {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: [f64; 4],
    pub score: f64,
}

impl DetectionExport {
    pub fn from_detection(d: &Detection) -> Self {
        Self {
            image_id: d.image_id,
            category_id: d.class as u32 + 1,
            bbox: [d.bbox.x0, d.bbox.y0, d.bbox.width(), d.bbox.height()],
            score: d.score,
        }
    }

    pub fn to_bbox(&self) -> BBox {
        let [x, y, w, h] = self.bbox;
        BBox::new(x, y, x + w, y + h)
    }
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let rows: Vec<DetectionExport> = dets.iter().map(DetectionExport::from_detection).collect();
    std::fs::write(path, serde_json::to_string_pretty(&rows)?)?;
    Ok(())
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionExport>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Dataset(format!("{}: {e}", path.display())) // serde errors carry line:column
    })
}

/// Detection order used everywhere scores compete: score descending, then
/// original index ascending.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).expect("finite scores").then(a.cmp(&b))
    });
    order
}

/// Greedy per-class non-maximum suppression: walk detections by score and
/// drop any that overlaps an already-kept detection of the same class with
/// IoU strictly above the threshold. Returns survivors in keep order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    assert!(dets.iter().all(|d| d.score.is_finite()), "scores must be finite");
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(&scores) {
        let suppressed = kept.iter().any(|&k| {
            dets[k].class == dets[i].class && iou(&dets[k].bbox, &dets[i].bbox) > iou_thresh
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Debug, Clone, Serialize)]
pub struct ClassAp {
    pub category_id: u32,
    pub name: String,
    /// Mean over the ten IoU thresholds.
    pub ap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalResult {
    /// Mean AP over classes and IoU thresholds 0.50:0.05:0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Classes that have at least one ground-truth box.
    pub per_class: Vec<ClassAp>,
}

/// 101-point interpolated AP for one class at one IoU threshold.
/// `dets` are `(image_id, score, box)`; `gts` are `(image_id, box)`.
fn ap_single(dets: &[(u64, f64, BBox)], gts: &[(u64, BBox)], iou_thresh: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let scores: Vec<f64> = dets.iter().map(|d| d.1).collect();
    let order = score_order(&scores);
    let mut gt_used = vec![false; gts.len()];
    let mut recalls = Vec::with_capacity(dets.len());
    let mut precisions = Vec::with_capacity(dets.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &di in &order {
        let (img, _, dbox) = &dets[di];
        // Highest-IoU unmatched ground truth of this image at or above the
        // threshold; IoU ties go to the earlier ground-truth row.
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gimg, gbox)) in gts.iter().enumerate() {
            if gt_used[gi] || gimg != img {
                continue;
            }
            let v = iou(dbox, gbox);
            if v >= iou_thresh && best.map_or(true, |(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_used[gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        recalls.push(tp as f64 / gts.len() as f64);
        precisions.push(tp as f64 / (tp + fp) as f64);
    }
    // Precision envelope: running maximum from the back.
    let mut envelope = precisions.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        if envelope[k + 1] > envelope[k] {
            envelope[k] = envelope[k + 1];
        }
    }
    // Sample the envelope at 101 recall levels with a single forward sweep.
    let mut total = 0.0;
    let mut k = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while k < recalls.len() && recalls[k] < level {
            k += 1;
        }
        if k < envelope.len() {
            total += envelope[k];
        }
    }
    total / 101.0
}

/// Score a detections export against ground truth. Classes without any
/// ground-truth annotation are excluded from every mean.
pub fn evaluate(dets: &[DetectionExport], doc: &CocoDoc) -> Result<EvalResult> {
    let image_ids: HashSet<u64> = doc.images.iter().map(|im| im.id).collect();
    let cat_ids: HashSet<u32> = doc.categories.iter().map(|c| c.id).collect();
    for (i, d) in dets.iter().enumerate() {
        if !image_ids.contains(&d.image_id) {
            return Err(Error::Dataset(format!(
                "detection {i}: unknown image_id {}",
                d.image_id
            )));
        }
        if !cat_ids.contains(&d.category_id) {
            return Err(Error::Dataset(format!(
                "detection {i}: unknown category_id {}",
                d.category_id
            )));
        }
        if !d.score.is_finite() || !d.bbox.iter().all(|v| v.is_finite()) {
            return Err(Error::Dataset(format!("detection {i}: non-finite score or box")));
        }
    }
    for a in &doc.annotations {
        if !cat_ids.contains(&a.category_id) {
            return Err(Error::Dataset(format!(
                "annotation {}: unknown category_id {}",
                a.id, a.category_id
            )));
        }
    }

    // Group once, in category order.
    let mut gt_by_cat: BTreeMap<u32, Vec<(u64, BBox)>> = BTreeMap::new();
    for a in &doc.annotations {
        let [x, y, w, h] = a.bbox;
        gt_by_cat
            .entry(a.category_id)
            .or_default()
            .push((a.image_id, BBox::new(x, y, x + w, y + h)));
    }
    let mut det_by_cat: BTreeMap<u32, Vec<(u64, f64, BBox)>> = BTreeMap::new();
    for d in dets {
        det_by_cat
            .entry(d.category_id)
            .or_default()
            .push((d.image_id, d.score, d.to_bbox()));
    }

    let mut per_class = Vec::new();
    let (mut ap_sum, mut ap50_sum, mut ap75_sum) = (0.0, 0.0, 0.0);
    let empty = Vec::new();
    for cat in &doc.categories {
        let Some(gts) = gt_by_cat.get(&cat.id) else { continue };
        let class_dets = det_by_cat.get(&cat.id).unwrap_or(&empty);
        let mut sum_t = 0.0;
        for (ti, &t) in IOU_THRESHOLDS.iter().enumerate() {
            let v = ap_single(class_dets, gts, t);
            sum_t += v;
            if ti == 0 {
                ap50_sum += v;
            }
            if (t - 0.75).abs() < 1e-9 {
                ap75_sum += v;
            }
        }
        let class_ap = sum_t / IOU_THRESHOLDS.len() as f64;
        ap_sum += class_ap;
        per_class.push(ClassAp { category_id: cat.id, name: cat.name.clone(), ap: class_ap });
    }
    if per_class.is_empty() {
        return Err(Error::Dataset("no ground-truth annotations to evaluate against".into()));
    }
    let n = per_class.len() as f64;
    Ok(EvalResult {
        ap: ap_sum / n,
        ap50: ap50_sum / n,
        ap75: ap75_sum / n,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CocoAnnotation, CocoCategory, CocoImage};
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn points_for(b: &BBox) -> PointSet {
        PointSet::new(vec![[b.x0, b.y0]; 9])
    }

    fn det(image_id: u64, class: usize, score: f64, bbox: BBox) -> Detection {
        Detection { image_id, class, score, points1: points_for(&bbox), points: points_for(&bbox), bbox }
    }

    fn doc_with(gts: &[(u64, u32, BBox)]) -> CocoDoc {
        let image_ids: std::collections::BTreeSet<u64> = gts.iter().map(|g| g.0).collect();
        CocoDoc {
            images: image_ids
                .into_iter()
                .map(|id| CocoImage { id, file_name: format!("{id}.png"), width: 128, height: 128 })
                .collect(),
            annotations: gts
                .iter()
                .enumerate()
                .map(|(i, (img, cat, b))| CocoAnnotation {
                    id: i as u64 + 1,
                    image_id: *img,
                    category_id: *cat,
                    bbox: [b.x0, b.y0, b.width(), b.height()],
                    area: b.width() * b.height(),
                    iscrowd: 0,
                })
                .collect(),
            categories: (1..=3)
                .map(|id| CocoCategory { id, name: format!("class{id}") })
                .collect(),
        }
    }

    fn export(image_id: u64, cat: u32, score: f64, b: BBox) -> DetectionExport {
        DetectionExport {
            image_id,
            category_id: cat,
            bbox: [b.x0, b.y0, b.width(), b.height()],
            score,
        }
    }

    #[test]
    fn nms_keeps_best_of_identical_boxes() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let dets = vec![det(1, 0, 0.8, b), det(1, 0, 0.9, b)];
        let kept = nms(&dets, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_keeps_disjoint_and_other_classes() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(20.0, 20.0, 30.0, 30.0);
        let dets = vec![det(1, 0, 0.9, a), det(1, 0, 0.8, b), det(1, 1, 0.7, a)];
        assert_eq!(nms(&dets, 0.5).len(), 3);
    }

    #[test]
    fn nms_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for round in 0..30 {
            let n = 50;
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    let x0 = rng.gen_range(0.0..100.0);
                    let y0 = rng.gen_range(0.0..100.0);
                    let b = BBox::new(
                        x0,
                        y0,
                        x0 + rng.gen_range(5.0..40.0),
                        y0 + rng.gen_range(5.0..40.0),
                    );
                    det(1, rng.gen_range(0..2), rng.gen_range(0.0..1.0), b)
                })
                .collect();
            let thresh = [0.3, 0.5, 0.7][round % 3];
            let kept = nms(&dets, thresh);
            let simple: Vec<(usize, f64, BBox)> =
                dets.iter().map(|d| (d.class, d.score, d.bbox)).collect();
            let want = oracle::nms::keep(&simple, thresh);
            let mut got: Vec<(usize, u64)> = kept
                .iter()
                .map(|d| (d.class, d.score.to_bits()))
                .map(|(c, s)| (c, s))
                .collect();
            let mut expect: Vec<(usize, u64)> =
                want.iter().map(|&i| (dets[i].class, dets[i].score.to_bits())).collect();
            got.sort_unstable();
            expect.sort_unstable();
            assert_eq!(got, expect, "round {round}");
        }
    }

    #[test]
    fn nms_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let dets: Vec<Detection> = (0..40)
            .map(|_| {
                let x0 = rng.gen_range(0.0..80.0);
                let y0 = rng.gen_range(0.0..80.0);
                let b =
                    BBox::new(x0, y0, x0 + rng.gen_range(5.0..30.0), y0 + rng.gen_range(5.0..30.0));
                det(1, rng.gen_range(0..3), rng.gen_range(0.0..1.0), b)
            })
            .collect();
        let once = nms(&dets, 0.5);
        let twice = nms(&once, 0.5);
        assert_eq!(once.len(), twice.len());
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(a.score.to_bits(), b.score.to_bits());
        }
    }

    #[test]
    fn perfect_detections_score_one() {
        let b1 = BBox::new(10.0, 10.0, 50.0, 40.0);
        let b2 = BBox::new(60.0, 60.0, 100.0, 110.0);
        let doc = doc_with(&[(1, 1, b1), (1, 2, b2), (2, 1, b2)]);
        let dets = vec![export(1, 1, 1.0, b1), export(1, 2, 1.0, b2), export(2, 1, 1.0, b2)];
        let r = evaluate(&dets, &doc).unwrap();
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.ap75, 1.0);
        // class 3 has no ground truth and must not appear
        assert_eq!(r.per_class.len(), 2);
    }

    #[test]
    fn no_detections_scores_zero() {
        let doc = doc_with(&[(1, 1, BBox::new(0.0, 0.0, 10.0, 10.0))]);
        let r = evaluate(&[], &doc).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_built_pr_curve() {
        let gt = BBox::new(10.0, 10.0, 50.0, 50.0);
        let far = BBox::new(80.0, 80.0, 120.0, 120.0);
        let doc = doc_with(&[(1, 1, gt)]);
        // True positive outscores the false positive: precision 1 at recall 1.
        let dets = vec![export(1, 1, 0.9, gt), export(1, 1, 0.8, far)];
        let r = evaluate(&dets, &doc).unwrap();
        assert_eq!(r.ap50, 1.0);
        // Swapped scores: the PR points are (recall 0, precision 0) then
        // (recall 1, precision 0.5); the 101-point envelope is 0.5 everywhere.
        let dets = vec![export(1, 1, 0.8, gt), export(1, 1, 0.9, far)];
        let r = evaluate(&dets, &doc).unwrap();
        assert!((r.ap50 - 0.5).abs() < 1e-12, "ap50 = {}", r.ap50);
    }

    #[test]
    fn matches_exhaustive_oracle_on_small_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut case = 0;
        while case < 200 {
            let n_gt = rng.gen_range(1..=3);
            let n_det = rng.gen_range(0..=4);
            let rand_box = |rng: &mut ChaCha8Rng| {
                let x0 = rng.gen_range(0.0..80.0);
                let y0 = rng.gen_range(0.0..80.0);
                BBox::new(x0, y0, x0 + rng.gen_range(8.0..48.0), y0 + rng.gen_range(8.0..48.0))
            };
            let gts: Vec<(u64, BBox)> =
                (0..n_gt).map(|_| (rng.gen_range(1..=2), rand_box(&mut rng))).collect();
            let dets: Vec<(u64, f64, BBox)> = (0..n_det)
                .map(|_| {
                    // Half the detections perturb a ground truth so IoUs land
                    // near the thresholds; the rest are random.
                    if rng.gen_bool(0.5) && !gts.is_empty() {
                        let (img, b) = gts[rng.gen_range(0..gts.len())];
                        let j = rng.gen_range(-6.0..6.0);
                        (
                            img,
                            rng.gen_range(0.0..1.0),
                            BBox::new(b.x0 + j, b.y0 - j, b.x1 + j, b.y1 + j / 2.0),
                        )
                    } else {
                        (rng.gen_range(1..=2), rng.gen_range(0.0..1.0), rand_box(&mut rng))
                    }
                })
                .collect();
            for t in [0.5, 0.75, 0.95] {
                let got = ap_single(&dets, &gts, t);
                let want = oracle::ap::ap_single(&dets, &gts, t);
                assert_eq!(got.to_bits(), want.to_bits(), "case {case} t={t}");
            }
            case += 1;
        }
    }

    #[test]
    fn trailing_false_positive_never_raises_ap() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..50 {
            let gt = BBox::new(10.0, 10.0, 60.0, 60.0);
            let doc = doc_with(&[(1, 1, gt)]);
            let mut dets = vec![export(1, 1, rng.gen_range(0.3..1.0), gt)];
            if rng.gen_bool(0.5) {
                dets.push(export(1, 1, rng.gen_range(0.3..1.0), BBox::new(0.0, 0.0, 9.0, 9.0)));
            }
            let before = evaluate(&dets, &doc).unwrap();
            let min_score = dets.iter().map(|d| d.score).fold(f64::INFINITY, f64::min);
            dets.push(export(1, 1, min_score / 2.0, BBox::new(90.0, 90.0, 120.0, 126.0)));
            let after = evaluate(&dets, &doc).unwrap();
            assert!(after.ap <= before.ap + 1e-12);
            assert!(after.ap50 <= before.ap50 + 1e-12);
        }
    }

    #[test]
    fn ap_never_exceeds_ap50() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..40 {
            let rand_box = |rng: &mut ChaCha8Rng| {
                let x0 = rng.gen_range(0.0..80.0);
                let y0 = rng.gen_range(0.0..80.0);
                BBox::new(x0, y0, x0 + rng.gen_range(8.0..48.0), y0 + rng.gen_range(8.0..48.0))
            };
            let gts: Vec<(u64, u32, BBox)> = (0..rng.gen_range(1..=4))
                .map(|_| (1, rng.gen_range(1..=2), rand_box(&mut rng)))
                .collect();
            let doc = doc_with(&gts);
            let dets: Vec<DetectionExport> = (0..rng.gen_range(0..=6))
                .map(|_| {
                    let (img, cat, b) = gts[rng.gen_range(0..gts.len())];
                    let j = rng.gen_range(-8.0..8.0);
                    export(
                        img,
                        if rng.gen_bool(0.8) { cat } else { 3 - cat },
                        rng.gen_range(0.0..1.0),
                        BBox::new(b.x0 + j, b.y0 + j / 2.0, b.x1 - j / 3.0, b.y1 + j),
                    )
                })
                .collect();
            let r = evaluate(&dets, &doc).unwrap();
            assert!(r.ap <= r.ap50 + 1e-12, "ap {} > ap50 {}", r.ap, r.ap50);
            assert!((0.0..=1.0).contains(&r.ap));
        }
    }

    #[test]
    fn inconsistent_exports_rejected() {
        let doc = doc_with(&[(1, 1, BBox::new(0.0, 0.0, 10.0, 10.0))]);
        let bad_img = vec![export(99, 1, 0.5, BBox::new(0.0, 0.0, 10.0, 10.0))];
        assert!(evaluate(&bad_img, &doc).is_err());
        let bad_cat = vec![export(1, 7, 0.5, BBox::new(0.0, 0.0, 10.0, 10.0))];
        assert!(evaluate(&bad_cat, &doc).is_err());
        let nan = vec![export(1, 1, f64::NAN, BBox::new(0.0, 0.0, 10.0, 10.0))];
        assert!(evaluate(&nan, &doc).is_err());
    }

    #[test]
    fn malformed_export_file_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.json");
        std::fs::write(&path, "[{\"image_id\": 1, \"category_id\": }]").unwrap();
        let err = load_detections(&path).unwrap_err().to_string();
        assert!(err.contains("line"), "diagnostic lacks location: {err}");
    }
}
