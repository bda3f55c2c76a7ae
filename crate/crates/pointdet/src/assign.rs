//! Training target assignment over the feature pyramid.
//!
//! Stage 1 assigns each ground-truth object to the single feature bin its
//! center falls into, on the pyramid level matching the object's scale.
//! Stage 2 and classification labels are driven by the IoU between the
//! stage-1 pseudo boxes and the ground truth.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const MIN_LEVEL: usize = 3;
pub const MAX_LEVEL: usize = 7;
pub const NUM_LEVELS: usize = MAX_LEVEL - MIN_LEVEL + 1;

/// IoU above which a location becomes a stage-2 localization positive
/// (strict inequality).
pub const STAGE2_IOU: f64 = 0.5;
/// IoU at or above which a location gets a foreground classification label.
pub const CLS_POS_IOU: f64 = 0.5;
/// IoU below which a location is labeled background; the band between this
/// and [`CLS_POS_IOU`] is ignored.
pub const CLS_BG_IOU: f64 = 0.4;

/// One annotated object. `class` is a 0-based index.
#[derive(Debug, Clone, PartialEq)]
pub struct GtObject {
    pub bbox: BBox,
    pub class: usize,
}

/// Shapes of the five pyramid levels for one input size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidLayout {
    /// `(h, w)` per level, index 0 == level 3.
    pub shapes: Vec<(usize, usize)>,
}

impl PyramidLayout {
    /// Layout produced by repeated stride-2 convolutions (`ceil(n/2)` each)
    /// from an `h x w` input.
    pub fn for_image(h: usize, w: usize) -> Self {
        let halve = |n: usize| n.div_ceil(2);
        let mut shapes = Vec::with_capacity(NUM_LEVELS);
        let (mut ch, mut cw) = (h, w);
        for level in 1..=MAX_LEVEL {
            ch = halve(ch);
            cw = halve(cw);
            if level >= MIN_LEVEL {
                shapes.push((ch, cw));
            }
        }
        Self { shapes }
    }

    pub fn stride(level_idx: usize) -> f64 {
        (1usize << (MIN_LEVEL + level_idx)) as f64
    }

    /// Image-plane coordinate of a feature node: bin `i` covers
    /// `[i*stride, (i+1)*stride)` and is represented by its center.
    pub fn center(level_idx: usize, iy: usize, ix: usize) -> (f64, f64) {
        let s = Self::stride(level_idx);
        ((ix as f64 + 0.5) * s, (iy as f64 + 0.5) * s)
    }

    pub fn len(&self, level_idx: usize) -> usize {
        let (h, w) = self.shapes[level_idx];
        h * w
    }

    pub fn total_locations(&self) -> usize {
        (0..self.shapes.len()).map(|i| self.len(i)).sum()
    }
}

/// A positive training location tied to one ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PosSample {
    /// 0-based index into the layout (level 3 == 0).
    pub level_idx: usize,
    pub iy: usize,
    pub ix: usize,
    pub gt: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsLabel {
    Background,
    Ignore,
    /// Foreground, pointing at the ground truth whose class is the target.
    Object { gt: usize },
}

/// Full assignment for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub stage1: Vec<PosSample>,
    pub stage2: Vec<PosSample>,
    /// Per level, row-major over the feature map.
    pub cls: Vec<Vec<ClsLabel>>,
}

/// Pyramid level index (0-based) an object of this size trains on:
/// `floor(log2(sqrt(w*h) / 4))`, clamped to the available levels.
pub fn pyramid_level(b: &BBox) -> Result<usize> {
    let area = b.area();
    if !(area > 0.0) {
        return Err(Error::Dataset(format!("zero-area box {b:?}")));
    }
    let raw = (area.sqrt() / 4.0).log2().floor();
    let level = if raw.is_finite() { raw as i64 } else { MIN_LEVEL as i64 };
    let level = level.clamp(MIN_LEVEL as i64, MAX_LEVEL as i64) as usize;
    Ok(level - MIN_LEVEL)
}

/// Stage-1 positives: one location per ground truth (its center's bin on its
/// scale level), except that colliding ground truths are resolved to the
/// smallest-area one and the losers get no stage-1 positive at all.
pub fn assign_stage1(
    gts: &[GtObject],
    layout: &PyramidLayout,
    img_w: usize,
    img_h: usize,
) -> Result<Vec<PosSample>> {
    let mut claims: BTreeMap<(usize, usize, usize), Vec<usize>> = BTreeMap::new();
    for (gi, gt) in gts.iter().enumerate() {
        let (cx, cy) = gt.bbox.center();
        if cx < 0.0 || cy < 0.0 || cx >= img_w as f64 || cy >= img_h as f64 {
            return Err(Error::Dataset(format!(
                "ground truth {gi} center ({cx}, {cy}) outside {img_w}x{img_h} image"
            )));
        }
        let level_idx = pyramid_level(&gt.bbox)?;
        let stride = PyramidLayout::stride(level_idx);
        let (h, w) = layout.shapes[level_idx];
        let ix = ((cx / stride).floor() as usize).min(w - 1);
        let iy = ((cy / stride).floor() as usize).min(h - 1);
        claims.entry((level_idx, iy, ix)).or_default().push(gi);
    }
    let mut out = Vec::with_capacity(claims.len());
    for ((level_idx, iy, ix), claimants) in claims {
        let winner = claimants
            .into_iter()
            .min_by(|&a, &b| {
                gts[a]
                    .bbox
                    .area()
                    .total_cmp(&gts[b].bbox.area())
                    .then(a.cmp(&b))
            })
            .expect("claim lists are non-empty");
        out.push(PosSample { level_idx, iy, ix, gt: winner });
    }
    Ok(out)
}

fn best_gt(b: &BBox, gts: &[GtObject]) -> (f64, usize) {
    let mut best = (0.0, 0);
    for (gi, gt) in gts.iter().enumerate() {
        let v = iou(b, &gt.bbox);
        if v > best.0 {
            best = (v, gi);
        }
    }
    best
}

/// Stage-2 localization positives, judged on the stage-1 pseudo boxes:
/// a location trains against its argmax-IoU ground truth iff that IoU
/// exceeds 0.5 (strictly).
pub fn assign_stage2(
    pseudo: &[Vec<BBox>],
    gts: &[GtObject],
    layout: &PyramidLayout,
) -> Vec<PosSample> {
    let mut out = Vec::new();
    for (level_idx, boxes) in pseudo.iter().enumerate() {
        let (_, w) = layout.shapes[level_idx];
        for (loc, b) in boxes.iter().enumerate() {
            let (m, gi) = best_gt(b, gts);
            if m > STAGE2_IOU {
                out.push(PosSample { level_idx, iy: loc / w, ix: loc % w, gt: gi });
            }
        }
    }
    out
}

/// Classification labels from the stage-1 pseudo boxes: max IoU `m >= 0.5`
/// is foreground, `m < 0.4` background, the band in between is ignored.
pub fn assign_classification(pseudo: &[Vec<BBox>], gts: &[GtObject]) -> Vec<Vec<ClsLabel>> {
    pseudo
        .iter()
        .map(|boxes| {
            boxes
                .iter()
                .map(|b| {
                    let (m, gi) = best_gt(b, gts);
                    if m >= CLS_POS_IOU {
                        ClsLabel::Object { gt: gi }
                    } else if m < CLS_BG_IOU {
                        ClsLabel::Background
                    } else {
                        ClsLabel::Ignore
                    }
                })
                .collect()
        })
        .collect()
}

/// Run all three assignments for one image.
pub fn assign_all(
    gts: &[GtObject],
    layout: &PyramidLayout,
    img_w: usize,
    img_h: usize,
    stage1_pseudo: &[Vec<BBox>],
) -> Result<Assignment> {
    Ok(Assignment {
        stage1: assign_stage1(gts, layout, img_w, img_h)?,
        stage2: assign_stage2(stage1_pseudo, gts, layout),
        cls: assign_classification(stage1_pseudo, gts),
    })
}
