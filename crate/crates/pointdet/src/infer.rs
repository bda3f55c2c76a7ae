//! Inference: dense head outputs to scored, NMS-filtered detections.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::eval::{nms, Detection};
use crate::model::Model;
use crate::tape::Graph;

#[derive(Debug, Clone)]
pub struct InferConfig {
    /// Keep locations whose class score exceeds this.
    pub score_thresh: f64,
    /// Candidates kept per pyramid level before NMS, across classes.
    pub topk_per_level: usize,
    pub nms_iou: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { score_thresh: 0.05, topk_per_level: 100, nms_iou: 0.5 }
    }
}

/// Detect objects in one image. Per level: sigmoid scores, threshold, top-k;
/// stage-2 points become boxes through the model's converter; levels merge
/// and per-class NMS prunes the rest. Output detections carry the exact
/// converter output as their box.
pub fn infer(
    model: &Model,
    image: &Array3<f64>,
    image_id: u64,
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    for (_, def) in model.store.iter() {
        if !def.value.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged(format!(
                "parameter {} contains non-finite values; refusing to run inference",
                def.name
            )));
        }
    }
    let mut g = Graph::inference();
    let levels = model.forward(&mut g, image)?;
    let decoded = model.decode(&g, &levels);
    let converter = model.box_converter();

    let mut candidates = Vec::new();
    for dec in &decoded {
        // (score, loc, class), thresholded.
        let mut level_cands = Vec::new();
        for (loc, probs) in dec.scores.iter().enumerate() {
            for (class, &score) in probs.iter().enumerate() {
                if score > cfg.score_thresh {
                    level_cands.push((loc, class, score));
                }
            }
        }
        level_cands.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .expect("finite scores")
                .then((a.0, a.1).cmp(&(b.0, b.1)))
        });
        level_cands.truncate(cfg.topk_per_level);
        for (loc, class, score) in level_cands {
            let points1 = dec.points1[loc].clone();
            let points = dec.points2[loc].clone();
            let bbox = converter.convert(&points);
            candidates.push(Detection { image_id, class, score, bbox, points1, points });
        }
    }
    Ok(nms(&candidates, cfg.nms_iou))
}
