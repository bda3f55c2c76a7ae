//! Bounding-box baseline detector: the same backbone, pyramid, and head
//! trunks as the point-set model, but every location carries one square
//! anchor (side 4x stride) regressed twice with standard box deltas. The
//! refinement and classification branches read features on the stage-1 box's
//! 3x3 grid through a deformable conv whose offset field is an unlearnable
//! constant, so neither of them can push gradients into the stage-1
//! regressor.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Ix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assign::{self, GtObject, PosSample, PyramidLayout};
use crate::error::{Error, Result};
use crate::eval::{nms, Detection};
use crate::geometry::{self, BBox, PointSet};
use crate::infer::InferConfig;
use crate::kernels::{deform, roi};
use crate::loss::{LossConfig, LossSums};
use crate::model::{
    add_conv, add_stem, sigmoid, validate_input, Init, ModelConfig, NetCore, FOREGROUND_PRIOR,
    NUM_LEVELS,
};
use crate::tape::{Graph, NodeId, ParamStore};
use crate::train::{cls_loss_sum, ImageLoss, Trainable};

/// Anchor side as a multiple of the level stride.
pub const ANCHOR_SCALE: f64 = 4.0;
/// Regression deltas are clamped here before decoding so one wild early
/// prediction cannot push the constant offset field to non-finite values.
pub const DELTA_CLAMP: f64 = 4.0;

/// The single square 1:1 anchor owned by a pyramid location.
pub fn anchor(level_idx: usize, iy: usize, ix: usize) -> BBox {
    let s = PyramidLayout::stride(level_idx);
    let (cx, cy) = PyramidLayout::center(level_idx, iy, ix);
    BBox::from_center(cx, cy, ANCHOR_SCALE * s, ANCHOR_SCALE * s)
}

fn decode_box(from: &BBox, d: [f64; 4]) -> BBox {
    let c = DELTA_CLAMP;
    geometry::apply_box_delta(
        from,
        [d[0].clamp(-c, c), d[1].clamp(-c, c), d[2].clamp(-c, c), d[3].clamp(-c, c)],
    )
}

/// Per-level head outputs, still on the tape, plus the host-decoded stage-1
/// boxes the refinement regresses from.
pub struct BaselineLevelOutput {
    pub stride: f64,
    pub h: usize,
    pub w: usize,
    /// `[num_classes, h, w]` logits.
    pub cls: NodeId,
    /// `[4, h, w]` stage-1 deltas against the anchor.
    pub delta1: NodeId,
    /// `[4, h, w]` stage-2 deltas against the stage-1 box.
    pub delta2: NodeId,
    /// Stage-1 boxes, row-major over the level grid.
    pub boxes1: Vec<BBox>,
}

pub struct BaselineModel {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl BaselineModel {
    /// Fresh baseline with randomly initialized parameters. `converter` and
    /// `partial_count` in the config are ignored: boxes are regressed
    /// directly, nothing is converted.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        add_stem(&mut store, &mut rng, &config);

        let hc = config.head_channels;
        add_conv(&mut store, &mut rng, "head.loc.init.conv", hc, hc, 3, Init::He, Some(0.0));
        add_conv(&mut store, &mut rng, "head.loc.init.out", 4, hc, 1, Init::Head, Some(0.0));
        add_conv(&mut store, &mut rng, "head.loc.refine.deform", hc, hc, 3, Init::He, Some(0.0));
        add_conv(&mut store, &mut rng, "head.loc.refine.conv", hc, hc, 3, Init::He, Some(0.0));
        add_conv(&mut store, &mut rng, "head.loc.refine.out", 4, hc, 1, Init::Head, Some(0.0));
        add_conv(&mut store, &mut rng, "head.cls.deform", hc, hc, 3, Init::He, Some(0.0));
        let prior_bias = -((1.0 - FOREGROUND_PRIOR) / FOREGROUND_PRIOR).ln();
        add_conv(
            &mut store,
            &mut rng,
            "head.cls.out",
            config.num_classes,
            hc,
            1,
            Init::Head,
            Some(prior_bias),
        );
        Ok(Self { config, store })
    }

    pub fn forward(&self, g: &mut Graph, image: &Array3<f64>) -> Result<Vec<BaselineLevelOutput>> {
        validate_input(image)?;
        let mut core = NetCore::new(&self.store, &self.config);
        let pyramid = core.pyramid(g, image);
        let mut out = Vec::with_capacity(NUM_LEVELS);
        for (idx, level) in pyramid.into_iter().enumerate() {
            out.push(self.head(g, &mut core, level, idx));
        }
        Ok(out)
    }

    fn head(
        &self,
        g: &mut Graph,
        core: &mut NetCore,
        level: NodeId,
        level_idx: usize,
    ) -> BaselineLevelOutput {
        let (_, h, w) = g.value(level).into_dimensionality::<Ix3>().expect("[C,H,W]").dim();
        let stride = PyramidLayout::stride(level_idx);

        let (loc, cls) = core.trunks(g, level);

        let o1 = core.conv(g, loc, "head.loc.init.conv", 1, 1);
        let o1 = g.relu(o1);
        let delta1 = core.conv(g, o1, "head.loc.init.out", 1, 0);

        // Decode stage-1 boxes on the host and point the deformable convs at
        // each box's 3x3 grid. The field enters the tape as a constant, so
        // the feature path carries no gradient back into `delta1`.
        let d1 = g.value(delta1).into_dimensionality::<Ix3>().expect("[4,h,w]");
        let template = deform::grid_template();
        let mut boxes1 = Vec::with_capacity(h * w);
        let mut field = Array3::<f64>::zeros((18, h, w));
        for iy in 0..h {
            for ix in 0..w {
                let a = anchor(level_idx, iy, ix);
                let d = [d1[(0, iy, ix)], d1[(1, iy, ix)], d1[(2, iy, ix)], d1[(3, iy, ix)]];
                let b1 = decode_box(&a, d);
                let (cx, cy) = PyramidLayout::center(level_idx, iy, ix);
                for (slot, gp) in roi::roi_grid_3x3(&b1).iter().enumerate() {
                    field[(2 * slot, iy, ix)] = (gp[0] - cx) / stride - template[2 * slot];
                    field[(2 * slot + 1, iy, ix)] = (gp[1] - cy) / stride - template[2 * slot + 1];
                }
                boxes1.push(b1);
            }
        }
        let field = g.constant(field.into_dyn());

        let dw = core.p(g, "head.loc.refine.deform.w");
        let db = core.p(g, "head.loc.refine.deform.b");
        let r = g.deform_conv3x3(loc, dw, db, field);
        let r = g.relu(r);
        let r = core.conv(g, r, "head.loc.refine.conv", 1, 1);
        let r = g.relu(r);
        let delta2 = core.conv(g, r, "head.loc.refine.out", 1, 0);

        let cw = core.p(g, "head.cls.deform.w");
        let cb = core.p(g, "head.cls.deform.b");
        let cd = g.deform_conv3x3(cls, cw, cb, field);
        let cd = g.relu(cd);
        let logits = core.conv(g, cd, "head.cls.out", 1, 0);

        BaselineLevelOutput { stride, h, w, cls: logits, delta1, delta2, boxes1 }
    }
}

/// Smooth-L1 over gathered delta rows against encoded box targets, grouped
/// per level and summed.
fn delta_stage_sum(
    g: &mut Graph,
    samples: &[PosSample],
    gts: &[GtObject],
    delta_of: &dyn Fn(usize) -> NodeId,
    from_box: &dyn Fn(&PosSample) -> BBox,
    beta: f64,
) -> Option<NodeId> {
    let mut by_level: BTreeMap<usize, Vec<&PosSample>> = BTreeMap::new();
    for s in samples {
        by_level.entry(s.level_idx).or_default().push(s);
    }
    let mut total: Option<NodeId> = None;
    for (lvl, group) in by_level {
        let locs: Vec<(usize, usize)> = group.iter().map(|s| (s.iy, s.ix)).collect();
        let mut target = Array2::<f64>::zeros((group.len(), 4));
        for (row, s) in group.iter().enumerate() {
            let d = geometry::box_delta_between(&from_box(s), &gts[s.gt].bbox);
            target.row_mut(row).assign(&ndarray::aview1(&d));
        }
        let rows = g.gather_locs(delta_of(lvl), locs);
        let node = g.smooth_l1_sum(rows, target, beta);
        total = Some(match total {
            Some(t) => g.add(t, node),
            None => node,
        });
    }
    total
}

impl Trainable for BaselineModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Same target assignment as the point-set model, with the stage-1 boxes
    /// standing in for the pseudo boxes; regression targets are encoded
    /// deltas rather than point-set distances.
    fn image_loss(
        &self,
        g: &mut Graph,
        image: &Array3<f64>,
        gts: &[GtObject],
        lcfg: &LossConfig,
    ) -> Result<ImageLoss> {
        let (_, img_h, img_w) = image.dim();
        let levels = self.forward(g, image)?;
        let layout = PyramidLayout::for_image(img_h, img_w);
        debug_assert_eq!(layout.shapes, levels.iter().map(|l| (l.h, l.w)).collect::<Vec<_>>());
        let boxes1: Vec<Vec<BBox>> = levels.iter().map(|lv| lv.boxes1.clone()).collect();
        let asg = assign::assign_all(gts, &layout, img_w, img_h, &boxes1)?;

        let loc1 = delta_stage_sum(
            g,
            &asg.stage1,
            gts,
            &|lvl| levels[lvl].delta1,
            &|s| anchor(s.level_idx, s.iy, s.ix),
            lcfg.smooth_l1_beta,
        );
        let loc2 = delta_stage_sum(
            g,
            &asg.stage2,
            gts,
            &|lvl| levels[lvl].delta2,
            &|s| {
                let (_, w) = layout.shapes[s.level_idx];
                levels[s.level_idx].boxes1[s.iy * w + s.ix]
            },
            lcfg.smooth_l1_beta,
        );
        let (cls, cls_positives) =
            cls_loss_sum(g, &|lvl| levels[lvl].cls, &asg.cls, &layout, gts, lcfg);

        let sums = LossSums {
            cls_sum: g.scalar(cls),
            cls_positives,
            loc1_sum: loc1.map(|n| g.scalar(n)).unwrap_or(0.0),
            loc1_count: asg.stage1.len(),
            loc2_sum: loc2.map(|n| g.scalar(n)).unwrap_or(0.0),
            loc2_count: asg.stage2.len(),
        };
        Ok(ImageLoss { cls, loc1, loc2, sums })
    }
}

/// Detect objects with the baseline. Mirrors the point-set inference; a
/// detection's points are filled with the 3x3 grid of its final box (the
/// refinement's sampling locations) so visualization works on both models.
/// Unlike the point-set path there is no converter: the box IS the output.
pub fn infer(
    model: &BaselineModel,
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

    let mut candidates = Vec::new();
    for lv in &levels {
        let logits = g.value(lv.cls).into_dimensionality::<Ix3>().expect("[C,h,w]");
        let d2 = g.value(lv.delta2).into_dimensionality::<Ix3>().expect("[4,h,w]");
        let nc = logits.dim().0;
        let mut level_cands = Vec::new();
        for loc in 0..lv.h * lv.w {
            let (iy, ix) = (loc / lv.w, loc % lv.w);
            for class in 0..nc {
                let score = sigmoid(logits[(class, iy, ix)]);
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
            let (iy, ix) = (loc / lv.w, loc % lv.w);
            let d = [d2[(0, iy, ix)], d2[(1, iy, ix)], d2[(2, iy, ix)], d2[(3, iy, ix)]];
            let bbox = decode_box(&lv.boxes1[loc], d);
            let points1 = PointSet::new(roi::roi_grid_3x3(&lv.boxes1[loc]).to_vec());
            let points = PointSet::new(roi::roi_grid_3x3(&bbox).to_vec());
            candidates.push(Detection { image_id, class, score, bbox, points1, points });
        }
    }
    Ok(nms(&candidates, cfg.nms_iou))
}
