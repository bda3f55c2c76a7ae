//! SGD training loop: per-image loss graphs, batch-normalized seeds, and
//! momentum updates with decoupled-from-nothing classic L2 weight decay.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::assign::{self, ClsLabel, GtObject, PyramidLayout};
use crate::checkpoint;
use crate::data::{hflip, Dataset};
use crate::error::{Error, Result};
use crate::loss::{self, LossBreakdown, LossConfig, LossSums};
use crate::model::Model;
use crate::tape::{Graph, NodeId, ParamStore};

/// Optimization schedule. Defaults are sized for the synthetic dataset:
/// a couple of thousand iterations on one core.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear warmup from `warmup_start_factor * learning_rate` over this
    /// many iterations. Zero disables warmup.
    pub warmup_iterations: usize,
    pub warmup_start_factor: f64,
    /// Iteration at which the rate is multiplied by `decay_factor`;
    /// zero disables the step.
    pub decay_at: usize,
    pub decay_factor: f64,
    /// Random horizontal flip augmentation.
    pub hflip: bool,
    pub seed: u64,
    /// Extra checkpoint every N iterations (0 = final checkpoint only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 2,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_iterations: 100,
            warmup_start_factor: 0.1,
            decay_at: 1500,
            decay_factor: 0.1,
            hflip: true,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad learning_rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!("negative weight_decay {}", self.weight_decay)));
        }
        if self.warmup_iterations > 0 && !(self.warmup_start_factor > 0.0 && self.warmup_start_factor <= 1.0) {
            return Err(Error::Config(format!(
                "warmup_start_factor must lie in (0,1], got {}",
                self.warmup_start_factor
            )));
        }
        if self.decay_at > 0 && !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must lie in (0,1], got {}",
                self.decay_factor
            )));
        }
        Ok(())
    }

    /// Learning rate in effect at `iteration` (0-based).
    pub fn rate_at(&self, iteration: usize) -> f64 {
        let mut lr = self.learning_rate;
        if self.warmup_iterations > 0 && iteration < self.warmup_iterations {
            let t = iteration as f64 / self.warmup_iterations as f64;
            lr *= self.warmup_start_factor + (1.0 - self.warmup_start_factor) * t;
        }
        if self.decay_at > 0 && iteration >= self.decay_at {
            lr *= self.decay_factor;
        }
        lr
    }
}

/// Per-image loss graph heads, plus the raw sums needed for batch weighting.
pub struct ImageLoss {
    pub cls: NodeId,
    pub loc1: Option<NodeId>,
    pub loc2: Option<NodeId>,
    pub sums: LossSums,
}

/// Anything the optimization loop can drive: a parameter store plus a way to
/// build the per-image loss graph.
pub trait Trainable: Sync {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn image_loss(
        &self,
        g: &mut Graph,
        image: &ndarray::Array3<f64>,
        gts: &[GtObject],
        lcfg: &LossConfig,
    ) -> Result<ImageLoss>;
}

impl Trainable for Model {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn image_loss(
        &self,
        g: &mut Graph,
        image: &ndarray::Array3<f64>,
        gts: &[GtObject],
        lcfg: &LossConfig,
    ) -> Result<ImageLoss> {
        build_image_loss(self, g, image, gts, lcfg)
    }
}

/// Focal-loss sum over every non-ignored location of every level.
/// Returns the summed node and the number of positive locations.
pub(crate) fn cls_loss_sum(
    g: &mut Graph,
    logits_of: &dyn Fn(usize) -> NodeId,
    cls_labels: &[Vec<ClsLabel>],
    layout: &PyramidLayout,
    gts: &[GtObject],
    lcfg: &LossConfig,
) -> (NodeId, usize) {
    let mut total: Option<NodeId> = None;
    let mut positives = 0usize;
    for (lvl, labels) in cls_labels.iter().enumerate() {
        let (_, w) = layout.shapes[lvl];
        let mut locs = Vec::new();
        let mut rows = Vec::new();
        for (loc, lab) in labels.iter().enumerate() {
            match lab {
                ClsLabel::Ignore => {}
                ClsLabel::Background => {
                    locs.push((loc / w, loc % w));
                    rows.push(0);
                }
                ClsLabel::Object { gt } => {
                    locs.push((loc / w, loc % w));
                    rows.push(gts[*gt].class + 1);
                    positives += 1;
                }
            }
        }
        if locs.is_empty() {
            continue;
        }
        let logits = g.gather_locs(logits_of(lvl), locs);
        let node = g.focal_sum(logits, rows, lcfg.focal_alpha, lcfg.focal_gamma);
        total = Some(match total {
            Some(t) => g.add(t, node),
            None => node,
        });
    }
    (total.expect("every level has at least one non-ignored location"), positives)
}

/// Build the full two-stage loss for one image on `g`.
///
/// Stage-1 targets come from center-bin assignment; its points decode from
/// the per-location bin center. Stage-2 and classification targets come from
/// matching the stage-1 pseudo boxes (decoded host-side, so the refinement
/// loss cannot push gradients back through stage 1 — the shared offset field
/// inside the model is the only such path, by design).
pub fn build_image_loss(
    model: &Model,
    g: &mut Graph,
    image: &ndarray::Array3<f64>,
    gts: &[GtObject],
    lcfg: &LossConfig,
) -> Result<ImageLoss> {
    let (_, img_h, img_w) = image.dim();
    let levels = model.forward(g, image)?;
    let layout = PyramidLayout::for_image(img_h, img_w);
    debug_assert_eq!(
        layout.shapes,
        levels.iter().map(|l| (l.h, l.w)).collect::<Vec<_>>()
    );

    let decoded = model.decode(g, &levels);
    let box_conv = model.box_converter();
    let pseudo1: Vec<Vec<crate::geometry::BBox>> = decoded
        .iter()
        .map(|ld| ld.points1.iter().map(|p| box_conv.convert(p)).collect())
        .collect();

    let asg = assign::assign_all(gts, &layout, img_w, img_h, &pseudo1)?;
    let loss_conv = model.loss_converter(g);

    // Localization stages share shape: group positives per level, gather the
    // offset rows, and score decoded points against their matched boxes.
    let stage_sum = |g: &mut Graph,
                         samples: &[assign::PosSample],
                         offset_of: &dyn Fn(usize) -> NodeId,
                         base_row: &dyn Fn(&assign::PosSample) -> Vec<f64>|
     -> Option<NodeId> {
        let mut by_level: BTreeMap<usize, Vec<&assign::PosSample>> = BTreeMap::new();
        for s in samples {
            by_level.entry(s.level_idx).or_default().push(s);
        }
        let mut total: Option<NodeId> = None;
        for (lvl, group) in by_level {
            let stride = PyramidLayout::stride(lvl);
            let locs: Vec<(usize, usize)> = group.iter().map(|s| (s.iy, s.ix)).collect();
            let mut base = Array2::<f64>::zeros((group.len(), 2 * model.config.num_points));
            let mut targets = Vec::with_capacity(group.len());
            for (row, s) in group.iter().enumerate() {
                let flat = base_row(s);
                base.row_mut(row).assign(&ndarray::aview1(&flat));
                targets.push(gts[s.gt].bbox);
            }
            let rows = g.gather_locs(offset_of(lvl), locs);
            let node = g.points_loss_sum(
                rows,
                base,
                targets,
                loss_conv.clone(),
                stride,
                stride,
                lcfg.smooth_l1_beta,
            );
            total = Some(match total {
                Some(t) => g.add(t, node),
                None => node,
            });
        }
        total
    };

    let loc1 = stage_sum(
        g,
        &asg.stage1,
        &|lvl| levels[lvl].off1,
        &|s| {
            let (cx, cy) = PyramidLayout::center(s.level_idx, s.iy, s.ix);
            let mut row = Vec::with_capacity(2 * model.config.num_points);
            for _ in 0..model.config.num_points {
                row.push(cx);
                row.push(cy);
            }
            row
        },
    );
    let loc2 = stage_sum(
        g,
        &asg.stage2,
        &|lvl| levels[lvl].off2,
        &|s| {
            let (_, w) = layout.shapes[s.level_idx];
            decoded[s.level_idx].points1[s.iy * w + s.ix].to_flat()
        },
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

/// Gradients of the batch loss for one image's graph, seeded with the batch
/// normalization weights.
fn image_grads(
    g: &mut Graph,
    heads: &ImageLoss,
    weights: [f64; 3],
) -> Vec<(crate::tape::ParamId, ArrayD<f64>)> {
    let mut seeds = vec![(heads.cls, weights[0])];
    if let Some(n) = heads.loc1 {
        seeds.push((n, weights[1]));
    }
    if let Some(n) = heads.loc2 {
        seeds.push((n, weights[2]));
    }
    g.backward(&seeds);
    g.param_grads()
}

#[derive(Debug)]
pub struct TrainOutput {
    pub final_loss: LossBreakdown,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Run the optimization loop, writing `metrics.csv` (one
/// `iteration,total,cls,loc1,loc2` line per step), periodic checkpoints, and
/// a final `model.ckpt` under `out_dir`.
pub fn train<M: Trainable>(
    model: &mut M,
    dataset: &Dataset,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    out_dir: &Path,
    config_echo: &str,
) -> Result<TrainOutput> {
    tcfg.validate()?;
    lcfg.validate()?;
    if dataset.scenes.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut velocity: Vec<ArrayD<f64>> = model
        .store()
        .iter()
        .map(|(_, d)| ArrayD::zeros(d.value.raw_dim()))
        .collect();

    let mut last = LossBreakdown { total: f64::NAN, cls: f64::NAN, loc_stage1: 0.0, loc_stage2: 0.0 };
    for iter in 0..tcfg.iterations {
        // Sample the batch up front so the RNG stream does not depend on
        // graph internals.
        let batch: Vec<(usize, bool)> = (0..tcfg.batch_size)
            .map(|_| {
                let idx = rng.gen_range(0..dataset.scenes.len());
                let flip = tcfg.hflip && rng.gen_bool(0.5);
                (idx, flip)
            })
            .collect();

        let frozen: &M = model;
        let mut built: Vec<(Graph, ImageLoss)> = batch
            .par_iter()
            .map(|&(idx, flip)| {
                let scene = &dataset.scenes[idx];
                let mut g = Graph::new();
                let heads = if flip {
                    let (img, gts) = hflip(&scene.image, &scene.gts);
                    frozen.image_loss(&mut g, &img, &gts, lcfg)?
                } else {
                    frozen.image_loss(&mut g, &scene.image, &scene.gts, lcfg)?
                };
                Ok((g, heads))
            })
            .collect::<Result<_>>()?;

        let mut batch_sums = LossSums::default();
        for (_, heads) in &built {
            batch_sums.accumulate(&heads.sums);
        }
        last = loss::combine(&batch_sums, lcfg);
        if !last.total.is_finite() {
            return Err(Error::Diverged(format!(
                "iteration {iter}: non-finite loss (cls {}, loc1 {}, loc2 {})",
                last.cls, last.loc_stage1, last.loc_stage2
            )));
        }
        let weights = batch_sums.seed_weights(lcfg);

        let per_image: Vec<Vec<_>> = built
            .par_iter_mut()
            .map(|(g, heads)| image_grads(g, heads, weights))
            .collect();

        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; model.store().len()];
        for image in per_image {
            for (pid, grad) in image {
                match &mut grads[pid.0] {
                    Some(acc) => *acc += &grad,
                    slot => *slot = Some(grad),
                }
            }
        }

        let lr = tcfg.rate_at(iter);
        for pid in 0..model.store().len() {
            let id = crate::tape::ParamId(pid);
            let mut update = match grads[pid].take() {
                Some(gr) => gr,
                None => ArrayD::zeros(velocity[pid].raw_dim()),
            };
            {
                let def = model.store().get(id);
                if tcfg.weight_decay > 0.0 && def.weight_decay {
                    update.scaled_add(tcfg.weight_decay, &def.value);
                }
            }
            velocity[pid] *= tcfg.momentum;
            velocity[pid] += &update;
            model.store_mut().value_mut(id).scaled_add(-lr, &velocity[pid]);
        }

        writeln!(
            metrics,
            "{},{},{},{},{}",
            iter, last.total, last.cls, last.loc_stage1, last.loc_stage2
        )?;

        if tcfg.checkpoint_every > 0
            && (iter + 1) % tcfg.checkpoint_every == 0
            && iter + 1 < tcfg.iterations
        {
            let path = out_dir.join(format!("model_{:06}.ckpt", iter + 1));
            checkpoint::save(&path, config_echo, model.store())?;
        }
    }
    metrics.flush()?;

    let checkpoint_path = out_dir.join("model.ckpt");
    checkpoint::save(&checkpoint_path, config_echo, model.store())?;
    Ok(TrainOutput { final_loss: last, checkpoint_path, metrics_path })
}
