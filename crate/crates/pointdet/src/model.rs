//! The detector: a small strided backbone, a five-level feature pyramid, and
//! a head shared across levels that predicts, per location, classification
//! logits plus two rounds of point offsets.
//!
//! The head's localization subnet emits a first offset map (stage 1). That
//! map, minus the regular 3x3 grid template, becomes the deformable-conv
//! offset field consumed by BOTH the stage-2 localization branch and the
//! classification branch, so gradients from each flow back into the stage-1
//! predictor.

use std::collections::HashMap;

use ndarray::{Array3, ArrayD, Ix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{self, BoxConverter, PointSet};
use crate::kernels::deform;
use crate::tape::{Graph, LossConverter, NodeId, ParamStore};

/// Points per set; the deformable 3x3 kernel fixes this at nine.
pub const NUM_POINTS: usize = 9;
/// Pyramid levels, strides 8 through 128.
pub const NUM_LEVELS: usize = 5;
/// Input sides must be divisible by the coarsest stride; nothing is padded.
pub const INPUT_DIVISOR: usize = 128;
/// Initial foreground probability encoded in the classification bias.
pub const FOREGROUND_PRIOR: f64 = 0.01;

/// How a point set collapses to a pseudo box for supervision and scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConverterKind {
    MinMax,
    PartialMinMax,
    Moment,
}

impl ConverterKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(Self::MinMax),
            "partial_minmax" => Ok(Self::PartialMinMax),
            "moment" => Ok(Self::Moment),
            other => Err(Error::Config(format!(
                "unknown converter {other:?} (expected minmax, partial_minmax, or moment)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::MinMax => "minmax",
            Self::PartialMinMax => "partial_minmax",
            Self::Moment => "moment",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub base_channels: usize,
    pub head_channels: usize,
    /// Points per set. Only 9 is valid; the field exists so configs state it.
    pub num_points: usize,
    pub converter: ConverterKind,
    /// Points entering the partial min-max converter.
    pub partial_count: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            base_channels: 32,
            head_channels: 64,
            num_points: NUM_POINTS,
            converter: ConverterKind::Moment,
            partial_count: 4,
        }
    }
}

/// Channels per group capped at 32, the usual group-norm sizing.
fn gn_groups(channels: usize) -> Result<usize> {
    let group_size = channels.min(32);
    if channels == 0 || channels % group_size != 0 {
        return Err(Error::Config(format!(
            "channel count {channels} does not split into groups of {group_size}"
        )));
    }
    Ok(channels / group_size)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_points != NUM_POINTS {
            return Err(Error::Config(format!(
                "num_points must be {NUM_POINTS} (deformable 3x3 sampling), got {}",
                self.num_points
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(1..=NUM_POINTS).contains(&self.partial_count) {
            return Err(Error::Config(format!(
                "partial_count must be in 1..={NUM_POINTS}, got {}",
                self.partial_count
            )));
        }
        for c in self.backbone_channels() {
            gn_groups(c)?;
        }
        gn_groups(self.head_channels)?;
        Ok(())
    }

    /// Output channels of the five stride-2 backbone convolutions.
    pub fn backbone_channels(&self) -> [usize; NUM_LEVELS] {
        let b = self.base_channels;
        [b, b, 2 * b, 3 * b, 4 * b]
    }
}

/// Per-level head outputs, still on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LevelOutput {
    pub stride: f64,
    pub h: usize,
    pub w: usize,
    /// `[num_classes, h, w]` logits.
    pub cls: NodeId,
    /// `[18, h, w]` stage-1 point offsets, feature-map units about the center.
    pub off1: NodeId,
    /// `[18, h, w]` stage-2 refinement offsets.
    pub off2: NodeId,
}

/// Host-side decode of one level: image-coordinate point sets and class
/// probabilities per location (row-major over the level grid).
#[derive(Debug, Clone)]
pub struct LevelDecode {
    pub stride: f64,
    pub h: usize,
    pub w: usize,
    pub points1: Vec<PointSet>,
    pub points2: Vec<PointSet>,
    /// `scores[loc][class]`, sigmoid of the logits.
    pub scores: Vec<Vec<f64>>,
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
}

const MOMENT_SCALES: &str = "moment.log_scales";

pub(crate) enum Init {
    /// He-normal for layers feeding a ReLU.
    He,
    /// Tight Gaussian for prediction layers.
    Head,
}

pub(crate) fn add_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    init: Init,
    bias: Option<f64>,
) {
    let std = match init {
        Init::He => (2.0 / (c_in * k * k) as f64).sqrt(),
        Init::Head => 0.01,
    };
    let normal = Normal::new(0.0, std).expect("valid std");
    let w = ArrayD::from_shape_simple_fn(vec![c_out, c_in, k, k], || normal.sample(rng));
    store.add(&format!("{name}.w"), w, true);
    if let Some(b0) = bias {
        store.add(&format!("{name}.b"), ArrayD::from_elem(vec![c_out], b0), false);
    }
}

pub(crate) fn add_gn(store: &mut ParamStore, name: &str, c: usize) {
    store.add(&format!("{name}.gamma"), ArrayD::from_elem(vec![c], 1.0), false);
    store.add(&format!("{name}.beta"), ArrayD::from_elem(vec![c], 0.0), false);
}

/// Register the backbone, lateral/top-down pyramid, and the two head trunks;
/// every detector variant shares this stem.
pub(crate) fn add_stem(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &ModelConfig) {
    let chans = config.backbone_channels();
    let mut c_in = 3;
    for (i, &c_out) in chans.iter().enumerate() {
        add_conv(store, rng, &format!("backbone.conv{i}"), c_out, c_in, 3, Init::He, None);
        add_gn(store, &format!("backbone.conv{i}.gn"), c_out);
        c_in = c_out;
    }

    let hc = config.head_channels;
    for (lvl, &c) in [chans[2], chans[3], chans[4]].iter().enumerate() {
        add_conv(store, rng, &format!("fpn.lateral{}", lvl + 3), hc, c, 1, Init::He, Some(0.0));
    }
    for lvl in 3..=5 {
        add_conv(store, rng, &format!("fpn.smooth{lvl}"), hc, hc, 3, Init::He, Some(0.0));
    }
    add_conv(store, rng, "fpn.p6", hc, hc, 3, Init::He, Some(0.0));
    add_conv(store, rng, "fpn.p7", hc, hc, 3, Init::He, Some(0.0));

    for subnet in ["loc", "cls"] {
        for i in 0..3 {
            add_conv(store, rng, &format!("head.{subnet}.trunk{i}"), hc, hc, 3, Init::He, None);
            add_gn(store, &format!("head.{subnet}.trunk{i}.gn"), hc);
        }
    }
}

pub(crate) fn validate_input(image: &Array3<f64>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
    }
    if h == 0 || w == 0 || h % INPUT_DIVISOR != 0 || w % INPUT_DIVISOR != 0 {
        return Err(Error::Shape(format!(
            "input sides must be positive multiples of {INPUT_DIVISOR}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Parameter-to-node plumbing shared by the detector variants: one tape node
/// per parameter, memoized so weight sharing across levels is structural.
pub(crate) struct NetCore<'a> {
    pub store: &'a ParamStore,
    pub config: &'a ModelConfig,
    cache: HashMap<usize, NodeId>,
}

impl<'a> NetCore<'a> {
    pub fn new(store: &'a ParamStore, config: &'a ModelConfig) -> Self {
        Self { store, config, cache: HashMap::new() }
    }

    fn pid(&self, name: &str) -> crate::tape::ParamId {
        self.store
            .find(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"))
    }

    pub fn p(&mut self, g: &mut Graph, name: &str) -> NodeId {
        let id = self.pid(name);
        *self.cache.entry(id.0).or_insert_with(|| g.param(self.store, id))
    }

    /// conv3x3 (no bias) -> group norm -> relu.
    fn trunk_block(
        &mut self,
        g: &mut Graph,
        x: NodeId,
        name: &str,
        channels: usize,
        stride: usize,
    ) -> NodeId {
        let w = self.p(g, &format!("{name}.w"));
        let y = g.conv2d(x, w, None, stride, 1);
        let gamma = self.p(g, &format!("{name}.gn.gamma"));
        let beta = self.p(g, &format!("{name}.gn.beta"));
        let groups = gn_groups(channels).expect("validated at init");
        let y = g.group_norm(y, gamma, beta, groups);
        g.relu(y)
    }

    pub fn conv(&mut self, g: &mut Graph, x: NodeId, name: &str, stride: usize, pad: usize) -> NodeId {
        let w = self.p(g, &format!("{name}.w"));
        let b = self.p(g, &format!("{name}.b"));
        g.conv2d(x, w, Some(b), stride, pad)
    }

    /// Backbone plus top-down merge: P3..P7, finest first.
    pub fn pyramid(&mut self, g: &mut Graph, image: &Array3<f64>) -> [NodeId; NUM_LEVELS] {
        let chans = self.config.backbone_channels();
        let mut x = g.constant(image.clone().into_dyn());
        let mut taps = Vec::with_capacity(3);
        for (i, &c_out) in chans.iter().enumerate() {
            x = self.trunk_block(g, x, &format!("backbone.conv{i}"), c_out, 2);
            if i >= 2 {
                taps.push(x);
            }
        }

        let l3 = self.conv(g, taps[0], "fpn.lateral3", 1, 0);
        let l4 = self.conv(g, taps[1], "fpn.lateral4", 1, 0);
        let l5 = self.conv(g, taps[2], "fpn.lateral5", 1, 0);
        let u5 = g.upsample2x(l5);
        let m4 = g.add(l4, u5);
        let u4 = g.upsample2x(m4);
        let m3 = g.add(l3, u4);
        let p3 = self.conv(g, m3, "fpn.smooth3", 1, 1);
        let p4 = self.conv(g, m4, "fpn.smooth4", 1, 1);
        let p5 = self.conv(g, l5, "fpn.smooth5", 1, 1);
        let p6 = self.conv(g, p5, "fpn.p6", 2, 1);
        let p6r = g.relu(p6);
        let p7 = self.conv(g, p6r, "fpn.p7", 2, 1);
        [p3, p4, p5, p6, p7]
    }

    /// The two 3-block subnet trunks applied to one level: `(loc, cls)`.
    pub fn trunks(&mut self, g: &mut Graph, level: NodeId) -> (NodeId, NodeId) {
        let hc = self.config.head_channels;
        let mut loc = level;
        let mut cls = level;
        for i in 0..3 {
            loc = self.trunk_block(g, loc, &format!("head.loc.trunk{i}"), hc, 1);
            cls = self.trunk_block(g, cls, &format!("head.cls.trunk{i}"), hc, 1);
        }
        (loc, cls)
    }
}

impl Model {
    fn pid(&self, name: &str) -> crate::tape::ParamId {
        self.store
            .find(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"))
    }

    /// Fresh model with randomly initialized parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        add_stem(&mut store, &mut rng, &config);

        let hc = config.head_channels;
        add_conv(&mut store, &mut rng, "head.loc.init.conv", hc, hc, 3, Init::He, Some(0.0));
        add_conv(&mut store, &mut rng, "head.loc.init.out", 2 * NUM_POINTS, hc, 1, Init::Head, Some(0.0));
        add_conv(&mut store, &mut rng, "head.loc.refine.deform", hc, hc, 3, Init::He, Some(0.0));
        add_conv(&mut store, &mut rng, "head.loc.refine.conv", hc, hc, 3, Init::He, Some(0.0));
        add_conv(&mut store, &mut rng, "head.loc.refine.out", 2 * NUM_POINTS, hc, 1, Init::Head, Some(0.0));
        add_conv(&mut store, &mut rng, "head.cls.deform", hc, hc, 3, Init::He, Some(0.0));
        let prior_bias = -((1.0 - FOREGROUND_PRIOR) / FOREGROUND_PRIOR).ln();
        add_conv(&mut store, &mut rng, "head.cls.out", config.num_classes, hc, 1, Init::Head, Some(prior_bias));

        if config.converter == ConverterKind::Moment {
            store.add(MOMENT_SCALES, ArrayD::from_elem(vec![2], 0.0), false);
        }

        Ok(Self { config, store })
    }

    /// Run backbone, pyramid, and the shared head on one image
    /// (`[3, H, W]`, sides divisible by 128). Returns one output per level,
    /// finest (stride 8) first.
    pub fn forward(&self, g: &mut Graph, image: &Array3<f64>) -> Result<Vec<LevelOutput>> {
        validate_input(image)?;
        let mut core = NetCore::new(&self.store, &self.config);
        let pyramid = core.pyramid(g, image);
        let mut out = Vec::with_capacity(NUM_LEVELS);
        for (idx, level) in pyramid.into_iter().enumerate() {
            out.push(self.head(g, &mut core, level, idx)?);
        }
        Ok(out)
    }

    fn head(
        &self,
        g: &mut Graph,
        core: &mut NetCore,
        level: NodeId,
        level_idx: usize,
    ) -> Result<LevelOutput> {
        let dims = g.value(level).into_dimensionality::<Ix3>().expect("[C,H,W]").dim();
        let (_, h, w) = dims;

        let (loc, cls) = core.trunks(g, level);

        let o1 = core.conv(g, loc, "head.loc.init.conv", 1, 1);
        let o1 = g.relu(o1);
        let off1 = core.conv(g, o1, "head.loc.init.out", 1, 0);

        // Stage-1 offsets relative to the center become deformable-conv
        // offsets relative to the regular grid. No detach: stage-2 loc and
        // classification gradients both reach the stage-1 predictor here.
        let field = g.sub_channel_const(off1, deform::grid_template().to_vec());

        let dw = core.p(g, "head.loc.refine.deform.w");
        let db = core.p(g, "head.loc.refine.deform.b");
        let r = g.deform_conv3x3(loc, dw, db, field);
        let r = g.relu(r);
        let r = core.conv(g, r, "head.loc.refine.conv", 1, 1);
        let r = g.relu(r);
        let off2 = core.conv(g, r, "head.loc.refine.out", 1, 0);

        let cw = core.p(g, "head.cls.deform.w");
        let cb = core.p(g, "head.cls.deform.b");
        let cd = g.deform_conv3x3(cls, cw, cb, field);
        let cd = g.relu(cd);
        let logits = core.conv(g, cd, "head.cls.out", 1, 0);

        Ok(LevelOutput {
            stride: (1usize << (3 + level_idx)) as f64,
            h,
            w,
            cls: logits,
            off1,
            off2,
        })
    }

    /// The pseudo-box converter with current parameter values.
    pub fn box_converter(&self) -> BoxConverter {
        match self.config.converter {
            ConverterKind::MinMax => BoxConverter::MinMax,
            ConverterKind::PartialMinMax => {
                BoxConverter::PartialMinMax { count: self.config.partial_count }
            }
            ConverterKind::Moment => {
                let v = &self.store.get(self.pid(MOMENT_SCALES)).value;
                let s = v.as_slice().expect("contiguous");
                BoxConverter::Moment { log_scale_x: s[0], log_scale_y: s[1] }
            }
        }
    }

    /// The converter as seen by loss ops on a tape; the moment scales enter
    /// as a trainable leaf.
    pub fn loss_converter(&self, g: &mut Graph) -> LossConverter {
        match self.config.converter {
            ConverterKind::MinMax => LossConverter::MinMax,
            ConverterKind::PartialMinMax => {
                LossConverter::PartialMinMax { count: self.config.partial_count }
            }
            ConverterKind::Moment => {
                let id = self.pid(MOMENT_SCALES);
                LossConverter::Moment { log_scales: g.param(&self.store, id) }
            }
        }
    }

    /// Read head outputs off the tape into image-coordinate point sets and
    /// class probabilities.
    pub fn decode(&self, g: &Graph, levels: &[LevelOutput]) -> Vec<LevelDecode> {
        levels
            .iter()
            .map(|lv| {
                let off1 = g.value(lv.off1).into_dimensionality::<Ix3>().expect("[18,h,w]");
                let off2 = g.value(lv.off2).into_dimensionality::<Ix3>().expect("[18,h,w]");
                let logits = g.value(lv.cls).into_dimensionality::<Ix3>().expect("[C,h,w]");
                let nc = logits.dim().0;
                let mut points1 = Vec::with_capacity(lv.h * lv.w);
                let mut points2 = Vec::with_capacity(lv.h * lv.w);
                let mut scores = Vec::with_capacity(lv.h * lv.w);
                for iy in 0..lv.h {
                    for ix in 0..lv.w {
                        let cx = (ix as f64 + 0.5) * lv.stride;
                        let cy = (iy as f64 + 0.5) * lv.stride;
                        let o1: Vec<[f64; 2]> = (0..NUM_POINTS)
                            .map(|k| [off1[(2 * k, iy, ix)], off1[(2 * k + 1, iy, ix)]])
                            .collect();
                        let p1 = geometry::offsets_to_points(cx, cy, lv.stride, &o1);
                        let o2: Vec<[f64; 2]> = (0..NUM_POINTS)
                            .map(|k| [off2[(2 * k, iy, ix)], off2[(2 * k + 1, iy, ix)]])
                            .collect();
                        let p2 = geometry::refine_points(&p1, &o2, lv.stride);
                        scores.push((0..nc).map(|c| sigmoid(logits[(c, iy, ix)])).collect());
                        points1.push(p1);
                        points2.push(p2);
                    }
                }
                LevelDecode { stride: lv.stride, h: lv.h, w: lv.w, points1, points2, scores }
            })
            .collect()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
