//! Reverse-mode autodiff over dense f64 arrays.
//!
//! A [`Graph`] is an append-only tape: every operation executes eagerly and
//! records what it needs for the backward pass. Feature maps are `[C, H, W]`,
//! batches are separate graphs, and parameters are copied in as leaves from a
//! [`ParamStore`] so the optimizer can collect per-parameter gradients
//! afterwards by id.

use std::collections::HashMap;

use ndarray::{Array2, ArrayD, ArrayViewD, Ix1, Ix2, Ix3, Ix4};

use crate::geometry::{BBox, BoxConverter, PointSet};
use crate::kernels::{conv, deform, roi};
use crate::loss;

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Index of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamDef {
    pub name: String,
    pub value: ArrayD<f64>,
    /// Whether weight decay applies (convolution weights yes, biases and
    /// normalization affines no).
    pub weight_decay: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    defs: Vec<ParamDef>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>, weight_decay: bool) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.defs.len();
        self.index.insert(name.to_string(), id);
        self.defs.push(ParamDef { name: name.to_string(), value, weight_decay });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamDef {
        &self.defs[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.defs[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamDef)> {
        self.defs.iter().enumerate().map(|(i, d)| (ParamId(i), d))
    }

    pub fn total_scalars(&self) -> usize {
        self.defs.iter().map(|d| d.value.len()).sum()
    }
}

/// Converter selection for the point-set loss op; the moment variant reads
/// its two log scales from a `[2]` node so they can be learned.
#[derive(Debug, Clone)]
pub enum LossConverter {
    MinMax,
    PartialMinMax { count: usize },
    Moment { log_scales: NodeId },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Detach,
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Relu { x: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    DeformConv { x: NodeId, w: NodeId, b: NodeId, field: NodeId },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize },
    Upsample2x { x: NodeId },
    SubChannelConst { x: NodeId },
    /// `[C, H, W]` -> `[N, C]` rows at the given `(iy, ix)` locations.
    GatherLocs { x: NodeId, locs: Vec<(usize, usize)> },
    FocalSum { logits: NodeId, labels: Vec<usize>, alpha: f64, gamma: f64 },
    PointsLossSum {
        offsets: NodeId,
        base: Array2<f64>,
        targets: Vec<BBox>,
        converter: LossConverter,
        decode_scale: f64,
        norm_stride: f64,
        beta: f64,
    },
    SmoothL1Sum { pred: NodeId, target: Array2<f64>, beta: f64 },
    DeformRoiPool { feat: ndarray::Array3<f64>, bbox: BBox, offsets: NodeId, gamma: f64 },
}

struct Node {
    op: Op,
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    needs_grad: bool,
    aux: Aux,
}

enum Aux {
    None,
    Cols(Array2<f64>),
    Gn(conv::GroupNormStats),
}

pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, NodeId)>,
    grad_enabled: bool,
}

impl Graph {
    /// A graph that records what the backward pass needs.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), grad_enabled: true }
    }

    /// A forward-only graph: parameters enter as constants, no backward state
    /// is kept.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), grad_enabled: false }
    }

    fn push(&mut self, op: Op, value: ArrayD<f64>, needs_grad: bool, aux: Aux) -> NodeId {
        let needs_grad = needs_grad && self.grad_enabled;
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            needs_grad,
            aux: if needs_grad { aux } else { Aux::None },
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> ArrayViewD<'_, f64> {
        self.nodes[id.0].value.view()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        *v.iter().next().expect("non-empty")
    }

    pub fn grad(&self, id: NodeId) -> Option<ArrayViewD<'_, f64>> {
        self.nodes[id.0].grad.as_ref().map(|g| g.view())
    }

    /// Gradients collected for every parameter leaf that received one,
    /// in registration order.
    pub fn param_grads(&self) -> Vec<(ParamId, ArrayD<f64>)> {
        self.params
            .iter()
            .filter_map(|&(pid, nid)| self.nodes[nid.0].grad.clone().map(|g| (pid, g)))
            .collect()
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(Op::Leaf, value, false, Aux::None)
    }

    /// Copy a parameter's current value onto the tape as a leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let node = self.push(Op::Leaf, store.get(id).value.clone(), true, Aux::None);
        if self.grad_enabled {
            self.params.push((id, node));
        }
        node
    }

    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.push(Op::Detach, v, false, Aux::None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add { a, b }, v, ng, Aux::None)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[x.0].value * c;
        let ng = self.needs(x);
        self.push(Op::Scale { x, c }, v, ng, Aux::None)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|u| u.max(0.0));
        let ng = self.needs(x);
        self.push(Op::Relu { x }, v, ng, Aux::None)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("conv input [C,H,W]");
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().expect("conv weight [O,I,k,k]");
        let bv = b.map(|bb| {
            self.nodes[bb.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .expect("conv bias [O]")
        });
        let (y, cols) = conv::conv2d(&xv, &wv, bv.as_ref(), stride, pad);
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|bb| self.needs(bb));
        self.push(Op::Conv2d { x, w, b, stride, pad }, y.into_dyn(), ng, Aux::Cols(cols))
    }

    pub fn deform_conv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId, field: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("[C,H,W]");
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().expect("[O,I,3,3]");
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().expect("[O]");
        let fv = self.nodes[field.0].value.view().into_dimensionality::<Ix3>().expect("[18,H,W]");
        let (y, cols) = deform::deform_conv3x3(&xv, &wv, &bv, &fv);
        let ng = self.needs(x) || self.needs(w) || self.needs(b) || self.needs(field);
        self.push(Op::DeformConv { x, w, b, field }, y.into_dyn(), ng, Aux::Cols(cols))
    }

    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("[C,H,W]");
        let gv = self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().expect("[C]");
        let bv = self.nodes[beta.0].value.view().into_dimensionality::<Ix1>().expect("[C]");
        let (y, stats) = conv::group_norm(&xv, &gv, &bv, groups);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Op::GroupNorm { x, gamma, beta, groups }, y.into_dyn(), ng, Aux::Gn(stats))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("[C,H,W]");
        let y = conv::upsample2x(&xv);
        let ng = self.needs(x);
        self.push(Op::Upsample2x { x }, y.into_dyn(), ng, Aux::None)
    }

    /// Per-channel constant subtraction, `y[c] = x[c] - v[c]`.
    pub fn sub_channel_const(&mut self, x: NodeId, v: Vec<f64>) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("[C,H,W]");
        assert_eq!(xv.dim().0, v.len());
        let mut y = xv.to_owned();
        for (c, tv) in v.iter().enumerate() {
            y.index_axis_mut(ndarray::Axis(0), c).mapv_inplace(|u| u - tv);
        }
        let ng = self.needs(x);
        self.push(Op::SubChannelConst { x }, y.into_dyn(), ng, Aux::None)
    }

    /// Gather feature vectors at spatial locations: `[C,H,W]` -> `[N,C]`.
    pub fn gather_locs(&mut self, x: NodeId, locs: Vec<(usize, usize)>) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("[C,H,W]");
        let (c, _, _) = xv.dim();
        let mut y = Array2::<f64>::zeros((locs.len(), c));
        for (row, &(iy, ix)) in locs.iter().enumerate() {
            for ch in 0..c {
                y[(row, ch)] = xv[(ch, iy, ix)];
            }
        }
        let ng = self.needs(x);
        self.push(Op::GatherLocs { x, locs }, y.into_dyn(), ng, Aux::None)
    }

    /// Focal classification loss summed over an `[N, C]` logit matrix.
    /// `labels[i]` is 0 for background or `class + 1` for a foreground row.
    pub fn focal_sum(&mut self, logits: NodeId, labels: Vec<usize>, alpha: f64, gamma: f64) -> NodeId {
        let lv = self.nodes[logits.0].value.view().into_dimensionality::<Ix2>().expect("[N,C]");
        assert_eq!(lv.dim().0, labels.len());
        let mut total = 0.0;
        for (i, row) in lv.rows().into_iter().enumerate() {
            for (c, &z) in row.iter().enumerate() {
                let positive = labels[i] == c + 1;
                total += loss::focal_from_logit(z, positive, alpha, gamma).0;
            }
        }
        let ng = self.needs(logits);
        self.push(
            Op::FocalSum { logits, labels, alpha, gamma },
            ndarray::arr0(total).into_dyn(),
            ng,
            Aux::None,
        )
    }

    fn converter_of(&self, c: &LossConverter) -> BoxConverter {
        match c {
            LossConverter::MinMax => BoxConverter::MinMax,
            LossConverter::PartialMinMax { count } => BoxConverter::PartialMinMax { count: *count },
            LossConverter::Moment { log_scales } => {
                let v = &self.nodes[log_scales.0].value;
                assert_eq!(v.len(), 2, "moment log scales are a [2] vector");
                let s = v.as_slice().expect("contiguous");
                BoxConverter::Moment { log_scale_x: s[0], log_scale_y: s[1] }
            }
        }
    }

    /// Point-set localization loss summed over N samples.
    ///
    /// Effective points for row `i`: `base[i] + decode_scale * offsets[i]`
    /// (both `[N, 18]`, `(x, y)` interleaved); each is collapsed by the
    /// converter and scored against `targets[i]` with corner differences
    /// normalized by `norm_stride`.
    #[allow(clippy::too_many_arguments)]
    pub fn points_loss_sum(
        &mut self,
        offsets: NodeId,
        base: Array2<f64>,
        targets: Vec<BBox>,
        converter: LossConverter,
        decode_scale: f64,
        norm_stride: f64,
        beta: f64,
    ) -> NodeId {
        let ov = self.nodes[offsets.0].value.view().into_dimensionality::<Ix2>().expect("[N,18]");
        assert_eq!(ov.dim(), base.dim());
        assert_eq!(ov.dim().0, targets.len());
        let conv = self.converter_of(&converter);
        let mut total = 0.0;
        for i in 0..targets.len() {
            let flat: Vec<f64> = (0..ov.dim().1)
                .map(|j| base[(i, j)] + decode_scale * ov[(i, j)])
                .collect();
            let ps = PointSet::from_flat(&flat);
            total += loss::points_loss(&ps, &targets[i], &conv, norm_stride, beta)
                .expect("targets validated at assignment time")
                .value;
        }
        let ng = self.needs(offsets)
            || matches!(&converter, LossConverter::Moment { log_scales } if self.needs(*log_scales));
        self.push(
            Op::PointsLossSum { offsets, base, targets, converter, decode_scale, norm_stride, beta },
            ndarray::arr0(total).into_dyn(),
            ng,
            Aux::None,
        )
    }

    /// Elementwise smooth-L1 against a constant target, summed.
    pub fn smooth_l1_sum(&mut self, pred: NodeId, target: Array2<f64>, beta: f64) -> NodeId {
        let pv = self.nodes[pred.0].value.view().into_dimensionality::<Ix2>().expect("[N,K]");
        assert_eq!(pv.dim(), target.dim());
        let total: f64 = pv
            .iter()
            .zip(target.iter())
            .map(|(p, t)| loss::smooth_l1(p - t, beta))
            .sum();
        let ng = self.needs(pred);
        self.push(Op::SmoothL1Sum { pred, target, beta }, ndarray::arr0(total).into_dyn(), ng, Aux::None)
    }

    /// Deformable RoI pooling over a constant feature map; gradients flow to
    /// the `[18]`-shaped normalized-offset node only. Output is `[C*9, 1, 1]`
    /// so 1x1 convolutions can consume it.
    pub fn deform_roi_pool(
        &mut self,
        feat: ndarray::Array3<f64>,
        bbox: BBox,
        offsets: NodeId,
        gamma: f64,
    ) -> NodeId {
        let ov = &self.nodes[offsets.0].value;
        assert_eq!(ov.len(), 18, "normalized offsets are 18 scalars");
        let mut o = [0.0; 18];
        for (d, s) in o.iter_mut().zip(ov.iter()) {
            *d = *s;
        }
        let (pooled, _) = roi::deform_roi_pool_3x3(&feat.view(), &bbox, &o, gamma)
            .expect("proposal validated by caller");
        let c9 = pooled.len();
        let y = pooled
            .into_shape_with_order((c9, 1, 1))
            .expect("pooled reshape")
            .into_dyn();
        let ng = self.needs(offsets);
        self.push(Op::DeformRoiPool { feat, bbox, offsets, gamma }, y, ng, Aux::None)
    }

    fn accumulate(&mut self, id: NodeId, contrib: ArrayD<f64>) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        debug_assert_eq!(node.value.shape(), contrib.shape());
        match &mut node.grad {
            Some(g) => *g += &contrib,
            None => node.grad = Some(contrib),
        }
    }

    /// Run the backward pass from scalar roots, each seeded with a weight.
    pub fn backward(&mut self, seeds: &[(NodeId, f64)]) {
        assert!(self.grad_enabled, "backward on an inference graph");
        for &(id, w) in seeds {
            assert_eq!(self.nodes[id.0].value.len(), 1, "seeds must be scalars");
            let shape = self.nodes[id.0].value.raw_dim();
            self.accumulate(id, ArrayD::from_elem(shape, w));
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = self.nodes[i].grad.take() else { continue };
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                // Leaves keep their gradient for extraction.
                self.nodes[i].grad = Some(gy);
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, gy);
            self.nodes[i].op = op;
        }
    }

    fn backward_op(&mut self, i: usize, op: &Op, gy: ArrayD<f64>) {
        match op {
            Op::Leaf | Op::Detach => {}
            Op::Add { a, b } => {
                self.accumulate(*a, gy.clone());
                self.accumulate(*b, gy);
            }
            Op::Scale { x, c } => {
                self.accumulate(*x, &gy * *c);
            }
            Op::Relu { x } => {
                let mask = self.nodes[x.0].value.mapv(|u| if u > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(*x, &gy * &mask);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let gyv = gy.view().into_dimensionality::<Ix3>().expect("[O,Ho,Wo]");
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("[C,H,W]");
                let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().expect("[O,I,k,k]");
                let Aux::Cols(cols) = &self.nodes[i].aux else {
                    panic!("conv node lost its unfolded input")
                };
                let (gx, gw, gb) = conv::conv2d_backward(&gyv, &wv, cols, xv.dim(), *stride, *pad);
                self.accumulate(*x, gx.into_dyn());
                self.accumulate(*w, gw.into_dyn());
                if let Some(b) = b {
                    self.accumulate(*b, gb.into_dyn());
                }
            }
            Op::DeformConv { x, w, b, field } => {
                let gyv = gy.view().into_dimensionality::<Ix3>().expect("[O,H,W]");
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("[C,H,W]");
                let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().expect("[O,I,3,3]");
                let fv = self.nodes[field.0].value.view().into_dimensionality::<Ix3>().expect("[18,H,W]");
                let Aux::Cols(cols) = &self.nodes[i].aux else {
                    panic!("deform conv node lost its sampled patches")
                };
                let (gx, gw, gb, gf) = deform::deform_conv3x3_backward(&gyv, &xv, &wv, &fv, cols);
                self.accumulate(*x, gx.into_dyn());
                self.accumulate(*w, gw.into_dyn());
                self.accumulate(*b, gb.into_dyn());
                self.accumulate(*field, gf.into_dyn());
            }
            Op::GroupNorm { x, gamma, beta, groups } => {
                let gyv = gy.view().into_dimensionality::<Ix3>().expect("[C,H,W]");
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("[C,H,W]");
                let gv = self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().expect("[C]");
                let Aux::Gn(stats) = &self.nodes[i].aux else {
                    panic!("group norm node lost its statistics")
                };
                let (gx, gg, gb) = conv::group_norm_backward(&gyv, &xv, &gv, stats, *groups);
                self.accumulate(*x, gx.into_dyn());
                self.accumulate(*gamma, gg.into_dyn());
                self.accumulate(*beta, gb.into_dyn());
            }
            Op::Upsample2x { x } => {
                let gyv = gy.view().into_dimensionality::<Ix3>().expect("[C,2H,2W]");
                self.accumulate(*x, conv::upsample2x_backward(&gyv).into_dyn());
            }
            Op::SubChannelConst { x } => {
                self.accumulate(*x, gy);
            }
            Op::GatherLocs { x, locs } => {
                let gyv = gy.view().into_dimensionality::<Ix2>().expect("[N,C]");
                let shape = self.nodes[x.0].value.raw_dim();
                let mut gx = ArrayD::<f64>::zeros(shape);
                {
                    let mut g3 = gx.view_mut().into_dimensionality::<Ix3>().expect("[C,H,W]");
                    for (row, &(iy, ix)) in locs.iter().enumerate() {
                        for ch in 0..g3.dim().0 {
                            g3[(ch, iy, ix)] += gyv[(row, ch)];
                        }
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::FocalSum { logits, labels, alpha, gamma } => {
                let seed = *gy.iter().next().expect("scalar");
                let lv = self.nodes[logits.0].value.view().into_dimensionality::<Ix2>().expect("[N,C]");
                let mut gl = Array2::<f64>::zeros(lv.dim());
                for i in 0..lv.dim().0 {
                    for c in 0..lv.dim().1 {
                        let positive = labels[i] == c + 1;
                        let (_, dz) = loss::focal_from_logit(lv[(i, c)], positive, *alpha, *gamma);
                        gl[(i, c)] = seed * dz;
                    }
                }
                self.accumulate(*logits, gl.into_dyn());
            }
            Op::PointsLossSum { offsets, base, targets, converter, decode_scale, norm_stride, beta } => {
                let seed = *gy.iter().next().expect("scalar");
                let ov = self.nodes[offsets.0].value.view().into_dimensionality::<Ix2>().expect("[N,18]");
                let conv = self.converter_of(converter);
                let mut g_off = Array2::<f64>::zeros(ov.dim());
                let mut g_log = [0.0, 0.0];
                for (i, target) in targets.iter().enumerate() {
                    let flat: Vec<f64> = (0..ov.dim().1)
                        .map(|j| base[(i, j)] + decode_scale * ov[(i, j)])
                        .collect();
                    let ps = PointSet::from_flat(&flat);
                    let pl = loss::points_loss(&ps, target, &conv, *norm_stride, *beta)
                        .expect("validated earlier");
                    for (k, gp) in pl.g_points.iter().enumerate() {
                        g_off[(i, 2 * k)] += seed * decode_scale * gp[0];
                        g_off[(i, 2 * k + 1)] += seed * decode_scale * gp[1];
                    }
                    g_log[0] += seed * pl.g_log_scales[0];
                    g_log[1] += seed * pl.g_log_scales[1];
                }
                self.accumulate(*offsets, g_off.into_dyn());
                if let LossConverter::Moment { log_scales } = converter {
                    self.accumulate(*log_scales, ndarray::arr1(&g_log).into_dyn());
                }
            }
            Op::SmoothL1Sum { pred, target, beta } => {
                let seed = *gy.iter().next().expect("scalar");
                let pv = self.nodes[pred.0].value.view().into_dimensionality::<Ix2>().expect("[N,K]");
                let mut gp = Array2::<f64>::zeros(pv.dim());
                ndarray::Zip::from(&mut gp).and(&pv).and(target).for_each(|g, &p, &t| {
                    *g = seed * loss::smooth_l1_grad(p - t, *beta);
                });
                self.accumulate(*pred, gp.into_dyn());
            }
            Op::DeformRoiPool { feat, bbox, offsets, gamma } => {
                let c9 = gy.len();
                let g2 = gy
                    .into_shape_with_order((c9 / 9, 9))
                    .expect("pooled grad reshape");
                let ov = &self.nodes[offsets.0].value;
                let mut o = [0.0; 18];
                for (d, s) in o.iter_mut().zip(ov.iter()) {
                    *d = *s;
                }
                let g_off =
                    roi::deform_roi_pool_3x3_backward(&g2, &feat.view(), bbox, &o, *gamma);
                let shape = self.nodes[offsets.0].value.raw_dim();
                let g = ArrayD::from_shape_vec(shape, g_off.to_vec()).expect("offset grad shape");
                self.accumulate(*offsets, g);
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::fd;
    use approx::assert_relative_eq;
    use ndarray::{arr1, Array1, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with(
        rng: &mut ChaCha8Rng,
        shapes: &[(&str, Vec<usize>)],
    ) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, shape) in shapes {
            let v = ArrayD::from_shape_simple_fn(shape.clone(), || rng.gen_range(-0.8..0.8));
            s.add(name, v, true);
        }
        s
    }

    /// Flatten all parameters, run `build` on a perturbed store, return loss.
    fn loss_of(
        store: &ParamStore,
        flat: &[f64],
        build: &dyn Fn(&ParamStore) -> f64,
    ) -> f64 {
        let mut s = store.clone();
        let mut k = 0;
        for i in 0..s.len() {
            let v = s.value_mut(ParamId(i));
            for u in v.iter_mut() {
                *u = flat[k];
                k += 1;
            }
        }
        assert_eq!(k, flat.len());
        build(&s)
    }

    fn flatten_params(store: &ParamStore) -> Vec<f64> {
        store.iter().flat_map(|(_, d)| d.value.iter().copied().collect::<Vec<_>>()).collect()
    }

    fn flatten_grads(store: &ParamStore, grads: &[(ParamId, ArrayD<f64>)]) -> Vec<f64> {
        let map: HashMap<usize, &ArrayD<f64>> = grads.iter().map(|(p, g)| (p.0, g)).collect();
        let mut out = Vec::new();
        for (pid, def) in store.iter() {
            match map.get(&pid.0) {
                Some(g) => out.extend(g.iter().copied()),
                None => out.extend(std::iter::repeat(0.0).take(def.value.len())),
            }
        }
        out
    }

    #[test]
    fn conv_relu_chain_param_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let store = store_with(
            &mut rng,
            &[
                ("w1", vec![3, 2, 3, 3]),
                ("b1", vec![3]),
                ("w2", vec![1, 3, 1, 1]),
                ("b2", vec![1]),
            ],
        );
        let x = Array3::from_shape_simple_fn((2, 5, 5), || rng.gen_range(-1.0..1.0));
        let target = Array2::from_shape_simple_fn((1, 25), || rng.gen_range(-1.0..1.0));
        let build = {
            let x = x.clone();
            let target = target.clone();
            move |s: &ParamStore| -> f64 {
                let mut g = Graph::new();
                let xn = g.constant(x.clone().into_dyn());
                let w1 = g.param(s, s.find("w1").unwrap());
                let b1 = g.param(s, s.find("b1").unwrap());
                let w2 = g.param(s, s.find("w2").unwrap());
                let b2 = g.param(s, s.find("b2").unwrap());
                let h = g.conv2d(xn, w1, Some(b1), 1, 1);
                let h = g.relu(h);
                let y = g.conv2d(h, w2, Some(b2), 1, 0);
                let flat = g.gather_locs(y, (0..5).flat_map(|i| (0..5).map(move |j| (i, j))).collect());
                // squared-error via smooth l1 with huge beta is awkward; use
                // smooth_l1_sum directly as the objective
                let l = g.smooth_l1_sum(flat, target.clone().t().to_owned(), 1.0);
                g.scalar(l)
            }
        };

        // Analytic grads.
        let mut g = Graph::new();
        let xn = g.constant(x.clone().into_dyn());
        let w1 = g.param(&store, store.find("w1").unwrap());
        let b1 = g.param(&store, store.find("b1").unwrap());
        let w2 = g.param(&store, store.find("w2").unwrap());
        let b2 = g.param(&store, store.find("b2").unwrap());
        let h = g.conv2d(xn, w1, Some(b1), 1, 1);
        let h = g.relu(h);
        let y = g.conv2d(h, w2, Some(b2), 1, 0);
        let flat = g.gather_locs(y, (0..5).flat_map(|i| (0..5).map(move |j| (i, j))).collect());
        let l = g.smooth_l1_sum(flat, target.t().to_owned(), 1.0);
        g.backward(&[(l, 1.0)]);
        let analytic = flatten_grads(&store, &g.param_grads());

        let x0 = flatten_params(&store);
        let r = fd::check_gradient(
            |v| loss_of(&store, v, &build),
            &x0,
            &analytic,
            1e-4,
            fd::KinkPolicy::Skip { tol: 0.05 },
        );
        assert!(r.max_rel_err < 1e-6, "{r:?}");
        assert!(r.skipped_fraction() < 0.2, "{r:?}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let store = store_with(&mut rng, &[("w", vec![1, 1, 1, 1])]);
        let mut g = Graph::new();
        let x = g.constant(Array3::from_elem((1, 2, 2), 1.5).into_dyn());
        let w = g.param(&store, ParamId(0));
        let y = g.conv2d(x, w, None, 1, 0);
        let d = g.detach(y);
        let z = g.scale(d, 3.0);
        let flat = g.gather_locs(z, vec![(0, 0)]);
        let l = g.smooth_l1_sum(flat, Array2::zeros((1, 1)), 1.0);
        g.backward(&[(l, 1.0)]);
        assert!(g.param_grads().is_empty(), "gradient crossed a detach");
    }

    #[test]
    fn multi_seed_backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let store = store_with(&mut rng, &[("w", vec![2, 1, 3, 3]), ("b", vec![2])]);
        let x = Array3::from_shape_simple_fn((1, 4, 4), || rng.gen_range(-1.0..1.0));
        let run = |seeds: (f64, f64)| -> Vec<f64> {
            let mut g = Graph::new();
            let xn = g.constant(x.clone().into_dyn());
            let w = g.param(&store, ParamId(0));
            let b = g.param(&store, ParamId(1));
            let y = g.conv2d(xn, w, Some(b), 1, 1);
            let flat = g.gather_locs(y, vec![(0, 0), (1, 2), (3, 3)]);
            let l1 = g.smooth_l1_sum(flat, Array2::zeros((3, 2)), 1.0);
            let r = g.relu(y);
            let flat2 = g.gather_locs(r, vec![(2, 2)]);
            let l2 = g.smooth_l1_sum(flat2, Array2::from_elem((1, 2), 0.3), 0.5);
            g.backward(&[(l1, seeds.0), (l2, seeds.1)]);
            flatten_grads(&store, &g.param_grads())
        };
        let ga = run((1.0, 0.0));
        let gb = run((0.0, 1.0));
        let gc = run((0.7, 1.3));
        for ((a, b), c) in ga.iter().zip(&gb).zip(&gc) {
            assert_relative_eq!(0.7 * a + 1.3 * b, *c, max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn focal_sum_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let store = store_with(&mut rng, &[("w", vec![3, 2, 1, 1]), ("b", vec![3])]);
        let x = Array3::from_shape_simple_fn((2, 2, 3), || rng.gen_range(-2.0..2.0));
        let labels = vec![0, 2, 1, 0, 3, 0];
        let build = {
            let x = x.clone();
            let labels = labels.clone();
            move |s: &ParamStore| -> (Graph, NodeId) {
                let mut g = Graph::new();
                let xn = g.constant(x.clone().into_dyn());
                let w = g.param(s, ParamId(0));
                let b = g.param(s, ParamId(1));
                let y = g.conv2d(xn, w, Some(b), 1, 0);
                let locs: Vec<_> = (0..2).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
                let rows = g.gather_locs(y, locs);
                let l = g.focal_sum(rows, labels.clone(), 0.25, 2.0);
                (g, l)
            }
        };
        let (mut g, l) = build(&store);
        g.backward(&[(l, 1.0)]);
        let analytic = flatten_grads(&store, &g.param_grads());
        let x0 = flatten_params(&store);
        let r = fd::check_gradient(
            |v| {
                loss_of(&store, v, &|s| {
                    let (g, l) = build(s);
                    g.scalar(l)
                })
            },
            &x0,
            &analytic,
            1e-4,
            fd::KinkPolicy::Forbid,
        );
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn points_loss_sum_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        // Offsets come straight from a parameter so the check reaches the op.
        let mut store = ParamStore::new();
        let off = ArrayD::from_shape_simple_fn(vec![2, 18], || rng.gen_range(-0.9..0.9));
        store.add("off", off, false);
        store.add("log_scales", arr1(&[0.1, -0.2]).into_dyn(), false);
        let base = Array2::from_shape_fn((2, 18), |(_, j)| {
            // Spread base points so extrema are unambiguous.
            10.0 + 3.1 * j as f64
        });
        let targets = vec![BBox::new(8.0, 10.0, 60.0, 64.0), BBox::new(12.0, 14.0, 58.0, 66.0)];
        for converter in [true, false] {
            let build = {
                let base = base.clone();
                let targets = targets.clone();
                move |s: &ParamStore| -> (Graph, NodeId) {
                    let mut g = Graph::new();
                    let off = g.param(s, ParamId(0));
                    let conv = if converter {
                        let ls = g.param(s, ParamId(1));
                        LossConverter::Moment { log_scales: ls }
                    } else {
                        LossConverter::PartialMinMax { count: 4 }
                    };
                    let l = g.points_loss_sum(off, base.clone(), targets.clone(), conv, 8.0, 8.0, 1.0 / 9.0);
                    (g, l)
                }
            };
            let (mut g, l) = build(&store);
            g.backward(&[(l, 1.0)]);
            let analytic = flatten_grads(&store, &g.param_grads());
            let x0 = flatten_params(&store);
            let r = fd::check_gradient(
                |v| {
                    loss_of(&store, v, &|s| {
                        let (g, l) = build(s);
                        g.scalar(l)
                    })
                },
                &x0,
                &analytic,
                1e-6,
                fd::KinkPolicy::Skip { tol: 0.05 },
            );
            assert!(r.max_rel_err < 1e-5, "moment={converter}: {r:?}");
            assert!(r.skipped_fraction() < 0.2, "moment={converter}: {r:?}");
        }
    }

    #[test]
    fn deform_roi_pool_op_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut store = ParamStore::new();
        store.add(
            "off",
            ArrayD::from_shape_simple_fn(vec![18], || rng.gen_range(-0.3..0.3)),
            false,
        );
        let feat = Array3::from_shape_simple_fn((2, 9, 9), || rng.gen_range(-1.0..1.0));
        let bbox = BBox::new(1.4, 2.2, 6.9, 7.3);
        let target = Array2::from_shape_simple_fn((1, 18), || rng.gen_range(-0.5..0.5));
        let build = {
            let feat = feat.clone();
            let target = target.clone();
            move |s: &ParamStore| -> (Graph, NodeId) {
                let mut g = Graph::new();
                let off = g.param(s, ParamId(0));
                let pooled = g.deform_roi_pool(feat.clone(), bbox, off, 0.1);
                let flat = g.gather_locs(pooled, vec![(0, 0)]);
                let l = g.smooth_l1_sum(flat, target.clone(), 1.0);
                (g, l)
            }
        };
        let (mut g, l) = build(&store);
        g.backward(&[(l, 1.0)]);
        let analytic = flatten_grads(&store, &g.param_grads());
        let x0 = flatten_params(&store);
        let r = fd::check_gradient(
            |v| {
                loss_of(&store, v, &|s| {
                    let (g, l) = build(s);
                    g.scalar(l)
                })
            },
            &x0,
            &analytic,
            1e-6,
            fd::KinkPolicy::Skip { tol: 0.05 },
        );
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn inference_graph_keeps_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let store = store_with(&mut rng, &[("w", vec![2, 2, 3, 3])]);
        let mut g = Graph::inference();
        let x = g.constant(Array3::from_elem((2, 4, 4), 0.5).into_dyn());
        let w = g.param(&store, ParamId(0));
        let b = g.constant(Array1::<f64>::zeros(2).into_dyn());
        let y = g.conv2d(x, w, Some(b), 1, 1);
        assert!(!g.needs(y));
        assert!(g.param_grads().is_empty());
    }

    #[test]
    fn group_norm_and_upsample_in_graph_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let mut store = ParamStore::new();
        store.add("w", ArrayD::from_shape_simple_fn(vec![4, 2, 3, 3], || rng.gen_range(-0.6..0.6)), true);
        store.add("gamma", ArrayD::from_shape_simple_fn(vec![4], || rng.gen_range(0.6..1.4)), false);
        store.add("beta", ArrayD::from_shape_simple_fn(vec![4], || rng.gen_range(-0.3..0.3)), false);
        let x = Array3::from_shape_simple_fn((2, 3, 3), || rng.gen_range(-1.0..1.0));
        let target = Array2::from_shape_simple_fn((2, 4), || rng.gen_range(-0.8..0.8));
        let build = {
            let x = x.clone();
            let target = target.clone();
            move |s: &ParamStore| -> (Graph, NodeId) {
                let mut g = Graph::new();
                let xn = g.constant(x.clone().into_dyn());
                let w = g.param(s, ParamId(0));
                let ga = g.param(s, ParamId(1));
                let be = g.param(s, ParamId(2));
                let y = g.conv2d(xn, w, None, 1, 1);
                let y = g.group_norm(y, ga, be, 2);
                let y = g.upsample2x(y);
                let rows = g.gather_locs(y, vec![(0, 0), (5, 5)]);
                let l = g.smooth_l1_sum(rows, target.clone(), 2.0);
                (g, l)
            }
        };
        let (mut g, l) = build(&store);
        g.backward(&[(l, 1.0)]);
        let analytic = flatten_grads(&store, &g.param_grads());
        let x0 = flatten_params(&store);
        let r = fd::check_gradient(
            |v| {
                loss_of(&store, v, &|s| {
                    let (g, l) = build(s);
                    g.scalar(l)
                })
            },
            &x0,
            &analytic,
            1e-5,
            fd::KinkPolicy::Skip { tol: 0.05 },
        );
        assert!(r.max_rel_err < 1e-5, "{r:?}");
        assert!(r.skipped_fraction() < 0.2);
    }
}
