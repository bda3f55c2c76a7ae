//! Finite-difference verification suites, runnable from the CLI and reused
//! by the acceptance gate. Each suite draws many random instances of one
//! differentiable building block, compares the analytic gradient against
//! central differences, and reports the worst relative error seen.
//!
//! Geometry-level suites are checked at 1e-4, network-level ops at 1e-3
//! (bilinear sampling makes those only piecewise smooth, so instances either
//! avoid the kinks by construction or skip coordinates straddling one).

use ndarray::{Array2, Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::geometry::{self, BoxConverter, BoxGrad, PointSet};
use crate::kernels::deform;
use crate::oracle::fd::{self, KinkPolicy};
use crate::tape::{Graph, LossConverter, NodeId, ParamId, ParamStore};

pub const GEOMETRY_TOL: f64 = 1e-4;
pub const NETWORK_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub instances: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn pass(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance && self.checked > 0
    }

    /// One human-readable status line.
    pub fn line(&self) -> String {
        format!(
            "{} {:<24} instances {:>4}  coords {:>6} (+{} skipped)  max rel err {:.3e}  tol {:.0e}",
            if self.pass() { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.checked,
            self.skipped,
            self.max_rel_err,
            self.tolerance
        )
    }
}

fn merge(
    name: &'static str,
    tolerance: f64,
    reports: Vec<fd::GradCheckReport>,
) -> SuiteResult {
    let mut out = SuiteResult {
        name,
        instances: reports.len(),
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        tolerance,
    };
    for r in reports {
        out.checked += r.checked;
        out.skipped += r.skipped;
        if r.max_rel_err > out.max_rel_err {
            out.max_rel_err = r.max_rel_err;
        }
    }
    out
}

/// Per-instance RNGs so suites parallelize without reordering draws.
fn instance_rngs(instances: usize, seed: u64, salt: u64) -> Vec<ChaCha8Rng> {
    (0..instances)
        .map(|i| ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64)))
        .collect()
}

/// Point coordinates with every x (and y) pair separated, so min/max argmaxes
/// cannot flip inside the finite-difference step.
fn spaced_points(rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let cand: Vec<f64> = (0..18).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let spaced = |axis: usize| {
            let mut v: Vec<f64> = cand.iter().skip(axis).step_by(2).copied().collect();
            v.sort_by(f64::total_cmp);
            v.windows(2).all(|w| w[1] - w[0] > 1e-2)
        };
        if spaced(0) && spaced(1) {
            return cand;
        }
    }
}

fn converter_scalar(conv: &BoxConverter, flat: &[f64], w: BoxGrad) -> f64 {
    let b = conv.convert(&PointSet::from_flat(flat));
    b.corners().iter().zip(w).map(|(c, wi)| c * wi).sum()
}

fn converter_suite(
    name: &'static str,
    make: impl Fn(&mut ChaCha8Rng) -> BoxConverter + Sync,
    instances: usize,
    seed: u64,
    salt: u64,
) -> SuiteResult {
    let reports: Vec<_> = instance_rngs(instances, seed, salt)
        .into_par_iter()
        .map(|mut rng| {
            let conv = make(&mut rng);
            let flat = spaced_points(&mut rng);
            let w: BoxGrad = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let (gpts, glog) = conv.vjp(&PointSet::from_flat(&flat), w);
            // Points and, for the moment converter, its log scales share one
            // finite-difference pass.
            let moment = matches!(conv, BoxConverter::Moment { .. });
            let mut x: Vec<f64> = flat.clone();
            let mut analytic: Vec<f64> = gpts.iter().flat_map(|p| p.iter().copied()).collect();
            if moment {
                let (lsx, lsy) = match conv {
                    BoxConverter::Moment { log_scale_x, log_scale_y } => (log_scale_x, log_scale_y),
                    _ => unreachable!(),
                };
                x.extend([lsx, lsy]);
                analytic.extend(glog);
            }
            fd::check_gradient(
                |v| {
                    let c = if moment {
                        BoxConverter::Moment { log_scale_x: v[18], log_scale_y: v[19] }
                    } else {
                        conv.clone()
                    };
                    converter_scalar(&c, &v[..18], w)
                },
                &x,
                &analytic,
                1e-5,
                KinkPolicy::Forbid,
            )
        })
        .collect();
    merge(name, GEOMETRY_TOL, reports)
}

fn refine_points_suite(instances: usize, seed: u64) -> SuiteResult {
    let reports: Vec<_> = instance_rngs(instances, seed, 11)
        .into_par_iter()
        .map(|mut rng| {
            let base: Vec<f64> = (0..18).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let stride = [8.0, 16.0, 32.0][rng.gen_range(0..3)];
            let offsets: Vec<f64> = (0..18).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let w: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // d scalar / d offset_j = stride * w_j: the refinement is linear.
            let analytic: Vec<f64> = w.iter().map(|wi| stride * wi).collect();
            let bp = PointSet::from_flat(&base);
            fd::check_gradient(
                |v| {
                    let off: Vec<[f64; 2]> = v.chunks(2).map(|c| [c[0], c[1]]).collect();
                    let out = geometry::refine_points(&bp, &off, stride);
                    out.to_flat().iter().zip(&w).map(|(a, b)| a * b).sum()
                },
                &offsets,
                &analytic,
                1e-5,
                KinkPolicy::Forbid,
            )
        })
        .collect();
    merge("refine_points", GEOMETRY_TOL, reports)
}

fn bilinear_sample_suite(instances: usize, seed: u64) -> SuiteResult {
    let reports: Vec<_> = instance_rngs(instances, seed, 13)
        .into_par_iter()
        .map(|mut rng| {
            let feat = Array3::from_shape_simple_fn((2, 6, 6), || rng.gen_range(-2.0..2.0));
            let c = rng.gen_range(0..2);
            // Keep the sample point inside one bilinear cell: fractional part
            // away from 0/1 so the step cannot cross an integer line.
            let px = rng.gen_range(1.0..4.0) + rng.gen_range(0.2..0.8);
            let py = rng.gen_range(1.0..4.0) + rng.gen_range(0.2..0.8);
            let (_, dpx, dpy) = deform::sample_with_pos_grad(&feat.view(), c, px, py);
            fd::check_gradient(
                |v| deform::bilinear(&feat.view(), c, v[0], v[1]),
                &[px, py],
                &[dpx, dpy],
                1e-5,
                KinkPolicy::Forbid,
            )
        })
        .collect();
    merge("bilinear_sample", GEOMETRY_TOL, reports)
}

struct ParamSpec {
    name: &'static str,
    shape: Vec<usize>,
}

fn store_from_flat(specs: &[ParamSpec], flat: &[f64]) -> ParamStore {
    let mut store = ParamStore::new();
    let mut at = 0;
    for s in specs {
        let len: usize = s.shape.iter().product();
        let arr = ArrayD::from_shape_vec(s.shape.clone(), flat[at..at + len].to_vec())
            .expect("spec shape");
        store.add(s.name, arr, false);
        at += len;
    }
    assert_eq!(at, flat.len());
    store
}

/// FD over every parameter of a small graph built by `build`.
fn graph_fd(
    specs: &[ParamSpec],
    x0: &[f64],
    build: &(dyn Fn(&ParamStore) -> (Graph, NodeId) + Sync),
    step: f64,
    policy: KinkPolicy,
) -> fd::GradCheckReport {
    let store = store_from_flat(specs, x0);
    let (mut g, l) = build(&store);
    g.backward(&[(l, 1.0)]);
    let grads = g.param_grads();
    let mut analytic = vec![0.0; x0.len()];
    let mut at = 0;
    for (i, s) in specs.iter().enumerate() {
        let len: usize = s.shape.iter().product();
        if let Some((_, gr)) = grads.iter().find(|(p, _)| *p == ParamId(i)) {
            analytic[at..at + len].copy_from_slice(gr.as_slice().expect("contiguous grad"));
        }
        at += len;
    }
    fd::check_gradient(
        |v| {
            let s = store_from_flat(specs, v);
            let (g, l) = build(&s);
            g.scalar(l)
        },
        x0,
        &analytic,
        step,
        policy,
    )
}

fn deform_conv_suite(instances: usize, seed: u64) -> SuiteResult {
    let reports: Vec<_> = instance_rngs(instances, seed, 17)
        .into_par_iter()
        .map(|mut rng| {
            let x = Array3::from_shape_simple_fn((1, 4, 4), || rng.gen_range(-1.0..1.0));
            let specs = [
                ParamSpec { name: "w", shape: vec![2, 1, 3, 3] },
                ParamSpec { name: "b", shape: vec![2] },
                ParamSpec { name: "field", shape: vec![18, 4, 4] },
            ];
            let mut x0: Vec<f64> = (0..18 + 2).map(|_| rng.gen_range(-0.8..0.8)).collect();
            // Offsets displace sample points from exact grid positions, so a
            // value near zero sits right on a bilinear cell corner where the
            // kernel is not differentiable; keep a margin around it.
            x0.extend((0..18 * 16).map(|_| {
                let mag = rng.gen_range(0.05..0.45);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            }));
            let target = Array2::from_shape_simple_fn((16, 2), || rng.gen_range(-0.5..0.5));
            let locs: Vec<(usize, usize)> =
                (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).collect();
            let build = move |s: &ParamStore| -> (Graph, NodeId) {
                let mut g = Graph::new();
                let xn = g.constant(x.clone().into_dyn());
                let w = g.param(s, ParamId(0));
                let b = g.param(s, ParamId(1));
                let f = g.param(s, ParamId(2));
                let y = g.deform_conv3x3(xn, w, b, f);
                let rows = g.gather_locs(y, locs.clone());
                let l = g.smooth_l1_sum(rows, target.clone(), 1.0);
                (g, l)
            };
            // Offsets move sample points across bilinear cell boundaries;
            // coordinates straddling one are skipped, the rest must agree.
            graph_fd(&specs, &x0, &build, 1e-4, KinkPolicy::Skip { tol: 0.05 })
        })
        .collect();
    merge("deform_conv3x3", NETWORK_TOL, reports)
}

fn focal_suite(instances: usize, seed: u64) -> SuiteResult {
    let reports: Vec<_> = instance_rngs(instances, seed, 19)
        .into_par_iter()
        .map(|mut rng| {
            let n = rng.gen_range(3..8);
            let c = rng.gen_range(2..5);
            let specs = [ParamSpec { name: "logits", shape: vec![n, c] }];
            let x0: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=c)).collect();
            let alpha = rng.gen_range(0.1..0.5);
            let gamma = [0.0, 1.0, 2.0][rng.gen_range(0..3)];
            let build = move |s: &ParamStore| -> (Graph, NodeId) {
                let mut g = Graph::new();
                let rows = g.param(s, ParamId(0));
                let l = g.focal_sum(rows, labels.clone(), alpha, gamma);
                (g, l)
            };
            graph_fd(&specs, &x0, &build, 1e-4, KinkPolicy::Forbid)
        })
        .collect();
    merge("focal_loss", NETWORK_TOL, reports)
}

fn smooth_l1_suite(instances: usize, seed: u64) -> SuiteResult {
    let reports: Vec<_> = instance_rngs(instances, seed, 23)
        .into_par_iter()
        .map(|mut rng| {
            let n = rng.gen_range(2..6);
            let k = rng.gen_range(1..5);
            let beta = [1.0 / 9.0, 0.5, 1.0][rng.gen_range(0..3)];
            let specs = [ParamSpec { name: "pred", shape: vec![n, k] }];
            let x0: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let target = Array2::from_shape_simple_fn((n, k), || rng.gen_range(-2.0..2.0));
            let build = move |s: &ParamStore| -> (Graph, NodeId) {
                let mut g = Graph::new();
                let rows = g.param(s, ParamId(0));
                let l = g.smooth_l1_sum(rows, target.clone(), beta);
                (g, l)
            };
            // The Huber joint at |d| = beta is only C1; skip coordinates that
            // land on it.
            graph_fd(&specs, &x0, &build, 1e-4, KinkPolicy::Skip { tol: 0.05 })
        })
        .collect();
    merge("smooth_l1", NETWORK_TOL, reports)
}

fn points_loss_suite(instances: usize, seed: u64) -> SuiteResult {
    let reports: Vec<_> = instance_rngs(instances, seed, 29)
        .into_par_iter()
        .map(|mut rng| {
            let n = rng.gen_range(1..4);
            let stride = 8.0;
            let specs = [
                ParamSpec { name: "offsets", shape: vec![n, 18] },
                ParamSpec { name: "log_scales", shape: vec![2] },
            ];
            let mut x0: Vec<f64> = (0..n * 18).map(|_| rng.gen_range(-1.5..1.5)).collect();
            x0.extend([rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)]);
            let base = Array2::from_shape_fn((n, 18), |(_, j)| {
                64.0 + if j % 2 == 0 { rng.gen_range(-16.0..16.0) } else { rng.gen_range(-12.0..12.0) }
            });
            let targets: Vec<_> = (0..n)
                .map(|_| {
                    let cx = rng.gen_range(40.0..88.0);
                    let cy = rng.gen_range(40.0..88.0);
                    geometry::BBox::from_center(cx, cy, rng.gen_range(16.0..48.0), rng.gen_range(16.0..48.0))
                })
                .collect();
            let build = move |s: &ParamStore| -> (Graph, NodeId) {
                let mut g = Graph::new();
                let off = g.param(s, ParamId(0));
                let ls = g.param(s, ParamId(1));
                let conv = LossConverter::Moment { log_scales: ls };
                let l = g.points_loss_sum(
                    off,
                    base.clone(),
                    targets.clone(),
                    conv,
                    stride,
                    stride,
                    1.0 / 9.0,
                );
                (g, l)
            };
            graph_fd(&specs, &x0, &build, 1e-4, KinkPolicy::Skip { tol: 0.05 })
        })
        .collect();
    merge("points_loss_moment", NETWORK_TOL, reports)
}

fn conv_gn_suite(instances: usize, seed: u64) -> SuiteResult {
    let reports: Vec<_> = instance_rngs(instances, seed, 31)
        .into_par_iter()
        .map(|mut rng| {
            let x = Array3::from_shape_simple_fn((2, 4, 4), || rng.gen_range(-1.0..1.0));
            let specs = [
                ParamSpec { name: "w", shape: vec![4, 2, 3, 3] },
                ParamSpec { name: "gamma", shape: vec![4] },
                ParamSpec { name: "beta", shape: vec![4] },
            ];
            let mut x0: Vec<f64> = (0..72).map(|_| rng.gen_range(-0.5..0.5)).collect();
            x0.extend((0..4).map(|_| rng.gen_range(0.5..1.5)));
            x0.extend((0..4).map(|_| rng.gen_range(-0.5..0.5)));
            let target = Array2::from_shape_simple_fn((16, 4), || rng.gen_range(-1.0..1.0));
            let locs: Vec<(usize, usize)> =
                (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).collect();
            let build = move |s: &ParamStore| -> (Graph, NodeId) {
                let mut g = Graph::new();
                let xn = g.constant(x.clone().into_dyn());
                let w = g.param(s, ParamId(0));
                let gamma = g.param(s, ParamId(1));
                let beta = g.param(s, ParamId(2));
                let y = g.conv2d(xn, w, None, 1, 1);
                let y = g.group_norm(y, gamma, beta, 2);
                let y = g.relu(y);
                let rows = g.gather_locs(y, locs.clone());
                let l = g.smooth_l1_sum(rows, target.clone(), 1.0);
                (g, l)
            };
            graph_fd(&specs, &x0, &build, 1e-4, KinkPolicy::Skip { tol: 0.05 })
        })
        .collect();
    merge("conv_groupnorm_relu", NETWORK_TOL, reports)
}

/// Run every suite with `instances` random instances each.
pub fn run_all(instances: usize, seed: u64) -> Vec<SuiteResult> {
    vec![
        converter_suite("converter_minmax", |_| BoxConverter::MinMax, instances, seed, 3),
        converter_suite(
            "converter_partial_minmax",
            |_| BoxConverter::PartialMinMax { count: 4 },
            instances,
            seed,
            5,
        ),
        converter_suite(
            "converter_moment",
            |rng: &mut ChaCha8Rng| BoxConverter::Moment {
                log_scale_x: rng.gen_range(-0.5..0.5),
                log_scale_y: rng.gen_range(-0.5..0.5),
            },
            instances,
            seed,
            7,
        ),
        refine_points_suite(instances, seed),
        bilinear_sample_suite(instances, seed),
        deform_conv_suite(instances, seed),
        focal_suite(instances, seed),
        smooth_l1_suite(instances, seed),
        points_loss_suite(instances, seed),
        conv_gn_suite(instances, seed),
    ]
}
