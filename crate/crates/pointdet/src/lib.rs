//! Anchor-free object detection with adaptive point sets, on the CPU.
//!
//! Objects are represented as small ordered sets of sample points that are
//! learned end-to-end: a converter collapses each set to a pseudo box for
//! supervision and evaluation, while the points themselves steer deformable
//! feature sampling in the detection head. The crate carries the whole
//! pipeline — differentiable geometry, a tape-based autodiff core, a small
//! FPN detector, synthetic scene generation, COCO-style evaluation, and a
//! translation-sensitivity study — with no ML framework underneath.

pub mod assign;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod geometry;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod oracle;
pub mod study;
pub mod tape;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
