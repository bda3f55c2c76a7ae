//! Low-level numeric kernels (forward + hand-written backward passes).

pub mod conv;
pub mod deform;
pub mod roi;
