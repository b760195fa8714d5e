//! Differentiable dense-array substrate: forward operations, reverse-mode
//! gradient propagation, and a finite-difference verification oracle.

mod backward;
pub mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck, MAX_COORDS_PER_PARAM};
pub use params::{ParamEntry, ParamId, ParamSet};
pub use tape::{BnRunning, MaskBoundary, Op, Tape, ValueId, BN_EPS, BN_MOMENTUM};
pub use tensor::{strides_of, Element, Tensor};
