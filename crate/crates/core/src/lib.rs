//! Trainable spiking transformer with bidirectional temporal fusion: a
//! forward exponential-moving-average temporal mask inside attention, a
//! backward gated-recurrence MLP, LIF neurons with surrogate gradients, four
//! spike encoders, and baseline spiking-attention variants.

pub mod attention;
pub mod data;
pub mod encoders;
pub mod error;
pub mod neurons;
pub mod numerics;
pub mod gradcheck_model;
pub mod layers;
pub mod model;
pub mod tea;
pub mod training;
pub mod tmlp;

pub use error::{Error, Result};
