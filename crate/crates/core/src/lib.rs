//! Co-learning multi-modality fusion CNN for PET-CT region detection and
//! segmentation, with fusion baselines, a synthetic phantom pipeline and the
//! evaluation suite, on a small self-contained tensor/autograd core.
// `!(x > y)` style comparisons are used on purpose so NaN fails checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod commands;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion_maps;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod ops;
pub mod params;
pub mod phantom;
pub mod tensor;
pub mod training;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use params::{Mode, ModelParams, Parameter};
pub use tensor::Tensor;
