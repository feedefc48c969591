//! Forward and backward kernels of the layer primitives.

pub mod conv;
pub mod pointwise;
pub mod spatial;
