//! Minimal reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! A [`Tape`] records operations eagerly; [`Tape::backward`] sweeps it once in
//! reverse. Network parameters live in a [`ParamStore`] and are bound onto a
//! fresh tape every step. Matrix products go through `matrixmultiply`.

mod float;
pub mod kernels;
mod layers;
mod params;
mod tape;
mod tensor;

pub use float::Float;
pub use layers::{Conv, Dense, UpConv};
pub use params::{read_records, Adam, Bound, ParamId, ParamStore, WeightFileError};
pub use tape::{CustomOp, Grads, Tape, Var};
pub use tensor::Tensor;
