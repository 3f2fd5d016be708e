//! Minimal dense-tensor kernel with reverse-mode differentiation.
//!
//! Networks are expressed as eager operations on a [`Graph`]; parameters live
//! in a [`ParamStore`] and are updated by [`Adam`]. Tests run at `f64`,
//! training at `f32`; checkpoints are always stored as `f32`.

mod adam;
pub mod checkpoint;
mod conv;
mod error;
pub mod gradcheck;
mod graph;
mod param;
mod scalar;
mod tensor;

pub use adam::Adam;
pub use error::{Error, Result};
pub use graph::{Bound, ConvAttrs, Graph, Var};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;
