//! Tensor engine and network components for thin-structure segmentation.

pub mod attention;
pub mod checkpoint;
pub mod dsconv;
pub mod encoder;
mod error;
pub mod gradcheck;
mod graph;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
mod params;
mod scalar;
mod tensor;
pub mod train;
pub mod suite;
pub mod transformer;

pub use error::{Error, Result};
pub use graph::{BackwardOp, Gradients, Graph, NodeId};
pub use params::{ParamBuilder, ParamStore};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
