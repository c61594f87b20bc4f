//! Differentiable primitives recorded on a [`Graph`](crate::Graph).

mod activation;
mod arith;
mod conv;
mod linear;
mod loss;
mod pool;
mod shape;
mod snake;

pub use activation::Activation;
pub use loss::{loss_components, LossComponents, DICE_EPS};
pub use pool::PoolKind;
pub use snake::{bilinear_at, bilinear_sample, iterate_chain, CHAIN_LEN, COORD_CHANNELS, STEP_CHANNELS};

use crate::{Error, Result, Shape};

pub(crate) fn same_dims(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a.same_dims(&b) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { op, lhs: a, rhs: b })
    }
}
