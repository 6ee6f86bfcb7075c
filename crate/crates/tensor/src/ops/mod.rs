//! Differentiable operations, implemented as methods on [`crate::Var`].

mod conv;
mod elementwise;
mod linear;
mod loss;
mod norm;
mod pool;

pub use conv::ConvGeom;
pub use elementwise::sigmoid;
pub use norm::BatchStats;
