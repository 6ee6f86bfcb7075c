//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Values live on a [`Tape`]; every op on a [`Var`] records a closure that
//! maps the output gradient back to its inputs. Convolutions go through
//! im2col and a blocked GEMM, which keeps single-core training usable.
//! Model weights sit in a [`ParamStore`] that is read-only during a forward
//! pass, so the same store can serve any number of tapes.

mod element;
pub mod gradcheck;
pub mod io;
pub mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use element::{gemm, Element};
pub use optim::{Adam, AdamConfig};
pub use params::{init, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
