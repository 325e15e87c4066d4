//! Dense-tensor reverse-mode automatic differentiation.
//!
//! Values live in `f64` throughout. A [`Tape`] records each op as it is
//! evaluated; [`Tape::backward`] then returns gradients for every node that
//! depends on a variable or parameter leaf.

mod attention;
mod backward;
pub mod checkpoint;
mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;
mod tensor;

pub use attention::multi_head_self_attention;
pub use backward::Gradients;
pub use gradcheck::{grad_check, FD_STEP};
pub use params::{Adam, Param, ParamStore};
pub use tape::{GatherPoint, Tape, Var};
pub use tensor::Tensor;
