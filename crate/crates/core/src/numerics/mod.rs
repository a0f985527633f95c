//! Dense tensors, the differentiable primitives the model is built from, and
//! the finite-difference gradient oracle.

mod gradcheck;
mod ops;
mod params;
mod rng;
mod tape;
pub(crate) mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{sigmoid, silu_scalar, softplus_inverse, softplus_scalar};
pub use params::{Param, ParamStore};
pub use rng::SeedRng;
pub use tape::{BackwardCtx, Gradients, Tape, Var};
pub use tensor::Tensor;
