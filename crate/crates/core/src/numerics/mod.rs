//! Dense tensors, differentiable primitives, the operation tape, and the
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod init;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use init::Init;
pub use ops::{Activation, Op};
pub use params::{trainable_values, Binder, BoundParam};
pub use tape::{Dual, Gradients, Tape, Var};
pub use tensor::Tensor;
