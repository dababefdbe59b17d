//! Dense f64 tensors with reverse-mode automatic differentiation, the Adam
//! optimizer, gradient checking, and a named-tensor container format.

pub mod adam;
pub mod container;
pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use adam::{LrSchedule, OptimizerState};
pub use container::TensorContainer;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
