//! f64 reverse-mode automatic differentiation.

pub mod checkpoint;
pub mod gradcheck;
pub mod store;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, grad_check_model, GradCheckOptions, GradCheckReport};
pub use store::{Optimizer, Param, ParamStore};
pub use tape::{Activation, Tape, TensorId};
pub use tensor::Tensor;
