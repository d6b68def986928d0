//! Dense tensors and a caller-scoped tape for reverse-mode automatic
//! differentiation, including gradient-of-gradient for input-gradient
//! penalties.

mod check;
mod error;
pub mod kernels;
mod op;
mod scalar;
mod tape;
mod tensor;

pub use check::gradient_check;
pub use error::{Error, Result};
pub use kernels::{Conv2dGeom, Interp};
pub use op::Op;
pub use scalar::{DType, Scalar};
pub use tape::{GradMode, Gradients, Tape, Var};
pub use tensor::{numel, Tensor};
