//! Dense tensors and a reverse-mode gradient tape, sized for training small
//! diffusion denoisers on a CPU.
//!
//! The pieces:
//!
//! * [`Tensor`]: a row-major value with an optional accumulated gradient.
//! * [`Tape`]: records operations on [`Var`] handles and runs the reverse sweep.
//! * [`ParamStore`]: named model parameters, bound onto a tape per forward pass.
//! * [`Adam`] and [`ema_update`]: the optimizer and weight averaging.
//!
//! Broadcasting is limited to dropping the leading batch dimension of the
//! right-hand operand; every other shape must match exactly.

mod conv;
mod error;
mod float;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::TensorError;
pub use float::Float;
pub use optim::{ema_update, Adam};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
