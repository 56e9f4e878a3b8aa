//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Values are f64 throughout. Inference paths use plain [`Tensor`] ops and
//! the raw kernels; training records primitives on a [`Tape`] and calls
//! [`Tape::backward`]. Gradients are overwritten on every backward call,
//! never accumulated across calls.

pub(crate) mod kernels;

mod adam;
mod grad_check;
mod tape;
mod tensor;

pub use adam::Adam;
pub use grad_check::grad_check;
pub use tape::{NodeId, Pick, Tape};
pub use tensor::{cross_entropy, CeLoss, Tensor};
