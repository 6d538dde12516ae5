//! Reverse-mode autodiff, a finite-difference gradient checker, and Adam.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{gradcheck, DEFAULT_STEP};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

