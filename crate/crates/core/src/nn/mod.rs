//! Minimal convolutional building blocks with reverse-mode gradients.

pub mod adam;
pub mod conv;
pub mod graph;

pub use adam::Adam;
pub use conv::{Conv2d, ConvGrad};
pub use graph::{Eager, Exec, Gradients, Tape, Var};
