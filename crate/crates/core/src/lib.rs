//! Implicit graph neural networks with quantum-injected equilibrium operators.

pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod lipschitz;
pub mod model;
pub mod operators;
pub mod quantum;
pub mod solver;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use operators::Pathway;
pub use tensor::Tensor;
