//! Dense tensors, deterministic RNG and a recording gradient tape.

pub mod gradcheck;
pub mod io;
pub mod ops;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_inputs, GradcheckOptions, GradcheckReport};
pub use rng::{Rng, RngState};
pub use tape::{FlopCategory, Gradients, Graph, Var};
pub use tensor::Tensor;
