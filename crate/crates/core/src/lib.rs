//! Pseudo shifted window attention (PSWA) for diffusion transformers.
//!
//! The crate is a CPU reference implementation in `f64`:
//!
//! * [`numerics`]: tensors, kernels, a reverse-mode tape and gradient checks.
//! * [`attention`]: full and windowed multi-head self-attention with a
//!   relative position bias, plus a masked dense oracle.
//! * [`pswa`]: the two-branch PSWA block, progressive channel allocation
//!   schedules and Kth-order neighbourhood similarity.
//! * [`diagnostics`]: attention distance, radial spectra and FLOPs accounting.
//! * [`model`]: a small isotropic Swin-DiT.
//! * [`diffusion`]: DDPM noise schedule, toy dataset, training and sampling.
//! * [`checks`]: the gradient-check suites.
//! * [`experiment`]: run configuration and the seeded run protocol.

pub mod attention;
pub mod checks;
pub mod diagnostics;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod pswa;

pub use error::{Error, Result};
pub use numerics::{Graph, Rng, Tensor, Var};
