//! Grid-level sparse mixture-of-experts routing with a dynamic submodule
//! learning-rate governor, plus a small synthetic multi-modality training
//! harness that exercises both.
//!
//! - [`tensor`]: dense `f64` tensors and a reverse-mode tape.
//! - [`moe`]: cosine-gated top-k routing over per-position experts.
//! - [`dso`]: EMA loss tracking and per-group learning-rate multipliers.
//! - [`harness`]: synthetic data, the shared-trunk model and the training loop.

pub mod dso;
pub mod harness;
pub mod moe;
pub mod tensor;

pub use tensor::{Tape, Tensor, TensorError, Var};
