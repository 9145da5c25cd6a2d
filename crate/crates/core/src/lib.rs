//! Latent Mamba operator toolkit: tensors with reverse-mode
//! differentiation, selective state-space scans, the latent operator
//! architecture, synthetic PDE data and training.

pub mod arch;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Tape, Var};
pub use tensor::{Rng, Scalar, Tensor, TensorError};
