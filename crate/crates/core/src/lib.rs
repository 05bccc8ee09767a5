//! Compressed-sensing reconstruction with generative priors.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`rng`], [`autodiff`], [`mlp`], [`adam`], [`weights`]: the
//!   numeric substrate (dense f64 tensors, a tape-based reverse-mode engine,
//!   multilayer perceptrons with input-side conditioning, Adam, and the
//!   `GPCS` weights format).
//! * [`sensing`]: Gaussian measurement operators, exact-SNR noise and the
//!   linear forward model `y = A x + e`.
//! * [`data`]: IDX ingestion, normalisation, batching and a synthetic linear
//!   manifold with closed-form projection oracles.
//! * [`training`]: minimax (conditional) GAN, conditional BEGAN and
//!   pseudo-inverse network fitting.
//! * [`solvers`]: projected gradient descent with a latent-space inner loop
//!   and its network-projected variant.
//! * [`metrics`]: MSE, residual, SNR, SSIM/MSSIM and empirical certificates
//!   (REC, S-REC, approximate-projector slack, linear-convergence bound).

pub mod adam;
pub mod autodiff;
pub mod data;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod mlp;
pub mod rng;
pub mod sensing;
pub mod solvers;
pub mod tensor;
pub mod training;
pub mod weights;

pub use adam::{AdamConfig, AdamState};
pub use autodiff::{Gradients, Tape, Var};
pub use mlp::{Activation, MlpNetwork};
pub use rng::Rng;
pub use sensing::{MeasurementOperator, NoiseSpec};
pub use tensor::{Tensor, TensorError};
