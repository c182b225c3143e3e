//! Dynamical low-rank training (DLRT) for feed-forward and convolutional networks.
//!
//! Weight matrices of low-rank layers are stored as `U S Vᵀ` with orthonormal `U`, `V`
//! and a small core `S`. One training step integrates the K (`U S`), L (`V Sᵀ`) and S
//! factors with a rank-adaptive KLS integrator, so neither training nor inference ever
//! materializes a full weight matrix.
//!
//! Module map:
//!
//! - [`linalg`]: row-major `f64` matrices, products, Householder QR, Jacobi SVD.
//! - [`netcore`]: network assembly, forward pass, cross-entropy, dense backprop.
//! - [`dlrt`]: low-rank factors, factor gradients, the KLS step, truncation, accounting.
//! - [`optim`]: Euler (SGD) and Adam one-step integrators with per-tensor state.
//! - [`conv`]: im2col unfolding, factored convolution, max pooling, the LeNet5 preset.
//! - [`data`]: MNIST IDX loading, seeded splits and batching.

pub mod conv;
pub mod data;
pub mod dlrt;
pub mod linalg;
pub mod netcore;
pub mod optim;
pub mod rng;

mod error;

pub use error::{Error, Result};
pub use linalg::Matrix;
