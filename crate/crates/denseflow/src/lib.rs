//! Unsupervised optical flow with a fully-convolutional DenseNet.
//!
//! The crate is self-contained: a minimal reverse-mode autodiff engine
//! (`tensor`, `tape`), the dense-block encoder/decoder network (`net`),
//! differentiable warping and the photometric reconstruction objective
//! (`loss`), dataset generation and file formats (`data`), the training
//! loop with Adam and checkpointing (`train`), and endpoint-error
//! evaluation (`eval`).

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod net;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
