//! Transformer-based deep hashing for image retrieval.
//!
//! The crate covers the full pipeline at desk scale: a from-scratch tensor
//! library with reverse-mode autodiff, a vision-transformer backbone with a
//! dual-stream (global + local) hash head, Cauchy-Bayesian pairwise training,
//! and a packed-bit Hamming retrieval engine with evaluation metrics.
//!
//! See the `thash` binary for the command-line surface.

pub mod backbone;
pub mod data;
pub mod dual_stream;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod retrieval;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorId};
