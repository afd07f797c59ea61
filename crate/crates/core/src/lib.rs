//! Non-causal state space duality kernels and the VSSD vision backbone.
//!
//! The crate is layered bottom-up: dense tensors with a reverse-mode tape,
//! causal SSD reference forms, the non-causal kernels, the backbone built on
//! them, a small training harness, analysis probes and a benchmark harness.

// `!(x > 0)` style guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod bench;
pub mod check;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod model;
pub mod ncssd;
pub mod ops;
pub mod parallel;
pub mod rng;
pub mod ssd;
pub mod tensor;
pub mod train;

pub use autodiff::{Grads, Tape, Var};
pub use element::{DType, Element};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
