//! Multi-task loss weighting on small hard-parameter-sharing networks.
//!
//! The crate is `no_std` (it needs `alloc`) and covers the numeric side:
//! a reverse-mode tape, the shared-trunk network, synthetic task families,
//! the weighting strategies, training, and evaluation. File formats and the
//! command line live in the `autolambda` crate.
#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod grouping;
pub mod metrics;
pub mod network;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod weighting;

pub use error::{AutodiffError, MetricError, NetworkError, TaskError, TensorError, TrainError, WeightingError};
pub use tensor::Tensor;
