//! Geometric liveness learning over dense facial-landmark sequences.

pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod hash;
pub mod kernels;
pub mod landmarks;
pub mod metrics;
pub mod optim;
pub mod protocol;
pub mod stgcn;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
