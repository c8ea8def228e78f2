//! Deterministic simulator for federated and split-learning training.
//!
//! The crate covers a small neural-network engine with exact backprop
//! ([`nn`]), heterogeneous data partitioning ([`partition`]), the
//! institution/server boundary with exact communication accounting
//! ([`federation`]), the training strategies ([`strategies`]), metrics and
//! result emission ([`metrics`]) and the experiment runner behind the CLI
//! ([`experiment`]).

pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod partition;
pub mod rng;
pub mod strategies;
pub mod tensor;

pub use error::{FedError, Result};
pub use tensor::Tensor;
