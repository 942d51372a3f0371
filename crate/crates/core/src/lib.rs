//! Deterministic simulator for memory-constrained federated learning with
//! progressive block training.
//!
//! The global model is split into contiguous blocks. Each round trains one
//! block behind a frozen prefix, attached to a lightweight output module, with
//! a loss that rewards the block's dependence on both inputs and labels
//! (normalized HSIC). Clients are admitted per round only if their memory
//! capacity covers the analytic footprint of the current stage.

pub mod autodiff;
pub mod config;
pub mod curriculum;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod harmonizer;
pub mod kernel;
pub mod memory;
pub mod model;
pub mod optim;
pub mod report;
pub mod sim;
pub mod tensor;

pub use autodiff::{Graph, NodeId};
pub use error::{Error, Result};
pub use tensor::Tensor;
