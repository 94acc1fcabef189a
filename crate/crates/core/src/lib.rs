//! Desk-scale simulator for federated ensemble transfer: small heterogeneous
//! client models train on non-IID shards, and a larger server model learns
//! from their variance-weighted consensus on an unlabelled public set.

pub mod bounds;
pub mod checkpoint;
pub mod cli;
pub mod client;
pub mod config;
pub mod datasets;
pub mod error;
pub mod model;
pub mod numerics;
pub mod orchestrator;
pub mod rng;
pub mod server;

pub use error::{FedError, Result};
