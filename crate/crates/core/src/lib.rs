//! Deterministic federated learning simulator for heterogeneous, long-tailed
//! client data.
//!
//! Clients train a small feed-forward classifier with knowledge distillation
//! from a frozen vision-language teacher and upload per-class classifier
//! gradients. The server averages models, synthesizes a balanced bank of
//! federated features by gradient matching plus prototype contrastive
//! learning, and retrains its classifier on that bank. FedAvg and ablations
//! run through the same round loop.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod client;
pub mod data;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod server;
pub mod synthesis;
pub mod teacher;

pub use error::{Error, Result};
