//! Vertical federated learning with few communication rounds: split networks,
//! gradient clustering, tabular semi-supervised learning, the one-shot and
//! few-shot protocols, end-to-end baselines and exact traffic accounting.

pub mod cluster;
pub mod data;
pub mod error;
pub mod experiment;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod protocol;
pub mod report;
pub mod ssl;
pub mod synthetic;

pub use error::{Error, Result};
pub use matrix::Matrix;
