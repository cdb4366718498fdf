//! Parties, messages and orchestration of the federated protocols.

mod client;
mod config;
mod ledger;
mod runner;
mod server;

pub use client::{Client, ExpandedSet, ExpansionSummary, RepSet};
pub use config::{derive_seed, ProtocolConfig};
pub use ledger::{CommLedger, Direction, Message, Party, Payload, PayloadRole};
pub use runner::{
    client_extract, client_extract_many, server_partial_grads, ClientDiagnostics, CurvePoint,
    EvalMetrics, EvalSet, ExpansionInfo, Federation, StageTiming,
};
pub use server::{inclusion_probability, sdpa_estimate, sdpa_weights, Server};
