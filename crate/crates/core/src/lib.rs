//! Simulator and analysis library for a functionality-sharded sidechain
//! protocol, instantiated for a file-storage market.

pub mod baselines;
pub mod chains;
pub mod config;
pub mod election;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod orchestrator;
pub mod recovery;
pub mod seed;
pub mod traffic;
pub mod types;

pub use error::{Error, Result};
pub use exec::Exec;
