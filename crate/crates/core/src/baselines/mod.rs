//! Comparison systems: one all-services sidechain and a state-sharded chain.

pub mod sharded;
pub mod single;
