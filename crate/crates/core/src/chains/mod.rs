//! Mainchain and module sidechain engines.

pub mod mainchain;
pub mod sidechain;
pub mod subchains;
pub mod summary;

pub use mainchain::{BlockOutcome, LedgerState, Mainchain, RolledBack, StateVars};
pub use sidechain::{
    validate_tx, ChainStatus, LedgerDelta, MaliciousStrategy, ModuleLedger, ReadLog, SidechainState, StateSource,
    TickContext, TickEvent, TickOutput, ValidationView,
};
pub use subchains::{allocate_subchains, detect_heavy, elect_sync_committee, route_to_subchain, SubchainGrant, SubchainRequest};
pub use summary::{create_sync_tx, produce_summary_block, verify_sync_tx};
