//! Scores, classes, VRF sortition and committee failure analysis.

pub mod analysis;
pub mod score;
pub mod sortition;
pub mod vrf;

pub use analysis::{
    autorecovery_failure, chainscale_autorecovery_bound, committee_failure_exact_hypergeometric,
    committee_failure_weighted, derive_quotas,
};
pub use score::{assign_class, assign_classes, compute_score, ScoreWeights};
pub use sortition::{elect, verify_election, ClassQuota, ElectionMode, ElectionResult, Seating, SlotId};
pub use vrf::{vrf_verify, VrfKeypair, VrfOutput};
