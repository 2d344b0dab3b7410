use thiserror::Error;

use crate::types::SidechainId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("malformed transaction encoding: {0}")]
    MalformedEncoding(String),

    #[error("unknown routing prefix {0:#04x}")]
    UnknownPrefix(u8),

    #[error("transaction type {0} is not assigned to any chain")]
    UnassignedType(String),

    #[error("bad module table: {0}")]
    BadModuleTable(String),

    #[error("score weights must be nonnegative and sum to 1 (got {0}, {1}, {2})")]
    InvalidWeights(f64, f64, f64),

    #[error("cannot rank an empty miner population")]
    EmptyPopulation,

    #[error("class {class} needs {needed} miners but only {available} exist")]
    QuotaInfeasible { class: usize, needed: u64, available: u64 },

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("inconsistent counts: {0}")]
    InvalidCounts(String),

    #[error("no class composition reaches the target failure probability {target:e} (best {best:e})")]
    Infeasible { target: f64, best: f64 },

    #[error("consensus failed on {0}")]
    ConsensusFailure(SidechainId),

    #[error("summary in sync-transaction does not match ledger of {0}")]
    InvalidSummary(SidechainId),

    #[error("epoch {epoch} of {chain} is not confirmed on the mainchain")]
    PruneBeforeConfirm { chain: SidechainId, epoch: u32 },

    #[error("not enough miners for another committee")]
    NoCapacity,

    #[error("all committees of {0} failed this epoch")]
    AllCommitteesExhausted(SidechainId),

    #[error("meta-blocks for unsynced epoch {epoch} of {chain} are missing")]
    MissingMetaBlocks { chain: SidechainId, epoch: u32 },

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("run incomplete: {0}")]
    IncompleteRun(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by user input rather than by the simulator itself.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::BadModuleTable(_)
                | Error::InvalidWeights(..)
                | Error::QuotaInfeasible { .. }
                | Error::InvalidProbability(_)
                | Error::InvalidCounts(_)
                | Error::Infeasible { .. }
                | Error::Io(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
