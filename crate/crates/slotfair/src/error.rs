use thiserror::Error;

/// Errors shared across the crate.
///
/// Every failure mode of the allocation procedures and verifiers maps to one
/// variant here, so callers (and the CLI) can translate outcomes into stable
/// exit codes.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("rank {rank} out of range: schedule has only {len} members")]
    RankOutOfRange { rank: u64, len: u64 },

    #[error("subset precheck failed: candidate is not contained in the ambient schedule")]
    NotASubset,

    #[error("target value {target} lies outside [0, mass of source]")]
    TargetOutOfRange { target: String },

    #[error("cut precondition unverified: {0}")]
    PreconditionUnverified(String),

    #[error("certified divisibility {have} below required level {need}")]
    InsufficientDivisibility { have: String, need: String },

    #[error("density length {length} exceeds divisibility level {level} + 1")]
    BoundViolation { length: u64, level: String },

    #[error("insufficient patience: {detail}")]
    InsufficientPatience { detail: String },

    #[error("utility for agent {0} is not monotonic")]
    NotMonotonic(String),

    #[error("comparison undecided at working precision: {0}")]
    UndecidedAtPrecision(String),

    #[error("claimed reordering does not match the economy: {0}")]
    NotAReordering(String),

    #[error("tower exponent too large for numeric evaluation (agents = {0})")]
    TowerTooLarge(u64),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("lazy schedule exhausted its materialized horizon at slot {0}")]
    HorizonExhausted(u64),
}

pub type Result<T> = std::result::Result<T, Error>;
