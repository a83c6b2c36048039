use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid packet spec: {0}")]
    InvalidPacketSpec(String),

    #[error("invalid order {order} for {n} recipients")]
    InvalidOrder { order: u32, n: u32 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("member {user} not in group {group}")]
    MemberNotInGroup { user: u64, group: u64 },

    #[error("power iteration did not converge within {0} iterations")]
    NonConvergence(usize),

    #[error("unknown reference: {0}")]
    UnknownReference(String),

    #[error("no identifying variation: {0}")]
    Unidentified(String),

    #[error("collinear regressors: {0}")]
    Collinear(String),

    #[error("bootstrap unstable: {skipped} of {total} replicates had no identifying variation")]
    BootstrapUnstable { skipped: usize, total: usize },

    #[error("empty sample: {0}")]
    EmptySample(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
