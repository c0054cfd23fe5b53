use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Non-finite logits or other values that cannot be mapped onto a simplex.
    #[error("parametrization error: {0}")]
    Parametrization(String),

    /// The first logit of a softmax row was not pinned to zero.
    #[error("constraint violated: {0}")]
    Constraint(String),

    /// Malformed caller input (bad simplex, wrong shape, symbol out of range).
    #[error("invalid input: {0}")]
    Input(String),

    /// Brute-force enumeration would exceed the size guard.
    #[error("enumeration guard exceeded: {states}^{len} sequences > {limit}")]
    Guard { states: usize, len: usize, limit: usize },

    /// A reference computation produced a non-finite value.
    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("time index {t} out of range 1..={horizon}")]
    TimeIndex { t: usize, horizon: usize },

    #[error("horizon mismatch: history has {history}, observations have {observations}")]
    Horizon { history: usize, observations: usize },

    /// Attempt to overwrite a block that is frozen at the current horizon.
    #[error("block {t} is frozen at horizon {horizon}")]
    Frozen { t: usize, horizon: usize },

    #[error("at tau={tau}: {source}")]
    Stream {
        tau: usize,
        #[source]
        source: Box<Error>,
    },
}
