use alloc::string::String;

/// Errors raised by the estimation library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SnmError {
    /// Invalid configuration: count cutoffs, template ranges, trainer
    /// settings, metafeature flags, vocabulary mismatch.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed or inconsistent input data.
    #[error("input error: {0}")]
    Input(String),
    #[error("position {position} out of range for sentence of length {len}")]
    Index { position: usize, len: usize },
    #[error("unknown {kind}: {key}")]
    Lookup { kind: &'static str, key: String },
    /// An argument outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("rate undefined: no predicted tokens")]
    UndefinedRate,
    /// The target received zero score, so the Poisson loss is infinite.
    #[error("infinite loss: target {target} has zero score")]
    InfiniteLoss { target: u32 },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = SnmError> = core::result::Result<T, E>;
