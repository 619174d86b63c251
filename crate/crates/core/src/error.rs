//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Log-weights that cannot be normalized: all `-inf`, or any `NaN`/`+inf`.
    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    /// An argument outside the operation's domain (bad `t`, bad shape, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Vector arguments whose lengths disagree.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Velocity coefficients requested at an interpolant endpoint.
    #[error("interpolant velocity is singular at t = {0}; integrate strictly inside (0, 1)")]
    SingularTime(f64),

    /// A particle position or weight became non-finite during a run.
    #[error("non-finite value for particle {particle} at step {step}")]
    NonFinite { particle: usize, step: usize },

    /// All kernel responsibilities underflowed while estimating a velocity.
    #[error("velocity degeneracy at t = {t} (test point norm {x_norm})")]
    VelocityDegeneracy { t: f64, x_norm: f64 },

    /// Pooled sample had no spread, so no kernel bandwidth exists.
    #[error("bandwidth degenerate: median pairwise distance is zero")]
    BandwidthDegenerate,

    /// Invalid or inconsistent experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
