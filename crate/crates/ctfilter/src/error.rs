//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants distinguish the
//! failure classes callers react to differently: malformed models or shapes
//! (programming/config errors), numerical breakdowns (singular matrices,
//! NaNs from user callbacks), statistically degenerate states (zero-likelihood
//! observations, collapsed particle ensembles), and I/O.

use thiserror::Error;

/// Errors produced by models, simulators, filters, and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Array or matrix dimensions do not match the operation's contract.
    #[error("dimension mismatch: {0}")]
    Shape(String),

    /// A model violates its construction invariants.
    #[error("invalid model: {0}")]
    Model(String),

    /// A numerical operation failed (singular matrix, NaN from a callback,
    /// stability bound violated).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An observation has zero probability under the current belief.
    #[error("zero-likelihood observation: {0}")]
    ZeroLikelihood(String),

    /// Every particle weight underflowed or every particle sits at zero rate
    /// during an event.
    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(String),

    /// A scenario configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem failure while reading configs or writing outputs.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// CSV write failure.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True when the error stems from user-supplied configuration rather
    /// than a runtime failure; the CLI maps this distinction onto exit codes.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Model(_) | Error::Shape(_))
    }
}
