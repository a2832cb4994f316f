//! Error taxonomy shared by every module; the CLI maps variants to exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inputs outside a kernel's mathematical domain (non-finite, a <= 0, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Caller broke a shape or consistency contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Structurally invalid data (duplicate ids, non-binary responses, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Malformed jsonlines input; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Training produced a non-finite objective or runaway parameters. Carries
    /// the loss trace up to the failing epoch so the run remains diagnosable.
    #[error("training diverged at epoch {epoch}: objective or parameters blew up")]
    Divergence { epoch: usize, trace: Vec<f64> },

    /// M-step Newton failed to settle for one item within the safeguard budget.
    #[error("m-step did not converge for item index {item}")]
    MStepNonConvergence { item: usize },

    #[error("unknown model '{name}'; registered models: {available}")]
    UnknownModel { name: String, available: String },

    #[error("model '{0}' is already registered")]
    DuplicateModel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
