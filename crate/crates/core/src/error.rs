//! Crate-wide error type.
//!
//! Everything fallible in the crate returns [`Result`]. Shape mismatches in
//! graph construction are programmer errors and panic instead (see
//! [`crate::tape`]); the variants here cover conditions that depend on runtime
//! data: bad files, bad configs, numerical blow-ups, and contract violations
//! that a caller can plausibly hit with valid code but invalid inputs.

use std::fmt;
use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All error conditions surfaced by the crate.
#[derive(Debug)]
pub enum Error {
    /// A tensor constructor was handed a buffer whose length does not match
    /// the product of the requested dimensions.
    DataLength { dims: Vec<usize>, expected: usize, got: usize },
    /// A non-finite value (NaN or infinity) appeared where finite data is
    /// required. `context` names the operation or tensor.
    NonFinite { context: String },
    /// The training loss became NaN or infinite; carries enough context to
    /// see which term blew up.
    NanLoss { step: u64, task_loss: f64, reg_value: f64, coefficient: f64 },
    /// Backward was called twice on the same tape, or on a non-scalar loss.
    InvalidBackward { reason: String },
    /// A schedule was constructed with inconsistent endpoints or targets.
    InvalidSchedule { reason: String },
    /// A sparsity target outside [0, 1], or below what is already pruned.
    InvalidSparsityTarget { target: f64, reason: String },
    /// Hard-concrete distribution parameters outside their legal ranges.
    InvalidGateParams { reason: String },
    /// A configuration file or `--set` override failed to parse.
    Config { reason: String },
    /// A configuration key that is not in the known-key table.
    UnknownConfigKey { key: String },
    /// A checkpoint file is malformed: bad magic, bad CRC, truncated, or
    /// an unsupported version.
    Checkpoint { path: PathBuf, reason: String },
    /// A dataset file is malformed (wrong magic, truncated payload) or a
    /// label is out of range.
    DataFormat { path: PathBuf, reason: String },
    /// The requested record or file is missing.
    Missing { what: String },
    /// Optimizer state and parameter shapes disagree, or a step size is
    /// not finite.
    Optimizer { reason: String },
    /// An experiment plan references something that does not exist or
    /// combines options illegally.
    Plan { reason: String },
    /// Wrapper for I/O failures, tagged with the path involved.
    Io { path: PathBuf, source: std::io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DataLength { dims, expected, got } => write!(
                f,
                "data length {got} does not match dims {dims:?} (expected {expected})"
            ),
            Error::NonFinite { context } => {
                write!(f, "non-finite value encountered in {context}")
            }
            Error::NanLoss { step, task_loss, reg_value, coefficient } => write!(
                f,
                "loss became non-finite at step {step} \
                 (task loss {task_loss}, regularizer {reg_value}, coefficient {coefficient})"
            ),
            Error::InvalidBackward { reason } => write!(f, "invalid backward call: {reason}"),
            Error::InvalidSchedule { reason } => write!(f, "invalid schedule: {reason}"),
            Error::InvalidSparsityTarget { target, reason } => {
                write!(f, "invalid sparsity target {target}: {reason}")
            }
            Error::InvalidGateParams { reason } => write!(f, "invalid gate parameters: {reason}"),
            Error::Config { reason } => write!(f, "config error: {reason}"),
            Error::UnknownConfigKey { key } => write!(f, "unknown config key `{key}`"),
            Error::Checkpoint { path, reason } => {
                write!(f, "bad checkpoint {}: {reason}", path.display())
            }
            Error::DataFormat { path, reason } => {
                write!(f, "bad data file {}: {reason}", path.display())
            }
            Error::Missing { what } => write!(f, "missing: {what}"),
            Error::Optimizer { reason } => write!(f, "optimizer error: {reason}"),
            Error::Plan { reason } => write!(f, "invalid experiment plan: {reason}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
