//! Crate-wide error type.

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Non-finite value detected where finite data is required.
    #[error("numeric error in {context}: non-finite value encountered")]
    NonFinite { context: String },

    /// An operation was called outside its contract.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Too few timepoints or samples for the requested computation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A region's time series has zero variance.
    #[error("degenerate series: region {region} has zero variance in window {window}")]
    DegenerateSeries { region: usize, window: usize },

    /// A graph row has no nonzero entries, so degree normalization is undefined.
    #[error("degenerate graph: node {node} has zero degree")]
    DegenerateGraph { node: usize },

    /// A system label not present in the atlas vocabulary.
    #[error("unknown system label {label:?} for region {region}")]
    UnknownSystem { region: String, label: String },

    /// A class is too small to stratify into the requested number of folds.
    #[error("stratification error: class {class} has {count} members, need at least {k}")]
    Stratification { class: u8, count: usize, k: usize },

    /// Training produced a non-finite loss.
    #[error("divergence at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    /// Metric undefined for the given labels.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Invalid configuration value.
    #[error("config error for key {key:?}: {detail}")]
    Config { key: String, detail: String },

    /// Malformed input file (CSV, cache, or checkpoint).
    #[error("parse error in {what}: {detail}")]
    Parse { what: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }

    pub(crate) fn parse(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Parse { what, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
