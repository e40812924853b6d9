use thiserror::Error;

/// Errors produced by the model, estimation and pipeline layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the support or parameter space.
    #[error("domain error: {0}")]
    Domain(String),

    /// The data carry no information about the requested parameters.
    #[error("not estimable: {0}")]
    NotEstimable(String),

    /// Too few cells survive tail merging for a chi-square test.
    #[error("not testable: {cells} cell(s) after merging, {df} degree(s) of freedom")]
    NotTestable { cells: usize, df: i64 },

    /// A computation underflowed, overflowed or produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Inconsistent configuration (log format, window spec, ...).
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
