use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("{invalid} of {total} lines failed the schema (first failure at line {first_line}: {first_reason}); wrong schema?")]
    MostlyInvalid {
        invalid: usize,
        total: usize,
        first_line: usize,
        first_reason: String,
    },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("symbol {symbol} out of range for a model with {n_symbols} symbols")]
    SymbolOutOfRange { symbol: usize, n_symbols: usize },

    #[error("total log-likelihood decreased from {before} to {after} at iteration {iteration}")]
    LikelihoodDecreased {
        iteration: usize,
        before: f64,
        after: f64,
    },

    #[error("unknown format: {0}")]
    UnknownFormat(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
