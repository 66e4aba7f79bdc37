//! Error type shared across the crate.

use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("non-positive or non-finite close {value} on {date} for {ticker}")]
    BadClose {
        date: NaiveDate,
        ticker: String,
        value: f64,
    },

    #[error("interior missing close for {ticker} on {date} (listed {first} .. {last})")]
    InteriorGap {
        ticker: String,
        date: NaiveDate,
        first: NaiveDate,
        last: NaiveDate,
    },

    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("date {0} is not in the trading calendar")]
    UnknownDate(NaiveDate),

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("insufficient warm-up: range starts at date index {available}, needs at least {required} prior dates")]
    InsufficientWarmup { required: usize, available: usize },

    #[error("empty return series")]
    EmptySeries,

    #[error("series too short: need at least {needed} observations, got {got}")]
    SeriesTooShort { needed: usize, got: usize },

    #[error("zero volatility in training returns; scale factor undefined")]
    ZeroVolatility,

    #[error("panel has no volume data; supply an ADV model (median dollar volume per name)")]
    MissingVolume,

    #[error("window {label}: {source}")]
    Window {
        label: String,
        #[source]
        source: Box<Error>,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn in_window(self, label: &str) -> Self {
        Error::Window {
            label: label.to_string(),
            source: Box::new(self),
        }
    }

    /// Innermost error, unwrapping window context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Window { source, .. } => source.root(),
            other => other,
        }
    }
}
