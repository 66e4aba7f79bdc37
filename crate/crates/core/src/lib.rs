//! Regime-gated value/reversal long-short research toolkit.

pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod portfolio;
pub mod risk;
pub mod robustness;
pub mod signals;
pub mod validation;

pub use error::{Error, Result};
