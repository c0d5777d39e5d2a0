//! Sparse mixture-of-experts decoding of brain responses from post-fusion tokens.

pub mod afire;
pub mod aft;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod mind;
pub mod objective;
pub mod sadgate;
pub mod synthgen;
pub mod tensorcore;
pub mod train;

pub use error::{Error, Result};
