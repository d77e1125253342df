//! Core library: data pipeline, networks, losses, training, counterfactual
//! map generation and evaluation metrics.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod par;
pub mod trainer;

pub use error::{Error, Result};
