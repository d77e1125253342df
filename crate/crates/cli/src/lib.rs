//! Command-line tool and HTTP service.

pub mod api;
pub mod cli;
pub mod service;
