//! Library half of the `bevmotion` binary, exposed for integration tests.

pub mod commands;
pub mod config;
pub mod error;
