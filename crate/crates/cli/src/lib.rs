//! Command-line workflows and the HTTP server for `sparsesplat`.

pub mod bundle;
pub mod commands;
pub mod overlay;
pub mod report;
pub mod server;

/// Bad flags or inputs; the binary exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);
