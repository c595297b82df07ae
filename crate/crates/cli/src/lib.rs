//! Command-line tools and the HTTP session service.

pub mod args;
pub mod commands;
pub mod server;

pub use args::Cli;
pub use commands::{run, UsageError};
