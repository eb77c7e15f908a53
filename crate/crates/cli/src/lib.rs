//! Library side of the `apemkit` command: run configuration, exit-code
//! mapping and the commands themselves.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::RunConfig;
pub use error::CliError;
