//! Configuration, subcommand pipelines and report writers behind the
//! `varconet` binary.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::{parse_config, parse_config_str, RunConfig};
pub use error::{CliError, CliResult};
