//! Command-line front end: dataset and checkpoint I/O, subcommands, and the CSV exports
//! read by the plotting scripts.

pub mod checkpoint;
pub mod commands;
pub mod csvio;
pub mod error;
pub mod provenance;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};
