//! File formats, dataset IO, run configuration and the command-line
//! front end for `cbev-core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset_io;
mod error;
pub mod results;
pub mod tensor_io;

pub use error::{CliError, CliResult};
