//! Command-line pipelines over verbalized classifier scores.

pub mod cli;
pub mod commands;
pub mod error;
pub mod plots;
pub mod report;

pub use cli::Cli;
pub use commands::run;
pub use error::CliError;
