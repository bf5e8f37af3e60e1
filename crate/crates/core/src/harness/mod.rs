//! Config loading, subcommands and report rendering behind the CLI.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{cmd_plan, cmd_profile, cmd_simulate, cmd_train, write_artifacts};
pub use config::ExperimentConfig;
pub use report::{CommandOutput, OutputFormat};
