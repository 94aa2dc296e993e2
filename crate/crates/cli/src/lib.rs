//! Configuration, orchestration and artifact writing for the `contrast-lab`
//! command-line tool.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod verify;

pub use commands::{run_command, Command, CommandOutcome, EXIT_ERROR, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_PASS};
pub use config::{parse_config, ExperimentConfig, StepSize};
pub use error::CliError;
