//! Command-line front end for the `fedprompt` simulator: configuration
//! schema, on-disk formats and the `gen-data` / `train` / `personalize` /
//! `sweep` commands.

pub mod commands;
pub mod config;
pub mod io;

pub use config::{ConfigError, RunConfig};

/// Process exit code for a failed command: 1 for configuration problems,
/// 2 for everything that went wrong while running.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let is_config = err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some() || matches!(e.downcast_ref::<fedprompt::Error>(), Some(fedprompt::Error::Config(_)))
    });
    if is_config {
        1
    } else {
        2
    }
}
