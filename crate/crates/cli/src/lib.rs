//! Command-line frontend for the particle-smoothing variational library:
//! dataset generation and ingest, Adam training on filtering or smoothing
//! objectives, rollout evaluation, and gradient-SNR measurement.

pub mod adam;
pub mod artifacts;
pub mod commands;
pub mod config;
pub mod train;

/// Parse process arguments and run the selected subcommand.
pub fn run() -> anyhow::Result<()> {
    commands::run()
}
