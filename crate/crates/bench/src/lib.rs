//! Benchmark harness behind the `cfx` binary: configuration, model
//! preparation, benchmark and grid-search runs, reports and plots.

pub mod artifacts;
pub mod bench;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

pub use cli::{run, Cli};
pub use config::BenchConfig;
