//! Driver for the `sofr-tl` binary: flat config files, CSV datasets and the
//! `fit`, `bench` and `simulate` commands. All numbers come from
//! `sofr_transfer`; this crate only reads, dispatches and writes.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use commands::{cmd_bench, cmd_fit, cmd_simulate};
pub use error::{CliError, CliResult};
