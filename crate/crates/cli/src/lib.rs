// SPDX-License-Identifier: Apache-2.0

//! The `power-attest` command line: argument parsing, configuration, the
//! end-to-end pipeline and report emission.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod plot;
pub mod table;

pub use args::Cli;
pub use commands::run;
pub use config::Config;
pub use error::{CliError, ErrorReport};
pub use pipeline::{run_pipeline, PipelineSummary};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
