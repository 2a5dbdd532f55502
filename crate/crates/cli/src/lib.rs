//! Library side of the `comic-kit` command: argument definitions, run
//! configuration and the subcommand implementations.

pub mod args;
pub mod commands;
pub mod config;
