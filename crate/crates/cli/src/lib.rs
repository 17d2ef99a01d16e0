//! Library side of the `hbml` binary: run configuration and subcommands.

pub mod commands;
pub mod config;
