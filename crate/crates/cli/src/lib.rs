//! Command-line layer: datasets on disk, run configuration and subcommands.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod images;
pub mod synthetic;
