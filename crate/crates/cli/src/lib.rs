//! Command-line front end for `ncvsd-core`: run configuration, file formats,
//! checkpoints, the verification suites and the subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod io;
pub mod suites;
