//! Library behind the `ctp` binary: configuration, file-format records,
//! the synthetic corpus generator, and the subcommand implementations.

pub mod commands;
pub mod config;
pub mod records;
pub mod synth;
