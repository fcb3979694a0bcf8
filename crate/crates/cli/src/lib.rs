//! Command implementations behind the `posenet` binary.

pub mod commands;
pub mod run_config;
