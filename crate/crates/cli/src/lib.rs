//! Command-line front end: configuration handling, subcommands and the
//! self-check suites behind `verify`.

pub mod checks;
mod commands;
pub mod config;

pub use commands::{
    prior_config_from, run, ImputerMeta, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION,
    IMPUTER_CHECKPOINT, IMPUTER_META,
};
