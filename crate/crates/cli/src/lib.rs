//! Driver for `lax-kit`: run configs, subcommands and the equivalence suites.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure during
//! training, 4 failed gradient or equivalence check.

pub mod commands;
pub mod config;
pub mod suites;
