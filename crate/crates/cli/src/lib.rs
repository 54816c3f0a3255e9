//! Runnable surface of `autolambda-core`: JSON configuration, CSV data and
//! trajectory files, presets, and the command verbs.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod parallel;
pub mod presets;
pub mod trajectory;

pub use error::CliError;
