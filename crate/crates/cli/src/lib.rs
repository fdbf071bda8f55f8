//! Command-line pipeline for latent-allocation sweeps: train, evaluate,
//! sweep, mutual-information and reconstruction commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod report;

pub use error::CliError;
