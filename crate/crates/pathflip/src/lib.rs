//! File formats, configuration, and the command-line driver around `pathflip-core`.

pub mod cli;
pub mod commands;
pub mod config;
pub mod formats;

pub use pathflip_core as core;
