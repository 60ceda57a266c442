//! Command-line plumbing for mixcache: run configuration, the `profile`,
//! `generate`, `ablate` and `report` commands, and report formatting.

pub mod commands;
pub mod config;
pub mod report;

pub use config::{preset, toy_default, ProfileSource, RunConfig, Seeds};
pub use report::Report;
