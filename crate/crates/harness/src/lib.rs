//! Experiment harness: configuration, seeded runs and the comparison study.

pub mod checks;
pub mod commands;
pub mod config;
