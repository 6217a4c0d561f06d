//! Experiment orchestration for the grokking laboratory: configuration,
//! run directories, analyses and cross-run reports.

pub mod analyze;
pub mod config;
pub mod manifest;
pub mod report;
pub mod run;
