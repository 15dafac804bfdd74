//! Experiment driver behind the `pgst` binary.

pub mod experiment;
pub mod manifest;
pub mod report;
