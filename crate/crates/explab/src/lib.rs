//! Experiment orchestration for `cablelab-core`: JSON configs, deterministic runs
//! persisted as CSV plus a JSON manifest, and the acceptance suite.

pub mod acceptance;
pub mod config;
pub mod run;
