//! Experiment runner: config parsing, the training loop, run summaries,
//! learning-curve SVGs and the oracle verification suite.

pub mod config;
pub mod run;
pub mod summary;
pub mod svg;
pub mod verify;
