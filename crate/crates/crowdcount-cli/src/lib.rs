//! Command-line front end: run configuration, artifact layout, and the five
//! operator commands (`synth`, `train`, `infer`, `eval`, `gradcheck`).

pub mod commands;
pub mod config;

pub use commands::{AppError, AppResult, Stage};
pub use config::{RunConfig, UsageError};
