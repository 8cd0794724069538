//! Command-line orchestration of the audit pipeline.

pub mod config;
pub mod pipeline;

pub use config::AuditConfig;
pub use pipeline::{cmd_analyze, cmd_plan, cmd_report, cmd_run, cmd_verify, RunDir, RunManifest};
