//! Command-line driver, configuration, dataset ingestion, checkpointing,
//! and report emission for the attack-evaluation toolkit.

pub mod checkpoint;
pub mod config;
pub mod idx;
pub mod pipeline;
pub mod report_io;
pub mod synthetic;

pub use config::RunConfig;
pub use pipeline::run;
