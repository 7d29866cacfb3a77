//! Experiment configuration, pipelines, run directories and the acceptance
//! suite.

pub mod acceptance;
pub mod commands;
pub mod config;
pub mod pipeline;

pub use config::{AcceptanceSection, BackboneKind, DataKind, DataSection, ExperimentConfig, ModelSection, OptimSection, RunSection};
pub use pipeline::{load_task, pretrain, rebuild, refinetune_source, transfer, Checkpointing, TaskData, Trained};
