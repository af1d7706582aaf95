//! Experiment orchestration behind the `fedacc` binary: pretraining, federated
//! training runs, personalization, parameter tables and cross-run reports.
//!
//! A train run directory contains:
//!
//! | file                   | content                                          |
//! |------------------------|--------------------------------------------------|
//! | `config.resolved.toml` | the fully resolved config; re-running it reproduces the run |
//! | `metrics.csv`          | one row per round (see [`report::METRICS_COLUMNS`]) |
//! | `summary.json`         | [`report::TrainSummary`]                         |
//! | `global.ckpt`          | final trainable parameters                       |

mod config;
pub mod report;
mod runner;

pub use config::{
    BackboneSection, CommsSection, DataSection, DataSource, ExperimentConfig, PretrainSection, SgdSection,
};
pub use report::{build_report, read_metrics, render_report, CommsToTarget, MetricsRow, Report, TrainSummary};
pub use runner::{
    load_datasets, params_table, render_params, run_personalize, run_pretrain, run_train, Datasets, ModeSummary,
    ParamsTable, PersonalizationReport, PretrainOutcome,
};

use std::path::PathBuf;

use crate::adapters::AdapterError;
use crate::backbone::BackboneError;
use crate::data::DataError;
use crate::federation::FederationError;
use crate::persistence::PersistError;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const GLOBAL_CHECKPOINT: &str = "global.ckpt";

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("metrics file {path}: {message}")]
    Metrics { path: PathBuf, message: String },
    #[error(transparent)]
    Checkpoint(#[from] PersistError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

impl ExperimentError {
    /// Machine-readable category printed by the binary.
    pub fn category(&self) -> &'static str {
        match self {
            ExperimentError::Config(_) | ExperimentError::Adapter(_) => "config",
            ExperimentError::Io { .. } => "io",
            ExperimentError::Metrics { .. } => "metrics",
            ExperimentError::Checkpoint(PersistError::Io { .. }) => "io",
            ExperimentError::Checkpoint(_) => "checkpoint",
            ExperimentError::Data(_) => "data",
            ExperimentError::Backbone(BackboneError::Config(_)) => "config",
            ExperimentError::Backbone(_) => "backbone",
            ExperimentError::Federation(FederationError::Config(_)) => "config",
            ExperimentError::Federation(FederationError::Numeric(_)) => "numeric",
            ExperimentError::Federation(_) => "federation",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "io" => 3,
            "checkpoint" => 4,
            "data" => 5,
            "numeric" => 6,
            _ => 1,
        }
    }
}

pub(crate) fn io_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> ExperimentError {
    let path = path.into();
    move |source| ExperimentError::Io { path, source }
}
