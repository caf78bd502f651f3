//! Experiment harness: configuration, orchestration and plot-data emission.

pub mod config;
pub mod plot;
pub mod run;

use fbsde_core::FbsdeError;
use thiserror::Error;

pub use config::{load_config, load_config_with, ConfigErrors, ExperimentConfig, Overrides};
pub use plot::emit_plot_data;
pub use run::{run_experiment, Check, RunOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigErrors),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Solver(#[from] FbsdeError),
}
