//! Running active testing: single runs, repeated simulations, the
//! refit-versus-vetting breakdown and two-system ranking trials.

mod experiments;
mod run;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dataset::{CategoryId, DatasetError};
use crate::estimators::EstimatorError;
use crate::strategies::StrategyError;

pub use experiments::{
    decoupling_analysis, derive_seed, ranking_experiment, ranking_experiment_with, simulate_runs,
    write_ranking_csv, write_ranking_trials_csv, write_runs_csv, write_summary_csv, DecouplingStep,
    RankingResult, RankingStep, RankingTrialStep, SimulationSummary, SummaryStep,
};
pub use run::{
    default_report_fractions, resume, run_active_testing, ActiveRun, Budget, OracleHandle,
    PendingBatch, RunConfig, RunOutcome, RunResult, RunStep, SubmitOutcome, SystemStep,
};

/// A value per category; `None` where it is undefined or not applicable.
pub type CategoryValues<T> = BTreeMap<CategoryId, Option<T>>;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid {field}: {message}")]
    InvalidConfig { field: String, message: String },
    #[error("item {0} is not in the pending batch")]
    NotPending(String),
    #[error("item {id} was already answered with {recorded}")]
    Conflict { id: String, recorded: bool },
    #[error("systems do not match: {0}")]
    SystemMismatch(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("writing results: {0}")]
    Output(String),
}

impl From<csv::Error> for EngineError {
    fn from(e: csv::Error) -> Self {
        EngineError::Output(e.to_string())
    }
}
