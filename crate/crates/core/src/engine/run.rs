//! One active-testing run: select a batch, vet it, refit, estimate.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CategoryValues, EngineError};
use crate::dataset::{Benchmark, ItemId};
use crate::estimators::{
    mean_abs_error, true_metric, EstimatorKind, FittedEstimator, PosteriorEstimate,
};
use crate::metrics::MetricSpec;
use crate::scalar::Real;
use crate::strategies::{
    meec_scores, select_by_priority, select_mcm, select_random_hierarchical, Batch,
    VettingStrategyKind,
};

/// How many vets a run may spend.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Every initially unvetted item.
    #[default]
    All,
    Vets(usize),
    /// Fraction of the initially unvetted items, rounded to the nearest.
    Fraction(f64),
}

/// Reporting points as fractions of the initially unvetted items.
pub fn default_report_fractions() -> Vec<f64> {
    let mut out = vec![0.02, 0.05];
    out.extend((1..=10).map(|i| f64::from(i) / 10.0));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub metric: MetricSpec,
    pub estimator: EstimatorKind,
    pub strategy: VettingStrategyKind,
    #[serde(default)]
    pub budget: Budget,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fractions of the initially unvetted items at which to record a
    /// step. Batches are cut short so that these are hit exactly. Empty
    /// records a step after every batch.
    #[serde(default = "default_report_fractions")]
    pub report_at: Vec<f64>,
}

impl RunConfig {
    pub fn new(
        metric: MetricSpec,
        estimator: EstimatorKind,
        strategy: VettingStrategyKind,
        batch_size: usize,
    ) -> Self {
        RunConfig {
            metric,
            estimator,
            strategy,
            budget: Budget::All,
            batch_size,
            seed: 0,
            report_at: default_report_fractions(),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let invalid = |field: &str, message: String| {
            Err(EngineError::InvalidConfig {
                field: field.to_owned(),
                message,
            })
        };
        if let Err(e) = self.metric.validate() {
            return invalid("metric", e.to_string());
        }
        if self.batch_size == 0 {
            return invalid("batch_size", "must be at least 1".into());
        }
        if let VettingStrategyKind::MeecPrec { k } = self.strategy {
            if self.metric != (MetricSpec::PrecAtK { k }) {
                return invalid(
                    "strategy",
                    format!("meec_prec with K = {k} needs the Prec@{k} metric"),
                );
            }
        }
        match self.budget {
            Budget::Fraction(f) if !(0.0..=1.0).contains(&f) => {
                return invalid("budget", format!("fraction {f} outside [0, 1]"));
            }
            Budget::Vets(t) if t > 0 && self.batch_size > t => {
                return invalid(
                    "batch_size",
                    format!("{} exceeds the budget {t}", self.batch_size),
                );
            }
            _ => {}
        }
        if self.report_at.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return invalid("report_at", "fractions must lie in (0, 1]".into());
        }
        if self.report_at.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("report_at", "fractions must be strictly increasing".into());
        }
        Ok(())
    }
}

/// Where vetted labels come from.
pub enum OracleHandle {
    /// Answers from each item's simulated truth.
    Simulated,
    /// Answers `(id, truth)` sent by a person. The run suspends if none
    /// arrives within `timeout`.
    External {
        answers: std::sync::mpsc::Receiver<(ItemId, bool)>,
        timeout: std::time::Duration,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemStep<T> {
    pub estimate: CategoryValues<T>,
    pub mean_estimate: Option<T>,
    pub mean_abs_error: Option<T>,
    /// Categories with a defined truth where the estimator had no answer.
    pub not_applicable: usize,
    /// Error of the estimator fit before the last batch, applied to the
    /// labels after it.
    pub error_before_refit: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStep<T> {
    /// Completed batches.
    pub batches: usize,
    pub vets: usize,
    /// Vetted share of the whole pool, pre-vetted items included.
    pub vetted_fraction: f64,
    /// Vets as a share of the initially unvetted items.
    pub budget_fraction: f64,
    pub systems: Vec<SystemStep<T>>,
}

impl<T: Copy> RunStep<T> {
    pub fn mean_abs_error(&self) -> Option<T> {
        self.systems[0].mean_abs_error
    }

    pub fn estimate(&self) -> &CategoryValues<T> {
        &self.systems[0].estimate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult<T> {
    pub config: RunConfig,
    pub steps: Vec<RunStep<T>>,
    /// Per system, when every label has a known or simulated truth.
    pub truth: Vec<Option<CategoryValues<T>>>,
    pub final_posterior: Vec<PosteriorEstimate<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmitOutcome {
    Recorded,
    /// The same answer had already been recorded.
    Replayed,
    /// The answer completed the batch; the estimator was refit.
    BatchCompleted,
}

#[derive(Debug, Clone)]
struct SystemState<T> {
    bench: Benchmark,
    estimator: FittedEstimator<T>,
    posteriors: Vec<PosteriorEstimate<T>>,
    truth: Option<CategoryValues<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingBatch {
    pub batch: Batch,
    pub answers: BTreeMap<ItemId, bool>,
}

/// A run that can be driven one answer at a time and stopped between any
/// two of them. Several systems can share it: they are vetted together
/// and each keeps its own estimator.
#[derive(Debug, Clone)]
pub struct ActiveRun<T> {
    config: RunConfig,
    systems: Vec<SystemState<T>>,
    initial_unvetted: usize,
    budget: usize,
    checkpoints: Vec<usize>,
    vets: usize,
    batches: usize,
    pending: Option<PendingBatch>,
    steps: Vec<RunStep<T>>,
    track_decoupling: bool,
    finished: bool,
    exhausted: Batch,
}

/// Keeps only the top K of each category, in any system.
fn truncate_to_top_k(systems: &[Benchmark], k: usize) -> Vec<Benchmark> {
    let keep: BTreeSet<ItemId> = systems
        .iter()
        .flat_map(|b| {
            let pool = b.primary();
            pool.categories()
                .flat_map(move |c| pool.ranked_items(c).take(k).map(|i| i.id.clone()))
                .collect::<Vec<_>>()
        })
        .collect();
    systems
        .iter()
        .map(|b| b.restrict(|i| keep.contains(&i.id)))
        .collect()
}

fn check_shared_items(systems: &[Benchmark]) -> Result<(), EngineError> {
    let first = systems[0].primary();
    for (s, other) in systems.iter().enumerate().skip(1) {
        let other = other.primary();
        for item in first.items() {
            match other.get(&item.id) {
                None => {
                    return Err(EngineError::SystemMismatch(format!(
                        "item {} missing from system {s}",
                        item.id.0
                    )))
                }
                Some(o) if o.category != item.category || o.label != item.label => {
                    return Err(EngineError::SystemMismatch(format!(
                        "item {} differs in category or labels in system {s}",
                        item.id.0
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.items().iter().find(|i| first.get(&i.id).is_none()) {
            return Err(EngineError::SystemMismatch(format!(
                "item {} of system {s} missing from system 0",
                extra.id.0
            )));
        }
    }
    Ok(())
}

impl<T: Real> ActiveRun<T> {
    pub fn new(bench: Benchmark, config: RunConfig) -> Result<Self, EngineError> {
        Self::with_systems(vec![bench], config)
    }

    /// A run over several systems scoring the same items with shared
    /// labels. One vet reveals the truth for all of them.
    pub fn with_systems(systems: Vec<Benchmark>, config: RunConfig) -> Result<Self, EngineError> {
        config.validate()?;
        if systems.is_empty() {
            return Err(EngineError::SystemMismatch("no systems".into()));
        }
        check_shared_items(&systems)?;
        if config.estimator == EstimatorKind::LearnedMatch
            && systems[0]
                .primary()
                .unvetted()
                .any(|i| i.features.is_none())
        {
            return Err(EngineError::InvalidConfig {
                field: "estimator".into(),
                message: "learned_match needs instance features on every unvetted item".into(),
            });
        }
        let systems = match config.metric {
            MetricSpec::PrecAtK { k } => truncate_to_top_k(&systems, k),
            _ => systems,
        };
        let initial_unvetted = systems[0].primary().n_unvetted();
        let budget = match config.budget {
            Budget::All => initial_unvetted,
            Budget::Vets(t) if t > initial_unvetted => {
                return Err(EngineError::InvalidConfig {
                    field: "budget".into(),
                    message: format!("{t} vets exceed the {initial_unvetted} unvetted items"),
                })
            }
            Budget::Vets(t) => t,
            Budget::Fraction(f) => (f * initial_unvetted as f64).round() as usize,
        };
        let mut checkpoints: Vec<usize> = config
            .report_at
            .iter()
            .map(|f| (f * initial_unvetted as f64).round() as usize)
            .filter(|&c| c > 0 && c <= budget)
            .collect();
        if !config.report_at.is_empty() && budget > 0 {
            checkpoints.push(budget);
        }
        checkpoints.dedup();
        let systems = systems
            .into_iter()
            .map(|bench| {
                let estimator = FittedEstimator::fit(config.estimator, &bench)?;
                let posteriors = estimator.posteriors(&bench)?;
                let simulated = bench.views().iter().all(|v| v.is_simulated());
                let truth = if simulated {
                    Some(true_metric(&bench, &config.metric)?)
                } else {
                    None
                };
                Ok(SystemState {
                    bench,
                    estimator,
                    posteriors,
                    truth,
                })
            })
            .collect::<Result<Vec<_>, EngineError>>()?;
        let mut run = ActiveRun {
            config,
            systems,
            initial_unvetted,
            budget,
            checkpoints,
            vets: 0,
            batches: 0,
            pending: None,
            steps: Vec::new(),
            track_decoupling: false,
            finished: false,
            exhausted: Batch {
                ids: Vec::new(),
                exhausted: true,
            },
        };
        let step = run.snapshot(None)?;
        run.steps.push(step);
        run.finished = run.budget == 0 || initial_unvetted == 0;
        Ok(run)
    }

    /// Also record, at each step, the error of the previous fit on the new
    /// labels.
    pub fn track_decoupling(mut self) -> Self {
        self.track_decoupling = true;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn benchmark(&self) -> &Benchmark {
        &self.systems[0].bench
    }

    pub fn system(&self, s: usize) -> &Benchmark {
        &self.systems[s].bench
    }

    pub fn n_systems(&self) -> usize {
        self.systems.len()
    }

    pub fn estimator(&self) -> &FittedEstimator<T> {
        &self.systems[0].estimator
    }

    pub fn posteriors(&self) -> &[PosteriorEstimate<T>] {
        &self.systems[0].posteriors
    }

    pub fn steps(&self) -> &[RunStep<T>] {
        &self.steps
    }

    pub fn latest(&self) -> &RunStep<T> {
        self.steps.last().expect("initial step")
    }

    pub fn truth(&self, s: usize) -> Option<&CategoryValues<T>> {
        self.systems[s].truth.as_ref()
    }

    pub fn vets(&self) -> usize {
        self.vets
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn initial_unvetted(&self) -> usize {
        self.initial_unvetted
    }

    pub fn batches_completed(&self) -> usize {
        self.batches
    }

    pub fn pending(&self) -> Option<&PendingBatch> {
        self.pending.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    fn next_batch_size(&self) -> usize {
        let left = self.budget - self.vets;
        let to_checkpoint = self
            .checkpoints
            .iter()
            .find(|&&c| c > self.vets)
            .map_or(left, |&c| c - self.vets);
        self.config.batch_size.min(left).min(to_checkpoint)
    }

    fn select(&self, size: usize) -> Result<Batch, EngineError> {
        let primary = self.systems[0].bench.primary();
        Ok(match self.config.strategy {
            VettingStrategyKind::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream(self.batches as u64);
                select_random_hierarchical(primary, size, &mut rng)
            }
            VettingStrategyKind::Mcm => select_mcm(primary, size),
            strategy => {
                let mut scores = Vec::new();
                for system in &self.systems {
                    for (pool, posterior) in system.bench.views().iter().zip(&system.posteriors) {
                        scores.push(meec_scores(pool, posterior, strategy)?);
                    }
                }
                select_by_priority(&scores, size)
            }
        })
    }

    /// The batch awaiting answers, selecting one if none is pending.
    /// Returns the same batch until every item in it is answered.
    pub fn next_batch(&mut self) -> Result<&Batch, EngineError> {
        if self.pending.is_none() && !self.finished {
            let batch = self.select(self.next_batch_size())?;
            if batch.ids.is_empty() {
                self.finished = true;
            } else {
                self.pending = Some(PendingBatch {
                    batch,
                    answers: BTreeMap::new(),
                });
            }
        }
        Ok(match &self.pending {
            Some(p) => &p.batch,
            None => &self.exhausted,
        })
    }

    /// Whether `id` is in the pending batch and still unanswered.
    pub fn awaiting(&self, id: &ItemId) -> bool {
        self.pending
            .as_ref()
            .is_some_and(|p| p.batch.ids.contains(id) && !p.answers.contains_key(id))
    }

    /// Records an externally supplied answer for a pending item. Answers
    /// for items vetted earlier replay or conflict like pending ones.
    pub fn submit(&mut self, id: &ItemId, truth: bool) -> Result<SubmitOutcome, EngineError> {
        self.answer(id, Some(truth))
    }

    /// Answers a pending item from its simulated truth.
    pub fn submit_simulated(&mut self, id: &ItemId) -> Result<SubmitOutcome, EngineError> {
        self.answer(id, None)
    }

    fn answer(&mut self, id: &ItemId, truth: Option<bool>) -> Result<SubmitOutcome, EngineError> {
        let earlier = match &self.pending {
            Some(p) if p.batch.ids.contains(id) => p.answers.get(id).copied(),
            // vetted before this batch, possibly before the run
            _ => match self.systems[0]
                .bench
                .primary()
                .get(id)
                .and_then(|i| i.label.truth())
            {
                Some(t) => Some(t),
                None => return Err(EngineError::NotPending(id.0.clone())),
            },
        };
        if let Some(recorded) = earlier {
            return match truth {
                Some(t) if t != recorded => Err(EngineError::Conflict {
                    id: id.0.clone(),
                    recorded,
                }),
                _ => Ok(SubmitOutcome::Replayed),
            };
        }
        let recorded = match truth {
            Some(t) => {
                for system in &mut self.systems {
                    system.bench.vet_external(id, t)?;
                }
                t
            }
            None => {
                for system in &mut self.systems {
                    system.bench.vet_simulated(id)?;
                }
                self.systems[0]
                    .bench
                    .primary()
                    .get(id)
                    .and_then(|i| i.label.truth())
                    .expect("just vetted")
            }
        };
        self.vets += 1;
        let pending = self.pending.as_mut().expect("pending");
        pending.answers.insert(id.clone(), recorded);
        if pending.answers.len() < pending.batch.ids.len() {
            return Ok(SubmitOutcome::Recorded);
        }
        self.complete_batch()?;
        Ok(SubmitOutcome::BatchCompleted)
    }

    fn complete_batch(&mut self) -> Result<(), EngineError> {
        self.pending = None;
        self.batches += 1;
        let before = if self.track_decoupling {
            let mut errors = Vec::with_capacity(self.systems.len());
            for system in &self.systems {
                let posteriors = system.estimator.posteriors(&system.bench)?;
                let estimate =
                    system
                        .estimator
                        .estimate(&system.bench, &self.config.metric, &posteriors)?;
                errors.push(
                    system
                        .truth
                        .as_ref()
                        .and_then(|t| mean_abs_error(&estimate, t).0),
                );
            }
            Some(errors)
        } else {
            None
        };
        for system in &mut self.systems {
            system.estimator = FittedEstimator::fit(self.config.estimator, &system.bench)?;
            system.posteriors = system.estimator.posteriors(&system.bench)?;
        }
        if self.vets >= self.budget || self.systems[0].bench.primary().n_unvetted() == 0 {
            self.finished = true;
        }
        if self.checkpoints.is_empty() || self.checkpoints.contains(&self.vets) || self.finished {
            let step = self.snapshot(before)?;
            self.steps.push(step);
        }
        Ok(())
    }

    fn snapshot(&self, before: Option<Vec<Option<T>>>) -> Result<RunStep<T>, EngineError> {
        let pool = self.systems[0].bench.primary();
        let mut systems = Vec::with_capacity(self.systems.len());
        for (s, system) in self.systems.iter().enumerate() {
            let estimate = system.estimator.estimate(
                &system.bench,
                &self.config.metric,
                &system.posteriors,
            )?;
            let (mean_abs_error, not_applicable) = match &system.truth {
                Some(t) => mean_abs_error(&estimate, t),
                None => (None, estimate.values().filter(|v| v.is_none()).count()),
            };
            let defined: Vec<T> = estimate.values().filter_map(|v| *v).collect();
            let mean_estimate = (!defined.is_empty())
                .then(|| defined.iter().copied().sum::<T>() / T::from_count(defined.len()));
            systems.push(SystemStep {
                estimate,
                mean_estimate,
                mean_abs_error,
                not_applicable,
                error_before_refit: before.as_ref().and_then(|b| b[s]),
            });
        }
        Ok(RunStep {
            batches: self.batches,
            vets: self.vets,
            vetted_fraction: pool.vetted_fraction(),
            budget_fraction: if self.initial_unvetted == 0 {
                1.0
            } else {
                self.vets as f64 / self.initial_unvetted as f64
            },
            systems,
        })
    }

    /// Drives the run to the end with simulated answers.
    pub fn run_simulated(&mut self) -> Result<(), EngineError> {
        loop {
            let batch = self.next_batch()?.clone();
            if batch.exhausted {
                return Ok(());
            }
            for id in &batch.ids {
                if !self
                    .pending
                    .as_ref()
                    .is_some_and(|p| p.answers.contains_key(id))
                {
                    self.submit_simulated(id)?;
                }
            }
        }
    }

    pub fn result(&self) -> RunResult<T> {
        RunResult {
            config: self.config.clone(),
            steps: self.steps.clone(),
            truth: self.systems.iter().map(|s| s.truth.clone()).collect(),
            final_posterior: self.systems[0].posteriors.clone(),
        }
    }
}

/// A run either finishes or stops to wait for a person.
pub enum RunOutcome<T> {
    Completed(RunResult<T>),
    Suspended(Box<ActiveRun<T>>),
}

/// Alg. 1 end to end: while budget and unvetted items remain, select a
/// batch, vet it, refit, estimate.
pub fn run_active_testing<T: Real>(
    bench: Benchmark,
    config: RunConfig,
    oracle: OracleHandle,
) -> Result<RunOutcome<T>, EngineError> {
    let run = ActiveRun::new(bench, config)?;
    resume(run, oracle)
}

/// Continues a run, possibly one that was suspended earlier.
pub fn resume<T: Real>(
    mut run: ActiveRun<T>,
    oracle: OracleHandle,
) -> Result<RunOutcome<T>, EngineError> {
    match oracle {
        OracleHandle::Simulated => {
            run.run_simulated()?;
            Ok(RunOutcome::Completed(run.result()))
        }
        OracleHandle::External { answers, timeout } => loop {
            if run.next_batch()?.exhausted {
                return Ok(RunOutcome::Completed(run.result()));
            }
            match answers.recv_timeout(timeout) {
                Ok((id, truth)) => {
                    run.submit(&id, truth)?;
                }
                Err(_) => return Ok(RunOutcome::Suspended(Box::new(run))),
            }
        },
    }
}
