use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::run::{ActiveRun, RunConfig, RunResult, RunStep};
use super::{CategoryValues, EngineError};
use crate::dataset::Benchmark;
use crate::scalar::Real;

/// Seed of run `index` under a master seed.
pub fn derive_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().expect("finite")
}

/// Mean and population standard deviation.
fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStep {
    pub step: usize,
    pub vets: usize,
    pub vetted_fraction: f64,
    pub budget_fraction: f64,
    pub mean_abs_error: Option<f64>,
    pub std_abs_error: Option<f64>,
    /// Runs whose error was defined at this step.
    pub n_defined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary<T> {
    pub config: RunConfig,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub steps: Vec<SummaryStep>,
    pub runs: Vec<RunResult<T>>,
}

fn check_aligned<T>(runs: &[RunResult<T>]) -> Result<(), EngineError> {
    let first: Vec<usize> = runs[0].steps.iter().map(|s| s.vets).collect();
    for run in &runs[1..] {
        if run.steps.iter().map(|s| s.vets).ne(first.iter().copied()) {
            return Err(EngineError::Output("runs recorded different steps".into()));
        }
    }
    Ok(())
}

fn run_seeded<T: Real>(
    systems: Vec<Benchmark>,
    config: &RunConfig,
    seed: u64,
    decoupling: bool,
) -> Result<RunResult<T>, EngineError> {
    let mut config = config.clone();
    config.seed = seed;
    let mut run = ActiveRun::with_systems(systems, config)?;
    if decoupling {
        run = run.track_decoupling();
    }
    run.run_simulated()?;
    Ok(run.result())
}

/// Repeats a run `n_runs` times, varying only the seed, and aggregates the
/// error per recorded step. Runs go in parallel on the current rayon pool.
pub fn simulate_runs<T: Real + Send + Sync>(
    template: &Benchmark,
    config: &RunConfig,
    n_runs: usize,
    master_seed: u64,
) -> Result<SimulationSummary<T>, EngineError> {
    if n_runs == 0 {
        return Err(EngineError::InvalidConfig {
            field: "n_runs".into(),
            message: "must be at least 1".into(),
        });
    }
    let seeds: Vec<u64> = (0..n_runs).map(|i| derive_seed(master_seed, i)).collect();
    let runs = seeds
        .par_iter()
        .map(|&seed| run_seeded(vec![template.clone()], config, seed, false))
        .collect::<Result<Vec<RunResult<T>>, _>>()?;
    check_aligned(&runs)?;
    let steps = (0..runs[0].steps.len())
        .map(|i| {
            let at: Vec<&RunStep<T>> = runs.iter().map(|r| &r.steps[i]).collect();
            let errors: Vec<f64> = at
                .iter()
                .filter_map(|s| s.mean_abs_error())
                .map(to_f64)
                .collect();
            let stats = mean_std(&errors);
            SummaryStep {
                step: i,
                vets: at[0].vets,
                vetted_fraction: at[0].vetted_fraction,
                budget_fraction: at[0].budget_fraction,
                mean_abs_error: stats.map(|s| s.0),
                std_abs_error: stats.map(|s| s.1),
                n_defined: errors.len(),
            }
        })
        .collect();
    Ok(SimulationSummary {
        config: config.clone(),
        master_seed,
        seeds,
        steps,
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecouplingStep {
    pub step: usize,
    pub vets: usize,
    pub vetted_fraction: f64,
    /// Previous fit applied to the new labels.
    pub error_before_refit: Option<f64>,
    pub error_after_refit: Option<f64>,
}

impl DecouplingStep {
    /// The part of the error reduction owed to refitting.
    pub fn vertical_drop(&self) -> Option<f64> {
        Some(self.error_before_refit? - self.error_after_refit?)
    }
}

/// Mean errors before and after each refit. The estimator is refit only
/// at the recorded steps, so the slope between steps is the value of the
/// vetted labels under a fixed model and the drop at a step is the value
/// of refitting.
pub fn decoupling_analysis<T: Real + Send + Sync>(
    template: &Benchmark,
    config: &RunConfig,
    n_runs: usize,
    master_seed: u64,
) -> Result<Vec<DecouplingStep>, EngineError> {
    if n_runs == 0 {
        return Err(EngineError::InvalidConfig {
            field: "n_runs".into(),
            message: "must be at least 1".into(),
        });
    }
    let mut config = config.clone();
    config.batch_size = template.primary().n_unvetted().max(1);
    if let super::run::Budget::Vets(t) = config.budget {
        config.batch_size = t.max(1);
    }
    let runs = (0..n_runs)
        .into_par_iter()
        .map(|i| {
            run_seeded(
                vec![template.clone()],
                &config,
                derive_seed(master_seed, i),
                true,
            )
        })
        .collect::<Result<Vec<RunResult<T>>, _>>()?;
    check_aligned(&runs)?;
    Ok((0..runs[0].steps.len())
        .map(|i| {
            let at: Vec<&RunStep<T>> = runs.iter().map(|r| &r.steps[i]).collect();
            let mean = |f: &dyn Fn(&RunStep<T>) -> Option<T>| {
                let xs: Vec<f64> = at.iter().filter_map(|s| f(s)).map(to_f64).collect();
                mean_std(&xs).map(|s| s.0)
            };
            DecouplingStep {
                step: i,
                vets: at[0].vets,
                vetted_fraction: at[0].vetted_fraction,
                error_before_refit: mean(&|s| s.systems[0].error_before_refit),
                error_after_refit: mean(&|s| s.systems[0].mean_abs_error),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingTrialStep {
    pub trial: usize,
    pub seed: u64,
    pub step: usize,
    pub vets: usize,
    pub vetted_fraction: f64,
    /// Estimated metric of system A minus system B; `None` when either
    /// estimate is not applicable.
    pub gap_estimate: Option<f64>,
    pub true_gap: f64,
    pub squared_error: Option<f64>,
    /// `None` when the true gap is exactly 0. An inapplicable estimate
    /// counts as a flip.
    pub flipped: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingStep {
    pub step: usize,
    pub vets: usize,
    pub vetted_fraction: f64,
    pub gap_mse: Option<f64>,
    /// `None` when every trial was excluded.
    pub flip_rate: Option<f64>,
    pub n_excluded: usize,
    pub n_not_applicable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub config: RunConfig,
    pub master_seed: u64,
    pub steps: Vec<RankingStep>,
    pub trials: Vec<RankingTrialStep>,
}

/// Mean over the categories where both systems' truths are defined. The
/// estimate is `None` if either system has no answer in one of them.
fn category_means<T: Real>(
    truth_a: &CategoryValues<T>,
    truth_b: &CategoryValues<T>,
    est_a: &CategoryValues<T>,
    est_b: &CategoryValues<T>,
) -> (T, Option<T>) {
    let cats: Vec<_> = truth_a
        .iter()
        .filter(|(c, t)| t.is_some() && truth_b.get(*c).copied().flatten().is_some())
        .map(|(c, _)| c)
        .collect();
    if cats.is_empty() {
        return (T::zero(), Some(T::zero()));
    }
    let n = T::from_count(cats.len());
    let mean = |vals: &CategoryValues<T>| -> Option<T> {
        let mut sum = T::zero();
        for c in &cats {
            sum = sum + vals.get(*c).copied().flatten()?;
        }
        Some(sum / n)
    };
    let true_gap = mean(truth_a).expect("defined") - mean(truth_b).expect("defined");
    let est_gap = match (mean(est_a), mean(est_b)) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    (true_gap, est_gap)
}

fn ranking_trial<T: Real>(
    trial: usize,
    seed: u64,
    systems: (Benchmark, Benchmark),
    config: &RunConfig,
) -> Result<Vec<RankingTrialStep>, EngineError> {
    let result: RunResult<T> = run_seeded(vec![systems.0, systems.1], config, seed, false)?;
    let (Some(ta), Some(tb)) = (&result.truth[0], &result.truth[1]) else {
        return Err(EngineError::InvalidConfig {
            field: "dataset".into(),
            message: "ranking needs simulated truth for every item".into(),
        });
    };
    Ok(result
        .steps
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let (true_gap, est_gap) =
                category_means(ta, tb, &step.systems[0].estimate, &step.systems[1].estimate);
            let true_gap = to_f64(true_gap);
            let gap_estimate = est_gap.map(to_f64);
            RankingTrialStep {
                trial,
                seed,
                step: i,
                vets: step.vets,
                vetted_fraction: step.vetted_fraction,
                gap_estimate,
                true_gap,
                squared_error: gap_estimate.map(|g| (g - true_gap).powi(2)),
                flipped: (true_gap != 0.0).then(|| match gap_estimate {
                    Some(g) => g.signum() != true_gap.signum() || g == 0.0,
                    None => true,
                }),
            }
        })
        .collect())
}

fn aggregate_ranking(
    config: &RunConfig,
    master_seed: u64,
    trials: Vec<Vec<RankingTrialStep>>,
) -> RankingResult {
    let n_steps = trials[0].len();
    let steps = (0..n_steps)
        .map(|i| {
            let at: Vec<&RankingTrialStep> = trials.iter().map(|t| &t[i]).collect();
            let sq: Vec<f64> = at.iter().filter_map(|t| t.squared_error).collect();
            let judged: Vec<bool> = at.iter().filter_map(|t| t.flipped).collect();
            RankingStep {
                step: i,
                vets: at[0].vets,
                vetted_fraction: at[0].vetted_fraction,
                gap_mse: mean_std(&sq).map(|s| s.0),
                flip_rate: (!judged.is_empty())
                    .then(|| judged.iter().filter(|&&f| f).count() as f64 / judged.len() as f64),
                n_excluded: at.len() - judged.len(),
                n_not_applicable: at.iter().filter(|t| t.gap_estimate.is_none()).count(),
            }
        })
        .collect();
    RankingResult {
        config: config.clone(),
        master_seed,
        steps,
        trials: trials.into_iter().flatten().collect(),
    }
}

/// Two systems on the same items, vetted together, repeated over seeded
/// trials on a fixed pair of benchmarks.
pub fn ranking_experiment<T: Real + Send + Sync>(
    systems: &(Benchmark, Benchmark),
    config: &RunConfig,
    n_trials: usize,
    master_seed: u64,
) -> Result<RankingResult, EngineError> {
    ranking_experiment_with::<T, _>(|_, _| Ok(systems.clone()), config, n_trials, master_seed)
}

/// As [`ranking_experiment`], drawing a fresh pair of benchmarks for each
/// trial from `draw(trial, seed)`.
pub fn ranking_experiment_with<T, F>(
    draw: F,
    config: &RunConfig,
    n_trials: usize,
    master_seed: u64,
) -> Result<RankingResult, EngineError>
where
    T: Real + Send + Sync,
    F: Fn(usize, u64) -> Result<(Benchmark, Benchmark), EngineError> + Sync,
{
    if n_trials == 0 {
        return Err(EngineError::InvalidConfig {
            field: "n_trials".into(),
            message: "must be at least 1".into(),
        });
    }
    let trials = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(master_seed, i);
            ranking_trial::<T>(i, seed, draw(i, seed)?, config)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if trials.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err(EngineError::Output(
            "trials recorded different steps".into(),
        ));
    }
    Ok(aggregate_ranking(config, master_seed, trials))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Aggregate simulation rows: `cell_id, step, vetted_fraction,
/// mean_abs_error, std_abs_error`.
pub fn write_summary_csv<W: Write>(
    out: W,
    cell_id: &str,
    steps: &[SummaryStep],
    header: bool,
) -> Result<(), EngineError> {
    let mut w = csv::Writer::from_writer(out);
    if header {
        w.write_record([
            "cell_id",
            "step",
            "vetted_fraction",
            "mean_abs_error",
            "std_abs_error",
        ])?;
    }
    for s in steps {
        w.write_record([
            cell_id.to_owned(),
            s.step.to_string(),
            s.vetted_fraction.to_string(),
            opt(s.mean_abs_error),
            opt(s.std_abs_error),
        ])?;
    }
    w.flush().map_err(|e| EngineError::Output(e.to_string()))
}

/// One row per run and step.
pub fn write_runs_csv<W: Write, T: Real>(
    out: W,
    cell_id: &str,
    summary: &SimulationSummary<T>,
) -> Result<(), EngineError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "cell_id",
        "run",
        "seed",
        "step",
        "vets",
        "vetted_fraction",
        "mean_abs_error",
        "not_applicable",
    ])?;
    for (r, (run, seed)) in summary.runs.iter().zip(&summary.seeds).enumerate() {
        for (i, s) in run.steps.iter().enumerate() {
            w.write_record([
                cell_id.to_owned(),
                r.to_string(),
                seed.to_string(),
                i.to_string(),
                s.vets.to_string(),
                s.vetted_fraction.to_string(),
                opt(s.mean_abs_error().map(to_f64)),
                s.systems[0].not_applicable.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| EngineError::Output(e.to_string()))
}

/// Aggregate ranking rows: `step, vetted_fraction, gap_mse, flip_rate,
/// n_excluded`. The flip rate reads `excluded` when no trial counted.
pub fn write_ranking_csv<W: Write>(out: W, result: &RankingResult) -> Result<(), EngineError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "step",
        "vetted_fraction",
        "gap_mse",
        "flip_rate",
        "n_excluded",
    ])?;
    for s in &result.steps {
        w.write_record([
            s.step.to_string(),
            s.vetted_fraction.to_string(),
            opt(s.gap_mse),
            s.flip_rate
                .map_or_else(|| "excluded".to_owned(), |f| f.to_string()),
            s.n_excluded.to_string(),
        ])?;
    }
    w.flush().map_err(|e| EngineError::Output(e.to_string()))
}

pub fn write_ranking_trials_csv<W: Write>(
    out: W,
    result: &RankingResult,
) -> Result<(), EngineError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "trial",
        "seed",
        "step",
        "vets",
        "vetted_fraction",
        "gap_estimate",
        "true_gap",
        "squared_error",
        "flipped",
    ])?;
    for t in &result.trials {
        w.write_record([
            t.trial.to_string(),
            t.seed.to_string(),
            t.step.to_string(),
            t.vets.to_string(),
            t.vetted_fraction.to_string(),
            opt(t.gap_estimate),
            t.true_gap.to_string(),
            opt(t.squared_error),
            t.flipped
                .map_or_else(|| "excluded".to_owned(), |f| f.to_string()),
        ])?;
    }
    w.flush().map_err(|e| EngineError::Output(e.to_string()))
}
