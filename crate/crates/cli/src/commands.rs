use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use active_testing::dataset::{
    pair_detections, synthesize_instance_dataset, synthesize_tag_systems, write_detections,
    write_ground_truth, write_tag_dataset, EvaluationPool, TagFormat, TagSynthSpec,
    DETECTIONS_FILE, GROUND_TRUTH_FILE,
};
use active_testing::engine::{
    ranking_experiment, ranking_experiment_with, simulate_runs, write_ranking_csv,
    write_ranking_trials_csv, write_runs_csv, write_summary_csv, EngineError, RankingResult,
    SimulationSummary,
};
use active_testing_service::{AppState, Catalog};
use rayon::prelude::*;

use crate::manifest::{read_manifest, GenManifest, RankManifest, SimulateManifest};
use crate::output::write_bytes;
use crate::{prepare_out_dir, write_atomic, CliError, ExperimentArgs, GenArgs, ServeArgs};

/// What `gen` wrote, printed as a short summary.
#[derive(Debug, Clone, PartialEq)]
pub struct GenReport {
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl fmt::Display for GenReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for line in &self.lines {
            writeln!(f, "{line}")?;
        }
        for file in &self.files {
            writeln!(f, "wrote {}", file.display())?;
        }
        Ok(())
    }
}

fn rate(hits: usize, total: usize) -> String {
    if total == 0 {
        "n/a".into()
    } else {
        format!("{:.4}", hits as f64 / total as f64)
    }
}

/// Observed `p(y=1|z=1)` and `p(y=1|z=0)` over items with a known truth.
fn noise_line(name: &str, pool: &EvaluationPool) -> String {
    let (mut pos, mut pos_tagged, mut neg, mut neg_tagged) = (0, 0, 0, 0);
    for item in pool.items() {
        let noisy = item.label.noisy();
        match item.sim_truth.or(item.label.truth()) {
            Some(true) => {
                pos += 1;
                pos_tagged += usize::from(noisy);
            }
            Some(false) => {
                neg += 1;
                neg_tagged += usize::from(noisy);
            }
            None => {}
        }
    }
    format!(
        "{name}: {} items, {} categories, {} vetted, p(y=1|z=1) = {}, p(y=1|z=0) = {}",
        pool.len(),
        pool.n_categories(),
        pool.n_vetted(),
        rate(pos_tagged, pos),
        rate(neg_tagged, neg)
    )
}

pub fn gen(args: &GenArgs) -> Result<GenReport, CliError> {
    let manifest: GenManifest = read_manifest(&args.manifest)?;
    manifest.validate()?;
    let mut report = GenReport {
        lines: Vec::new(),
        files: Vec::new(),
    };
    if let Some(spec) = &manifest.instance {
        let spec = active_testing::dataset::InstanceSynthSpec {
            seed: args.seed.unwrap_or(spec.seed),
            ..spec.clone()
        };
        let (dets, gts) = synthesize_instance_dataset(&spec).map_err(CliError::validation)?;
        prepare_out_dir(&args.out)?;
        let det_path = args.out.join(DETECTIONS_FILE);
        let gt_path = args.out.join(GROUND_TRUTH_FILE);
        write_atomic(&det_path, |tmp| {
            write_detections(tmp, &dets).map_err(CliError::runtime)
        })?;
        write_atomic(&gt_path, |tmp| {
            write_ground_truth(tmp, &gts).map_err(CliError::runtime)
        })?;
        let pairs = pair_detections(&dets, &gts).map_err(CliError::runtime)?;
        let checked: Vec<_> = pairs
            .iter()
            .filter_map(|p| p.true_iou.map(|t| (p.noisy_iou >= 0.5, t >= 0.5)))
            .collect();
        let flipped = checked
            .iter()
            .filter(|(noisy, truth)| noisy != truth)
            .count();
        report.lines.push(format!(
            "{} detections, {} ground-truth instances, {} categories, box/mask disagreement at IoU 0.5 = {}",
            dets.len(),
            gts.len(),
            spec.n_categories,
            rate(flipped, checked.len())
        ));
        report.files = vec![det_path, gt_path];
        return Ok(report);
    }

    let spec = manifest.tag.as_ref().expect("validated");
    let spec = TagSynthSpec {
        seed: args.seed.unwrap_or(spec.seed),
        ..spec.clone()
    };
    if manifest.systems.is_empty() {
        let format = manifest
            .format
            .or_else(|| TagFormat::from_path(&args.out))
            .unwrap_or(TagFormat::Jsonl);
        if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            prepare_out_dir(parent)?;
        }
        let pool = synthesize_tag_systems(&spec, &[spec.score])
            .map_err(CliError::validation)?
            .remove(0);
        write_atomic(&args.out, |tmp| {
            write_tag_dataset(&pool, tmp, format).map_err(CliError::runtime)
        })?;
        report.lines.push(noise_line("dataset", &pool));
        report.files.push(args.out.clone());
        return Ok(report);
    }

    let format = manifest.format.unwrap_or(TagFormat::Jsonl);
    let ext = match format {
        TagFormat::Jsonl => "jsonl",
        TagFormat::Csv => "csv",
    };
    let models: Vec<_> = manifest.systems.iter().map(|s| s.score).collect();
    let pools = synthesize_tag_systems(&spec, &models).map_err(CliError::validation)?;
    prepare_out_dir(&args.out)?;
    for (system, pool) in manifest.systems.iter().zip(&pools) {
        let path = args.out.join(format!("{}.{ext}", system.name));
        write_atomic(&path, |tmp| {
            write_tag_dataset(pool, tmp, format).map_err(CliError::runtime)
        })?;
        report.lines.push(noise_line(&system.name, pool));
        report.files.push(path);
    }
    Ok(report)
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = jobs {
        if jobs == 0 {
            return Err(CliError::Validation("--jobs must be at least 1".into()));
        }
        builder = builder.num_threads(jobs);
    }
    builder.build().map_err(CliError::runtime)
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn output_dir(
    args: &ExperimentArgs,
    manifest_output: Option<&PathBuf>,
) -> Result<PathBuf, CliError> {
    let out = match (&args.out, manifest_output) {
        (Some(out), _) => out.clone(),
        (None, Some(out)) if out.is_absolute() => out.clone(),
        (None, Some(out)) => manifest_dir(&args.manifest).join(out),
        (None, None) => {
            return Err(CliError::Validation(
                "no output directory: pass --out or set output".into(),
            ))
        }
    };
    prepare_out_dir(&out)?;
    Ok(out)
}

fn csv_bytes(
    fill: impl FnOnce(&mut Vec<u8>) -> Result<(), EngineError>,
) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    fill(&mut buf).map_err(CliError::runtime)?;
    Ok(buf)
}

/// Writes `<cell>.csv` and the per-run dump `<cell>.runs.csv` for every
/// cell, plus `simulate.csv` with every cell's rows. Returns the paths.
pub fn simulate(args: &ExperimentArgs) -> Result<Vec<PathBuf>, CliError> {
    let manifest: SimulateManifest = read_manifest(&args.manifest)?;
    let cells = manifest.grid.cells()?;
    if manifest.n_runs == 0 {
        return Err(CliError::Validation("n_runs must be at least 1".into()));
    }
    let seed = args.seed.unwrap_or(manifest.seed);
    let bench = manifest
        .dataset
        .load(&manifest_dir(&args.manifest), &manifest.grid.metric)?;
    if !bench.primary().is_simulated() {
        return Err(CliError::Validation(
            "the dataset has items without sim_truth; simulation needs a hidden truth for every item".into(),
        ));
    }
    let out = output_dir(args, manifest.output.as_ref())?;
    let pool = thread_pool(args.jobs)?;
    let results: Vec<SimulationSummary<f64>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| simulate_runs::<f64>(&bench, &cell.config, manifest.n_runs, seed))
            .collect::<Result<_, _>>()
    })?;

    let mut written = Vec::new();
    let mut combined = Vec::new();
    for (i, (cell, summary)) in cells.iter().zip(&results).enumerate() {
        let path = out.join(format!("{}.csv", cell.id));
        write_bytes(
            &path,
            &csv_bytes(|b| write_summary_csv(b, &cell.id, &summary.steps, true))?,
        )?;
        written.push(path);
        let path = out.join(format!("{}.runs.csv", cell.id));
        write_bytes(&path, &csv_bytes(|b| write_runs_csv(b, &cell.id, summary))?)?;
        written.push(path);
        combined.extend(csv_bytes(|b| {
            write_summary_csv(b, &cell.id, &summary.steps, i == 0)
        })?);
    }
    let path = out.join("simulate.csv");
    write_bytes(&path, &combined)?;
    written.push(path);
    Ok(written)
}

/// Writes `<cell>.rank.csv` and the per-trial dump `<cell>.trials.csv`.
pub fn rank(args: &ExperimentArgs) -> Result<Vec<PathBuf>, CliError> {
    let manifest: RankManifest = read_manifest(&args.manifest)?;
    let cells = manifest.grid.cells()?;
    if manifest.trials == 0 {
        return Err(CliError::Validation("trials must be at least 1".into()));
    }
    if let Some(synth) = &manifest.systems.synth {
        synth.spec.validate().map_err(CliError::validation)?;
    }
    let seed = args.seed.unwrap_or(manifest.seed);
    let files = manifest.load_files(&manifest_dir(&args.manifest))?;
    let out = output_dir(args, manifest.output.as_ref())?;
    let pool = thread_pool(args.jobs)?;
    let results: Vec<RankingResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| -> Result<RankingResult, CliError> {
                match (&files, &manifest.systems.synth) {
                    (Some(pair), _) => Ok(ranking_experiment::<f64>(
                        pair,
                        &cell.config,
                        manifest.trials,
                        seed,
                    )?),
                    (None, Some(synth)) if synth.redraw => Ok(ranking_experiment_with::<f64, _>(
                        |_, trial_seed| {
                            synth
                                .draw(trial_seed)
                                .map_err(|e| EngineError::InvalidConfig {
                                    field: "systems".into(),
                                    message: e.to_string(),
                                })
                        },
                        &cell.config,
                        manifest.trials,
                        seed,
                    )?),
                    (None, Some(synth)) => {
                        let pair = synth.draw(synth.spec.seed)?;
                        Ok(ranking_experiment::<f64>(
                            &pair,
                            &cell.config,
                            manifest.trials,
                            seed,
                        )?)
                    }
                    (None, None) => unreachable!("checked by load_files"),
                }
            })
            .collect::<Result<_, _>>()
    })?;

    let mut written = Vec::new();
    for (cell, result) in cells.iter().zip(&results) {
        let path = out.join(format!("{}.rank.csv", cell.id));
        write_bytes(&path, &csv_bytes(|b| write_ranking_csv(b, result))?)?;
        written.push(path);
        let path = out.join(format!("{}.trials.csv", cell.id));
        write_bytes(&path, &csv_bytes(|b| write_ranking_trials_csv(b, result))?)?;
        written.push(path);
    }
    Ok(written)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}

/// Loads the data before binding, so a bad path fails fast.
pub fn serve(args: &ServeArgs) -> Result<(), CliError> {
    let catalog = Catalog::load(&args.data).map_err(CliError::validation)?;
    if catalog.is_empty() {
        return Err(CliError::Validation(format!(
            "no datasets found at {}",
            args.data.display()
        )));
    }
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::runtime)?;
    runtime.block_on(async {
        fs::create_dir_all(&args.out).map_err(CliError::runtime)?;
        let state = AppState::open(catalog, &args.out).map_err(CliError::runtime)?;
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port))
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {}:{}: {e}", args.host, args.port)))?;
        let addr = listener.local_addr().map_err(CliError::runtime)?;
        tracing::info!(%addr, sessions = state.n_sessions(), datasets = state.catalog().len(), "listening");
        active_testing_service::serve(listener, state, shutdown_signal())
            .await
            .map_err(CliError::runtime)
    })
}
