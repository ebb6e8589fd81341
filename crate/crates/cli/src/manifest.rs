//! TOML manifests. Relative paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use active_testing::dataset::{
    build_benchmark, synthesize_instance_dataset, synthesize_tag_dataset, synthesize_tag_systems,
    Benchmark, DatasetSource, InstanceSynthSpec, ScoreModel, TagFormat, TagSynthSpec,
};
use active_testing::engine::{default_report_fractions, Budget, RunConfig};
use active_testing::estimators::EstimatorKind;
use active_testing::metrics::MetricSpec;
use active_testing::strategies::VettingStrategyKind;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::CliError;

pub fn read_manifest<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::Validation(format!("cannot read manifest {}: {e}", path.display()))
    })?;
    toml::from_str(&text)
        .map_err(|e| CliError::Validation(format!("manifest {}: {e}", path.display())))
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Exactly one of the three.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub path: Option<PathBuf>,
    pub synth_tag: Option<TagSynthSpec>,
    pub synth_instance: Option<InstanceSynthSpec>,
}

impl DatasetSpec {
    pub fn load(&self, base: &Path, metric: &MetricSpec) -> Result<Benchmark, CliError> {
        match (&self.path, &self.synth_tag, &self.synth_instance) {
            (Some(path), None, None) => {
                let source =
                    DatasetSource::load(&resolve(base, path)).map_err(CliError::validation)?;
                source
                    .benchmark(&metric.iou_thresholds())
                    .map_err(CliError::validation)
            }
            (None, Some(spec), None) => Ok(Benchmark::single(
                synthesize_tag_dataset(spec).map_err(CliError::validation)?,
            )),
            (None, None, Some(spec)) => {
                let (dets, gts) =
                    synthesize_instance_dataset(spec).map_err(CliError::validation)?;
                build_benchmark(&dets, &gts, &metric.iou_thresholds()).map_err(CliError::validation)
            }
            _ => Err(CliError::Validation(
                "dataset needs exactly one of path, synth_tag, synth_instance".into(),
            )),
        }
    }
}

/// Strategy names: `random`, `mcm`, `meec` (the MEEC variant matching the
/// metric), `meec_prec`, `meec_ap`.
pub fn resolve_strategy(name: &str, metric: &MetricSpec) -> Result<VettingStrategyKind, CliError> {
    let prec = |what: &str| {
        metric
            .top_k()
            .map(|k| VettingStrategyKind::MeecPrec { k })
            .ok_or_else(|| {
                CliError::Validation(format!("strategy {what} needs a prec_at_k metric"))
            })
    };
    match name {
        "random" => Ok(VettingStrategyKind::Random),
        "mcm" => Ok(VettingStrategyKind::Mcm),
        "meec" if metric.top_k().is_some() => prec(name),
        "meec" | "meec_ap" => Ok(VettingStrategyKind::MeecAp),
        "meec_prec" => prec(name),
        other => Err(CliError::Validation(format!(
            "unknown strategy {other}; expected random, mcm, meec, meec_prec or meec_ap"
        ))),
    }
}

/// The (estimator × strategy) grid shared by both experiment manifests.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub metric: MetricSpec,
    pub estimators: Vec<EstimatorKind>,
    pub strategies: Vec<String>,
    pub batch_size: usize,
    #[serde(default)]
    pub budget: Budget,
    #[serde(default = "default_report_fractions")]
    pub report_at: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: String,
    pub config: RunConfig,
}

impl GridSpec {
    /// Every cell, validated. Cell ids read `estimator__strategy`.
    pub fn cells(&self) -> Result<Vec<Cell>, CliError> {
        if self.estimators.is_empty() || self.strategies.is_empty() {
            return Err(CliError::Validation(
                "the estimator × strategy grid is empty".into(),
            ));
        }
        let mut cells = Vec::new();
        for estimator in &self.estimators {
            for name in &self.strategies {
                let id = format!("{}__{name}", estimator.name());
                let config = RunConfig {
                    budget: self.budget,
                    report_at: self.report_at.clone(),
                    ..RunConfig::new(
                        self.metric.clone(),
                        *estimator,
                        resolve_strategy(name, &self.metric)?,
                        self.batch_size,
                    )
                };
                config
                    .validate()
                    .map_err(|e| CliError::Validation(format!("cell {id}: {e}")))?;
                if cells.iter().any(|c: &Cell| c.id == id) {
                    return Err(CliError::Validation(format!("cell {id} appears twice")));
                }
                cells.push(Cell { id, config });
            }
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateManifest {
    pub dataset: DatasetSpec,
    pub grid: GridSpec,
    #[serde(default = "one")]
    pub n_runs: usize,
    #[serde(default)]
    pub seed: u64,
    pub output: Option<PathBuf>,
}

fn one() -> usize {
    1
}

fn default_trials() -> usize {
    200
}

fn yes() -> bool {
    true
}

/// Two score files over the same items, or two score models drawn over
/// shared labels.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemsSpec {
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
    pub synth: Option<SynthSystems>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSystems {
    #[serde(default)]
    pub spec: TagSynthSpec,
    pub a: ScoreModel,
    pub b: ScoreModel,
    /// Draw a fresh dataset per trial from the trial seed.
    #[serde(default = "yes")]
    pub redraw: bool,
}

impl SynthSystems {
    pub fn draw(&self, seed: u64) -> Result<(Benchmark, Benchmark), CliError> {
        let spec = TagSynthSpec {
            seed,
            ..self.spec.clone()
        };
        let mut pools =
            synthesize_tag_systems(&spec, &[self.a, self.b]).map_err(CliError::validation)?;
        let b = pools.pop().expect("two systems");
        let a = pools.pop().expect("two systems");
        Ok((Benchmark::single(a), Benchmark::single(b)))
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankManifest {
    pub systems: SystemsSpec,
    pub grid: GridSpec,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl RankManifest {
    pub fn load_files(&self, base: &Path) -> Result<Option<(Benchmark, Benchmark)>, CliError> {
        match (&self.systems.a, &self.systems.b, &self.systems.synth) {
            (Some(a), Some(b), None) => {
                let load = |p: &PathBuf| -> Result<Benchmark, CliError> {
                    DatasetSource::load(&resolve(base, p))
                        .and_then(|s| s.benchmark(&self.grid.metric.iou_thresholds()))
                        .map_err(CliError::validation)
                };
                Ok(Some((load(a)?, load(b)?)))
            }
            (None, None, Some(_)) => Ok(None),
            _ => Err(CliError::Validation(
                "systems needs either a and b, or synth".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedScoreModel {
    pub name: String,
    #[serde(default)]
    pub score: ScoreModel,
}

/// Either `[tag]` or `[instance]`. With `[[systems]]`, a tag spec writes
/// one file per score model into the output directory.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenManifest {
    pub tag: Option<TagSynthSpec>,
    pub instance: Option<InstanceSynthSpec>,
    #[serde(default)]
    pub systems: Vec<NamedScoreModel>,
    pub format: Option<TagFormat>,
}

impl GenManifest {
    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.tag, &self.instance) {
            (Some(spec), None) => spec.validate().map_err(CliError::validation),
            (None, Some(_)) if !self.systems.is_empty() => Err(CliError::Validation(
                "systems apply to tag specs only".into(),
            )),
            (None, Some(_)) => Ok(()),
            _ => Err(CliError::Validation(
                "gen needs exactly one of [tag] or [instance]".into(),
            )),
        }
    }
}
