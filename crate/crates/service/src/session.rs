use std::collections::BTreeMap;
use std::path::Path;

use active_testing::dataset::{CategoryId, DatasetSource, ItemId};
use active_testing::engine::{ActiveRun, RunConfig, SubmitOutcome};
use chrono::Utc;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::catalog::Catalog;
use crate::error::ServiceError;
use crate::events::{EventLog, SessionEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchItem {
    pub id: ItemId,
    pub category: CategoryId,
    pub score: f64,
    pub noisy_label: bool,
    /// Passed through from the dataset untouched.
    pub metadata: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchStatus {
    Pending,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPayload {
    pub session_id: Uuid,
    pub status: BatchStatus,
    /// Index of this batch, counting from 0.
    pub batch: usize,
    pub items: Vec<BatchItem>,
    pub answered: Vec<ItemId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub step: usize,
    pub vets: usize,
    pub vetted_fraction: f64,
    pub overall_mean: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub answered: usize,
    pub size: usize,
}

/// Everything here comes from the latest completed step, read under one
/// lock. Answers inside a pending batch show only in `pending`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSnapshot {
    pub session_id: Uuid,
    /// Number of logged events. Grows with every change of state.
    pub version: usize,
    /// Completed batches.
    pub step: usize,
    pub vets: usize,
    pub vetted_fraction: f64,
    pub per_category: BTreeMap<CategoryId, Option<f64>>,
    pub overall_mean: Option<f64>,
    pub not_applicable: usize,
    pub pending: Option<Progress>,
    pub finished: bool,
    pub history: Vec<HistoryPoint>,
}

#[derive(Debug)]
pub struct Session {
    id: Uuid,
    dataset: String,
    run: ActiveRun<f64>,
    events: Vec<SessionEvent>,
    log: EventLog,
}

fn build_run(source: &DatasetSource, config: RunConfig) -> Result<ActiveRun<f64>, ServiceError> {
    let bench = source.benchmark(&config.metric.iou_thresholds())?;
    Ok(ActiveRun::new(bench, config)?)
}

impl Session {
    pub fn create(
        id: Uuid,
        dataset: &str,
        source: &DatasetSource,
        config: RunConfig,
        dir: &Path,
    ) -> Result<Self, ServiceError> {
        let run = build_run(source, config.clone())?;
        let mut log = EventLog::create(&dir.join(format!("{id}.jsonl")))?;
        let created = SessionEvent::Created {
            session_id: id,
            dataset: dataset.to_owned(),
            config,
            at: Utc::now(),
        };
        log.append(&created)?;
        Ok(Session {
            id,
            dataset: dataset.to_owned(),
            run,
            events: vec![created],
            log,
        })
    }

    /// Rebuilds a session by running its logged events through a fresh
    /// run. Selection is deterministic, so every logged batch must come
    /// out the same.
    pub fn replay(path: &Path, catalog: &Catalog) -> Result<Self, ServiceError> {
        let events = EventLog::read(path)?;
        let fail = |message: String| ServiceError::Replay {
            session: path.display().to_string(),
            message,
        };
        let Some(SessionEvent::Created {
            session_id,
            dataset,
            config,
            ..
        }) = events.first()
        else {
            return Err(fail("log does not start with a creation event".into()));
        };
        let source = catalog
            .get(dataset)
            .ok_or_else(|| fail(format!("dataset {dataset} is not loaded")))?;
        let mut run = build_run(source, config.clone())?;
        for event in &events[1..] {
            match event {
                SessionEvent::BatchIssued { batch, items, .. } => {
                    let issued = run.next_batch()?;
                    if &issued.ids != items || run.batches_completed() != *batch {
                        return Err(fail(format!("batch {batch} differs from the log")));
                    }
                }
                SessionEvent::VetSubmitted { item, truth, .. } => {
                    if !run.awaiting(item) {
                        return Err(fail(format!("item {item} was not awaiting an answer")));
                    }
                    run.submit(item, *truth)?;
                }
                SessionEvent::Created { .. } => return Err(fail("second creation event".into())),
            }
        }
        Ok(Session {
            id: *session_id,
            dataset: dataset.clone(),
            run,
            events,
            log: EventLog::open(path)?,
        })
    }

    pub fn id(&self) -> Uuid {
        self.id
    }

    pub fn dataset(&self) -> &str {
        &self.dataset
    }

    pub fn run(&self) -> &ActiveRun<f64> {
        &self.run
    }

    pub fn history(&self) -> &[SessionEvent] {
        &self.events
    }

    fn record(&mut self, event: SessionEvent) -> Result<(), ServiceError> {
        self.log.append(&event)?;
        self.events.push(event);
        Ok(())
    }

    /// The pending batch, issuing a new one if none is pending.
    pub fn batch(&mut self) -> Result<BatchPayload, ServiceError> {
        let fresh = self.run.pending().is_none() && !self.run.is_finished();
        let ids = self.run.next_batch()?.ids.clone();
        if fresh && !ids.is_empty() {
            self.record(SessionEvent::BatchIssued {
                batch: self.run.batches_completed(),
                items: ids.clone(),
                at: Utc::now(),
            })?;
        }
        let pool = self.run.benchmark().primary();
        let items = ids
            .iter()
            .map(|id| {
                let item = pool.get(id).expect("selected items exist");
                BatchItem {
                    id: id.clone(),
                    category: item.category.clone(),
                    score: item.score,
                    noisy_label: item.label.noisy(),
                    metadata: item.meta.clone(),
                }
            })
            .collect();
        Ok(BatchPayload {
            session_id: self.id,
            status: if ids.is_empty() {
                BatchStatus::Exhausted
            } else {
                BatchStatus::Pending
            },
            batch: self.run.batches_completed(),
            items,
            answered: self
                .run
                .pending()
                .map(|p| p.answers.keys().cloned().collect())
                .unwrap_or_default(),
        })
    }

    /// Only answers that change state are logged; replays and conflicts
    /// leave no trace.
    pub fn submit(&mut self, item: &ItemId, truth: bool) -> Result<SubmitOutcome, ServiceError> {
        if !self.run.awaiting(item) {
            return Ok(self.run.submit(item, truth)?);
        }
        self.record(SessionEvent::VetSubmitted {
            item: item.clone(),
            truth,
            at: Utc::now(),
        })?;
        Ok(self.run.submit(item, truth)?)
    }

    pub fn estimate(&self) -> EstimateSnapshot {
        let latest = self.run.latest();
        let system = &latest.systems[0];
        EstimateSnapshot {
            session_id: self.id,
            version: self.events.len(),
            step: latest.batches,
            vets: latest.vets,
            vetted_fraction: latest.vetted_fraction,
            per_category: system.estimate.clone(),
            overall_mean: system.mean_estimate,
            not_applicable: system.not_applicable,
            pending: self.run.pending().map(|p| Progress {
                answered: p.answers.len(),
                size: p.batch.ids.len(),
            }),
            finished: self.run.is_finished(),
            history: self
                .run
                .steps()
                .iter()
                .map(|s| HistoryPoint {
                    step: s.batches,
                    vets: s.vets,
                    vetted_fraction: s.vetted_fraction,
                    overall_mean: s.systems[0].mean_estimate,
                })
                .collect(),
        }
    }

    pub fn sync(&self) -> Result<(), ServiceError> {
        self.log.sync()
    }
}
