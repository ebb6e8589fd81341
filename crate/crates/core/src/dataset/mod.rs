//! Partially vetted test sets.
//!
//! An [`EvaluationPool`] holds scored items whose labels are either still
//! noisy ([`LabelState::Unvetted`]) or have been checked by an oracle
//! ([`LabelState::Vetted`]). The vetted/unvetted partition lives entirely in
//! the label states, so `|U| + |V| = N` holds by construction.

mod geometry;
mod instances;
mod io;
mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use geometry::{BoundingBox, DetectionInstance, GroundTruthInstance, Mask};
pub use instances::{build_benchmark, pair_detections, InstancePair, PairFeatures};
pub use io::{
    load_instance_dataset, load_tag_dataset, read_detections, read_ground_truth, write_detections,
    write_ground_truth, write_tag_dataset, DatasetSource, TagFormat, TagRecord, DETECTIONS_FILE,
    GROUND_TRUTH_FILE,
};
pub use synth::{
    synthesize_instance_dataset, synthesize_tag_dataset, synthesize_tag_systems, FlipPair,
    InstanceSynthSpec, ScoreModel, ShapeFamily, TagSynthSpec,
};

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("duplicate id at line {line}: {id}")]
    DuplicateId { id: String, line: usize },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("item {0} has a non-finite score")]
    NonFiniteScore(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("item {0} is already vetted")]
    AlreadyVetted(String),
    #[error("item {0} has no hidden truth for a simulated oracle")]
    NoSimulatedTruth(String),
    #[error("item {id}: vetted truth disagrees with hidden truth")]
    TruthMismatch { id: String },
    #[error("instance {id}: {message}")]
    Instance { id: String, message: String },
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("views disagree: {0}")]
    ViewMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

impl ItemId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ItemId {
    fn from(s: &str) -> Self {
        ItemId(s.to_owned())
    }
}

impl From<String> for ItemId {
    fn from(s: String) -> Self {
        ItemId(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub String);

impl CategoryId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for CategoryId {
    fn from(s: &str) -> Self {
        CategoryId(s.to_owned())
    }
}

/// Label of one item. The noisy observation is kept after vetting since
/// flip priors are fit on `(noisy, truth)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelState {
    Unvetted { noisy: bool },
    Vetted { noisy: bool, truth: bool },
}

impl LabelState {
    pub fn noisy(&self) -> bool {
        match *self {
            LabelState::Unvetted { noisy } | LabelState::Vetted { noisy, .. } => noisy,
        }
    }

    pub fn truth(&self) -> Option<bool> {
        match *self {
            LabelState::Unvetted { .. } => None,
            LabelState::Vetted { truth, .. } => Some(truth),
        }
    }

    pub fn is_vetted(&self) -> bool {
        matches!(self, LabelState::Vetted { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestItem {
    pub id: ItemId,
    pub category: CategoryId,
    pub score: f64,
    pub label: LabelState,
    /// Hidden truth, only present in simulations.
    pub sim_truth: Option<bool>,
    /// Geometry of the detection/ground-truth pair this item stands for.
    pub features: Option<PairFeatures>,
    /// Opaque display payload passed through to vetting clients.
    pub meta: Option<serde_json::Value>,
}

impl TestItem {
    pub fn new(id: impl Into<ItemId>, category: &str, score: f64, noisy: bool) -> Self {
        TestItem {
            id: id.into(),
            category: CategoryId::from(category),
            score,
            label: LabelState::Unvetted { noisy },
            sim_truth: None,
            features: None,
            meta: None,
        }
    }

    pub fn with_sim_truth(mut self, truth: bool) -> Self {
        self.sim_truth = Some(truth);
        self
    }

    pub fn vetted(mut self, truth: bool) -> Self {
        self.label = LabelState::Vetted {
            noisy: self.label.noisy(),
            truth,
        };
        self
    }
}

/// Scored items grouped by category, each category ranked by descending
/// score with ties broken by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationPool {
    items: Vec<TestItem>,
    index: HashMap<ItemId, usize>,
    order: BTreeMap<CategoryId, Vec<usize>>,
    positive_totals: BTreeMap<CategoryId, usize>,
    n_vetted: usize,
}

impl EvaluationPool {
    pub fn new(items: Vec<TestItem>) -> Result<Self, DatasetError> {
        let mut index = HashMap::with_capacity(items.len());
        let mut n_vetted = 0;
        for (pos, item) in items.iter().enumerate() {
            if !item.score.is_finite() {
                return Err(DatasetError::NonFiniteScore(item.id.0.clone()));
            }
            if let (Some(truth), Some(hidden)) = (item.label.truth(), item.sim_truth) {
                if truth != hidden {
                    return Err(DatasetError::TruthMismatch {
                        id: item.id.0.clone(),
                    });
                }
            }
            if index.insert(item.id.clone(), pos).is_some() {
                return Err(DatasetError::DuplicateId {
                    id: item.id.0.clone(),
                    line: pos + 1,
                });
            }
            n_vetted += usize::from(item.label.is_vetted());
        }
        let mut order: BTreeMap<CategoryId, Vec<usize>> = BTreeMap::new();
        for (pos, item) in items.iter().enumerate() {
            order.entry(item.category.clone()).or_default().push(pos);
        }
        for ranked in order.values_mut() {
            ranked.sort_by(|&a, &b| {
                let (a, b) = (&items[a], &items[b]);
                b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
            });
        }
        Ok(EvaluationPool {
            items,
            index,
            order,
            positive_totals: BTreeMap::new(),
            n_vetted,
        })
    }

    /// Fixes the number of positives of a category independently of the
    /// items, e.g. the ground-truth instance count when some instances were
    /// never retrieved.
    pub fn with_positive_totals(mut self, totals: BTreeMap<CategoryId, usize>) -> Self {
        self.positive_totals = totals;
        self
    }

    pub fn positive_total(&self, category: &CategoryId) -> Option<usize> {
        self.positive_totals.get(category).copied()
    }

    pub fn positive_totals(&self) -> &BTreeMap<CategoryId, usize> {
        &self.positive_totals
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_vetted(&self) -> usize {
        self.n_vetted
    }

    pub fn n_unvetted(&self) -> usize {
        self.items.len() - self.n_vetted
    }

    pub fn vetted_fraction(&self) -> f64 {
        if self.items.is_empty() {
            1.0
        } else {
            self.n_vetted as f64 / self.items.len() as f64
        }
    }

    pub fn items(&self) -> &[TestItem] {
        &self.items
    }

    pub fn get(&self, id: &ItemId) -> Option<&TestItem> {
        self.index.get(id).map(|&pos| &self.items[pos])
    }

    pub fn position(&self, id: &ItemId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn categories(&self) -> impl Iterator<Item = &CategoryId> {
        self.order.keys()
    }

    pub fn n_categories(&self) -> usize {
        self.order.len()
    }

    /// Item positions of `category`, best score first.
    pub fn ranked(&self, category: &CategoryId) -> &[usize] {
        self.order.get(category).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn ranked_items<'a>(
        &'a self,
        category: &CategoryId,
    ) -> impl Iterator<Item = &'a TestItem> + 'a {
        self.ranked(category)
            .iter()
            .map(move |&pos| &self.items[pos])
    }

    pub fn unvetted(&self) -> impl Iterator<Item = &TestItem> {
        self.items.iter().filter(|item| !item.label.is_vetted())
    }

    pub fn vetted(&self) -> impl Iterator<Item = &TestItem> {
        self.items.iter().filter(|item| item.label.is_vetted())
    }

    /// Reveals the hidden truth of an unvetted item.
    pub fn vet_item(&mut self, id: &ItemId) -> Result<bool, DatasetError> {
        let pos = self.unvetted_position(id)?;
        let truth = self.items[pos]
            .sim_truth
            .ok_or_else(|| DatasetError::NoSimulatedTruth(id.0.clone()))?;
        self.set_vetted(pos, truth);
        Ok(truth)
    }

    /// Records a truth supplied by an external oracle.
    pub fn vet_with(&mut self, id: &ItemId, truth: bool) -> Result<(), DatasetError> {
        let pos = self.unvetted_position(id)?;
        if let Some(hidden) = self.items[pos].sim_truth {
            if hidden != truth {
                return Err(DatasetError::TruthMismatch { id: id.0.clone() });
            }
        }
        self.set_vetted(pos, truth);
        Ok(())
    }

    fn unvetted_position(&self, id: &ItemId) -> Result<usize, DatasetError> {
        let pos = self
            .position(id)
            .ok_or_else(|| DatasetError::UnknownItem(id.0.clone()))?;
        if self.items[pos].label.is_vetted() {
            return Err(DatasetError::AlreadyVetted(id.0.clone()));
        }
        Ok(pos)
    }

    fn set_vetted(&mut self, pos: usize, truth: bool) {
        let item = &mut self.items[pos];
        item.label = LabelState::Vetted {
            noisy: item.label.noisy(),
            truth,
        };
        self.n_vetted += 1;
    }

    /// Sub-pool holding only the given items; rankings are rebuilt.
    pub fn restrict<F>(&self, mut keep: F) -> EvaluationPool
    where
        F: FnMut(&TestItem) -> bool,
    {
        let items = self.items.iter().filter(|i| keep(i)).cloned().collect();
        EvaluationPool::new(items)
            .expect("subset of a valid pool is valid")
            .with_positive_totals(self.positive_totals.clone())
    }

    /// Whether every item carries a hidden truth.
    pub fn is_simulated(&self) -> bool {
        self.items.iter().all(|item| item.sim_truth.is_some())
    }
}

/// One or more label views over the same items.
///
/// Tag data has a single view. Instance data has one view per IoU
/// threshold: the items (detections) and scores are shared, while the
/// binary match label differs per threshold. Vetting an item reveals it in
/// every view at once.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    views: Vec<EvaluationPool>,
    thresholds: Vec<f64>,
}

impl Benchmark {
    pub fn single(pool: EvaluationPool) -> Self {
        Benchmark {
            views: vec![pool],
            thresholds: Vec::new(),
        }
    }

    pub fn from_views(
        views: Vec<EvaluationPool>,
        thresholds: Vec<f64>,
    ) -> Result<Self, DatasetError> {
        let Some(first) = views.first() else {
            return Err(DatasetError::ViewMismatch("no views".into()));
        };
        if !thresholds.is_empty() && thresholds.len() != views.len() {
            return Err(DatasetError::ViewMismatch(format!(
                "{} views for {} thresholds",
                views.len(),
                thresholds.len()
            )));
        }
        for view in &views[1..] {
            let same = view.len() == first.len()
                && view.items().iter().zip(first.items()).all(|(a, b)| {
                    a.id == b.id
                        && a.category == b.category
                        && a.score == b.score
                        && a.label.is_vetted() == b.label.is_vetted()
                });
            if !same {
                return Err(DatasetError::ViewMismatch(
                    "views must share items, scores and vetting state".into(),
                ));
            }
        }
        Ok(Benchmark { views, thresholds })
    }

    pub fn views(&self) -> &[EvaluationPool] {
        &self.views
    }

    pub fn primary(&self) -> &EvaluationPool {
        &self.views[0]
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn vet_simulated(&mut self, id: &ItemId) -> Result<(), DatasetError> {
        // check every view first so a failure leaves all views untouched
        for view in &self.views {
            let item = view
                .get(id)
                .ok_or_else(|| DatasetError::UnknownItem(id.0.clone()))?;
            if item.label.is_vetted() {
                return Err(DatasetError::AlreadyVetted(id.0.clone()));
            }
            if item.sim_truth.is_none() {
                return Err(DatasetError::NoSimulatedTruth(id.0.clone()));
            }
        }
        for view in &mut self.views {
            view.vet_item(id)?;
        }
        Ok(())
    }

    /// Records an externally supplied truth. Only meaningful for a single
    /// view, since one binary answer cannot cover several thresholds.
    pub fn vet_external(&mut self, id: &ItemId, truth: bool) -> Result<(), DatasetError> {
        if self.views.len() != 1 {
            return Err(DatasetError::ViewMismatch(
                "external answers need a single-view benchmark".into(),
            ));
        }
        self.views[0].vet_with(id, truth)
    }

    pub fn restrict<F>(&self, mut keep: F) -> Benchmark
    where
        F: FnMut(&TestItem) -> bool,
    {
        let ids: std::collections::HashSet<ItemId> = self
            .primary()
            .items()
            .iter()
            .filter(|i| keep(i))
            .map(|i| i.id.clone())
            .collect();
        Benchmark {
            views: self
                .views
                .iter()
                .map(|v| v.restrict(|i| ids.contains(&i.id)))
                .collect(),
            thresholds: self.thresholds.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool() -> EvaluationPool {
        EvaluationPool::new(vec![
            TestItem::new("a", "cat", 0.9, true).with_sim_truth(false),
            TestItem::new("b", "cat", 0.5, false).with_sim_truth(true),
            TestItem::new("c", "cat", 0.7, false).with_sim_truth(false),
            TestItem::new("d", "dog", 0.2, true).with_sim_truth(true),
        ])
        .unwrap()
    }

    fn ranked_ids(pool: &EvaluationPool, cat: &str) -> Vec<String> {
        pool.ranked_items(&CategoryId::from(cat))
            .map(|i| i.id.0.clone())
            .collect()
    }

    #[test]
    fn ranks_by_descending_score() {
        assert_eq!(ranked_ids(&pool(), "cat"), ["a", "c", "b"]);
    }

    #[test]
    fn ties_break_on_ascending_id() {
        let pool = EvaluationPool::new(vec![
            TestItem::new("z", "c", 0.5, false),
            TestItem::new("m", "c", 0.5, false),
            TestItem::new("a", "c", 0.1, false),
        ])
        .unwrap();
        assert_eq!(ranked_ids(&pool, "c"), ["m", "z", "a"]);
    }

    #[test]
    fn vetting_reveals_hidden_truth_and_keeps_noisy() {
        let mut pool = pool();
        let truth = pool.vet_item(&"a".into()).unwrap();
        assert!(!truth);
        assert_eq!(
            pool.get(&"a".into()).unwrap().label,
            LabelState::Vetted {
                noisy: true,
                truth: false
            }
        );
        assert_eq!(pool.n_vetted(), 1);
        assert_eq!(pool.n_unvetted(), 3);
    }

    #[test]
    fn double_vet_is_rejected() {
        let mut pool = pool();
        pool.vet_item(&"a".into()).unwrap();
        assert_eq!(
            pool.vet_item(&"a".into()),
            Err(DatasetError::AlreadyVetted("a".into()))
        );
        assert_eq!(pool.n_vetted(), 1);
    }

    #[test]
    fn vet_everything_empties_u() {
        let mut pool = pool();
        let ids: Vec<ItemId> = pool.items().iter().map(|i| i.id.clone()).collect();
        for id in &ids {
            pool.vet_item(id).unwrap();
        }
        assert_eq!(pool.n_unvetted(), 0);
        assert_eq!(pool.n_vetted(), pool.len());
        assert_eq!(pool.vetted_fraction(), 1.0);
    }

    #[test]
    fn rejects_duplicates_and_non_finite_scores() {
        let dup = EvaluationPool::new(vec![
            TestItem::new("a", "c", 0.1, false),
            TestItem::new("a", "c", 0.2, false),
        ]);
        assert!(matches!(dup, Err(DatasetError::DuplicateId { .. })));
        let nan = EvaluationPool::new(vec![TestItem::new("a", "c", f64::NAN, false)]);
        assert_eq!(nan, Err(DatasetError::NonFiniteScore("a".into())));
    }

    #[test]
    fn external_truth_must_match_hidden_truth() {
        let mut pool = pool();
        assert!(pool.vet_with(&"b".into(), false).is_err());
        pool.vet_with(&"b".into(), true).unwrap();
    }

    #[test]
    fn views_vet_together() {
        let mut bench = Benchmark::from_views(vec![pool(), pool()], vec![0.5, 0.75]).unwrap();
        bench.vet_simulated(&"c".into()).unwrap();
        assert!(bench.views().iter().all(|v| v.n_vetted() == 1));
        assert!(bench.vet_external(&"a".into(), true).is_err());
    }
}
