//! Posterior estimates for unvetted labels and the metric estimates they
//! induce.

mod logistic;
mod matching;
mod tag;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Benchmark, CategoryId, EvaluationPool, ItemId};
use crate::metrics::{
    average_precision, expected_ap, expected_prec_at_k, prec_at_k, LabelBelief, MetricError,
    MetricSpec, PositiveCount,
};
use crate::scalar::Real;

pub use logistic::{fit_logistic, LogisticFit, LogisticOptions};
pub use matching::{
    fit_match_examples, fit_match_on_pool, fit_match_predictor, match_probability, MatchExample,
    MatchModel, MatchPredictor, MIN_MATCH_EXAMPLES,
};
pub use tag::{
    bayes_combine, fit_calibration, fit_flip_priors, fit_score_calibrator, tag_posterior,
    CalibrationModel, FlipEntry, FlipPriors, ScoreCalibrator, TagModel, TagPosterior,
    MIN_VETTED_PER_CATEGORY,
};

/// Threshold recorded on a match model fit to a view without one.
const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("{have} training examples, at least {need} required")]
    InsufficientData { have: usize, need: usize },
    #[error("feature {0} has a zero normalization scale")]
    ZeroScale(usize),
    #[error("item {0} is already vetted")]
    VettedItem(String),
    #[error("item {0} has no instance features")]
    MissingFeatures(String),
    #[error("posterior for {0} lies outside [0, 1]")]
    InvalidProbability(String),
    #[error("metric needs {needed} label views, benchmark has {found}")]
    ViewMismatch { needed: usize, found: usize },
    #[error("item {0} has no known truth")]
    MissingTruth(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("model serialization: {0}")]
    Serde(String),
}

/// `p(z_i = 1 | O)` for every unvetted item of one label view.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEstimate<T> {
    probs: HashMap<ItemId, T>,
}

impl<T: Real> PosteriorEstimate<T> {
    pub fn new(probs: HashMap<ItemId, T>) -> Result<Self, EstimatorError> {
        if let Some((id, _)) = probs.iter().find(|(_, p)| !p.is_probability()) {
            return Err(EstimatorError::InvalidProbability(id.0.clone()));
        }
        Ok(PosteriorEstimate { probs })
    }

    pub fn get(&self, id: &ItemId) -> Option<T> {
        self.probs.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Entries in id order.
    pub fn sorted(&self) -> BTreeMap<&ItemId, T> {
        self.probs.iter().map(|(id, p)| (id, *p)).collect()
    }
}

impl<T: Serialize> Serialize for PosteriorEstimate<T> {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let sorted: BTreeMap<&ItemId, &T> = self.probs.iter().collect();
        sorted.serialize(serializer)
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for PosteriorEstimate<T> {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let probs = BTreeMap::<ItemId, T>::deserialize(deserializer)?;
        Ok(PosteriorEstimate {
            probs: probs.into_iter().collect(),
        })
    }
}

/// `p_i = y_i` for every unvetted item.
pub fn naive_posterior<T: Real>(pool: &EvaluationPool) -> PosteriorEstimate<T> {
    PosteriorEstimate {
        probs: pool
            .unvetted()
            .map(|item| (item.id.clone(), T::indicator(item.label.noisy())))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    VettedOnly,
    Naive,
    LearnedTag,
    LearnedMatch,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::VettedOnly,
        EstimatorKind::Naive,
        EstimatorKind::LearnedTag,
        EstimatorKind::LearnedMatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::VettedOnly => "vetted_only",
            EstimatorKind::Naive => "naive",
            EstimatorKind::LearnedTag => "learned_tag",
            EstimatorKind::LearnedMatch => "learned_match",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(
            self,
            EstimatorKind::LearnedTag | EstimatorKind::LearnedMatch
        )
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown estimator `{s}`"))
    }
}

/// The fitted posterior model for one label view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViewModel<T> {
    VettedOnly,
    Naive,
    Tag(TagModel<T>),
    Match(MatchPredictor<T>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedEstimator<T> {
    pub kind: EstimatorKind,
    pub views: Vec<ViewModel<T>>,
}

impl<T: Real> FittedEstimator<T> {
    /// Fits one model per view on its vetted items. A learned estimator
    /// with nothing to learn from yet behaves like the naive one.
    pub fn fit(kind: EstimatorKind, bench: &Benchmark) -> Result<Self, EstimatorError> {
        let views = bench
            .views()
            .iter()
            .enumerate()
            .map(|(i, pool)| match kind {
                EstimatorKind::VettedOnly => Ok(ViewModel::VettedOnly),
                EstimatorKind::Naive => Ok(ViewModel::Naive),
                EstimatorKind::LearnedTag if pool.n_vetted() == 0 => Ok(ViewModel::Naive),
                EstimatorKind::LearnedTag => Ok(ViewModel::Tag(TagModel::fit(pool))),
                EstimatorKind::LearnedMatch => {
                    if let Some(item) = pool.unvetted().find(|i| i.features.is_none()) {
                        return Err(EstimatorError::MissingFeatures(item.id.0.clone()));
                    }
                    let threshold = bench
                        .thresholds()
                        .get(i)
                        .copied()
                        .unwrap_or(DEFAULT_MATCH_THRESHOLD);
                    match fit_match_on_pool(pool, threshold) {
                        Ok(model) => Ok(ViewModel::Match(model)),
                        Err(EstimatorError::InsufficientData { .. }) => Ok(ViewModel::Naive),
                        Err(e) => Err(e),
                    }
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(FittedEstimator { kind, views })
    }

    /// Posterior per view. The vetted-only estimator never reads it, but
    /// strategies that need probabilities get the naive ones.
    pub fn posteriors(
        &self,
        bench: &Benchmark,
    ) -> Result<Vec<PosteriorEstimate<T>>, EstimatorError> {
        self.views
            .iter()
            .zip(bench.views())
            .map(|(model, pool)| match model {
                ViewModel::VettedOnly | ViewModel::Naive => Ok(naive_posterior(pool)),
                ViewModel::Tag(m) => m.posterior(pool),
                ViewModel::Match(m) => m.posterior(pool),
            })
            .collect()
    }

    /// Per-category estimate of `spec`. `None` marks a category where the
    /// estimator is not applicable.
    pub fn estimate(
        &self,
        bench: &Benchmark,
        spec: &MetricSpec,
        posteriors: &[PosteriorEstimate<T>],
    ) -> Result<BTreeMap<CategoryId, Option<T>>, EstimatorError> {
        let views = metric_views(bench, spec)?;
        combine_views(bench.primary(), views, |v, category| {
            let pool = &bench.views()[v];
            match self.kind {
                EstimatorKind::VettedOnly => vetted_only_metric(pool, category, spec),
                _ => {
                    let beliefs = ranked_beliefs(pool, category, &posteriors[v])?;
                    model_metric(pool, category, spec, &beliefs)
                }
            }
        })
    }

    pub fn to_json(&self) -> Result<String, EstimatorError>
    where
        T: Serialize,
    {
        serde_json::to_string(self).map_err(|e| EstimatorError::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, EstimatorError>
    where
        T: for<'de> Deserialize<'de>,
    {
        serde_json::from_str(s).map_err(|e| EstimatorError::Serde(e.to_string()))
    }
}

/// Which views a metric averages over.
pub fn metric_views(
    bench: &Benchmark,
    spec: &MetricSpec,
) -> Result<std::ops::Range<usize>, EstimatorError> {
    match spec {
        MetricSpec::PrecAtK { .. } | MetricSpec::AveragePrecision => Ok(0..1),
        MetricSpec::MeanAp { iou_thresholds } => {
            if iou_thresholds.len() != bench.views().len() {
                return Err(EstimatorError::ViewMismatch {
                    needed: iou_thresholds.len(),
                    found: bench.views().len(),
                });
            }
            Ok(0..iou_thresholds.len())
        }
    }
}

/// Averages a per-view value over the metric's views, ignoring views where
/// it is undefined.
fn combine_views<T, F>(
    primary: &EvaluationPool,
    views: std::ops::Range<usize>,
    mut per_view: F,
) -> Result<BTreeMap<CategoryId, Option<T>>, EstimatorError>
where
    T: Real,
    F: FnMut(usize, &CategoryId) -> Result<Option<T>, EstimatorError>,
{
    let mut out = BTreeMap::new();
    for category in primary.categories() {
        let mut sum = T::zero();
        let mut n = 0;
        for v in views.clone() {
            if let Some(x) = per_view(v, category)? {
                sum = sum + x;
                n += 1;
            }
        }
        let value = match n {
            0 => None,
            1 => Some(sum),
            _ => Some(sum / T::from_count(n)),
        };
        out.insert(category.clone(), value);
    }
    Ok(out)
}

/// Beliefs in rank order: vetted truths, posterior probabilities elsewhere.
pub fn ranked_beliefs<T: Real>(
    pool: &EvaluationPool,
    category: &CategoryId,
    posterior: &PosteriorEstimate<T>,
) -> Result<Vec<LabelBelief<T>>, EstimatorError> {
    pool.ranked_items(category)
        .map(|item| match item.label.truth() {
            Some(z) => Ok(LabelBelief::Known(z)),
            None => posterior
                .get(&item.id)
                .map(LabelBelief::Uncertain)
                .ok_or_else(|| MetricError::MissingPosterior(item.id.0.clone()).into()),
        })
        .collect()
}

/// `N_p` for a category: the fixed total when the pool carries one,
/// otherwise the expected count under the beliefs.
pub fn positive_count<T: Real>(
    pool: &EvaluationPool,
    category: &CategoryId,
    beliefs: &[LabelBelief<T>],
) -> PositiveCount<T> {
    match pool.positive_total(category) {
        Some(n) => PositiveCount::exact(n),
        None => PositiveCount::expected(beliefs),
    }
}

/// Expected metric under the beliefs. Prec@K is undefined on lists
/// shorter than K; AP with no expected positives is 0.
pub fn model_metric<T: Real>(
    pool: &EvaluationPool,
    category: &CategoryId,
    spec: &MetricSpec,
    beliefs: &[LabelBelief<T>],
) -> Result<Option<T>, EstimatorError> {
    match spec {
        MetricSpec::PrecAtK { k } => {
            if beliefs.len() < *k {
                return Ok(None);
            }
            Ok(Some(expected_prec_at_k(beliefs, *k)?))
        }
        MetricSpec::AveragePrecision | MetricSpec::MeanAp { .. } => {
            let n_p = positive_count(pool, category, beliefs);
            // no positives expected: undefined, as the true AP would be
            if n_p.value() <= T::zero() {
                return Ok(None);
            }
            Ok(Some(expected_ap(beliefs, n_p)?))
        }
    }
}

/// The metric on the vetted items alone, re-ranked among themselves.
/// `None` until enough has been vetted: fewer than K items for Prec@K, no
/// vetted positive for AP. With a fixed positive total, AP uses the share
/// of that total proportional to the vetted fraction of the category.
pub fn vetted_only_metric<T: Real>(
    pool: &EvaluationPool,
    category: &CategoryId,
    spec: &MetricSpec,
) -> Result<Option<T>, EstimatorError> {
    let labels: Vec<bool> = pool
        .ranked_items(category)
        .filter_map(|item| item.label.truth())
        .collect();
    match spec {
        MetricSpec::PrecAtK { k } => {
            if *k == 0 {
                return Err(MetricError::ZeroK.into());
            }
            if labels.len() < *k {
                return Ok(None);
            }
            Ok(Some(prec_at_k(&labels, *k)?))
        }
        MetricSpec::AveragePrecision | MetricSpec::MeanAp { .. } => {
            let n_p = match pool.positive_total(category) {
                Some(total) => {
                    let size = pool.ranked(category).len();
                    T::from_count(total * labels.len()) / T::from_count(size)
                }
                None => T::from_count(labels.iter().filter(|&&z| z).count()),
            };
            if n_p <= T::zero() {
                return Ok(None);
            }
            Ok(Some(average_precision(&labels, PositiveCount::new(n_p)?)?))
        }
    }
}

/// The metric on the full truth of one view. Requires every label to be
/// vetted or simulated.
pub fn true_view_metric<T: Real>(
    pool: &EvaluationPool,
    category: &CategoryId,
    spec: &MetricSpec,
) -> Result<Option<T>, EstimatorError> {
    let labels: Vec<bool> = pool
        .ranked_items(category)
        .map(|item| {
            item.label
                .truth()
                .or(item.sim_truth)
                .ok_or_else(|| EstimatorError::MissingTruth(item.id.0.clone()))
        })
        .collect::<Result<_, _>>()?;
    match spec {
        MetricSpec::PrecAtK { k } => {
            if labels.len() < *k {
                return Ok(None);
            }
            Ok(Some(prec_at_k(&labels, *k)?))
        }
        MetricSpec::AveragePrecision | MetricSpec::MeanAp { .. } => {
            let n = pool
                .positive_total(category)
                .unwrap_or_else(|| labels.iter().filter(|&&z| z).count());
            if n == 0 {
                return Ok(None);
            }
            Ok(Some(average_precision(&labels, PositiveCount::exact(n))?))
        }
    }
}

/// Per-category true metric, averaged over views for mean AP.
pub fn true_metric<T: Real>(
    bench: &Benchmark,
    spec: &MetricSpec,
) -> Result<BTreeMap<CategoryId, Option<T>>, EstimatorError> {
    let views = metric_views(bench, spec)?;
    combine_views(bench.primary(), views, |v, category| {
        true_view_metric(&bench.views()[v], category, spec)
    })
}

/// Mean absolute error over categories where both values are defined,
/// with the number of categories whose estimate was not applicable.
pub fn mean_abs_error<T: Real>(
    estimate: &BTreeMap<CategoryId, Option<T>>,
    truth: &BTreeMap<CategoryId, Option<T>>,
) -> (Option<T>, usize) {
    let mut sum = T::zero();
    let mut n = 0;
    let mut not_applicable = 0;
    for (category, t) in truth {
        let Some(t) = t else { continue };
        match estimate.get(category).copied().flatten() {
            Some(e) => {
                sum = sum + (e - *t).abs();
                n += 1;
            }
            None => not_applicable += 1,
        }
    }
    let mean = (n > 0).then(|| sum / T::from_count(n));
    (mean, not_applicable)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TestItem;

    fn pool(items: Vec<TestItem>) -> EvaluationPool {
        EvaluationPool::new(items).unwrap()
    }

    #[test]
    fn naive_posterior_copies_noisy_labels() {
        let p = pool(vec![
            TestItem::new("a", "c", 0.9, true),
            TestItem::new("b", "c", 0.8, false),
            TestItem::new("v", "c", 0.7, true).vetted(false),
        ]);
        let post: PosteriorEstimate<f64> = naive_posterior(&p);
        assert_eq!(post.get(&"a".into()), Some(1.0));
        assert_eq!(post.get(&"b".into()), Some(0.0));
        assert_eq!(post.get(&"v".into()), None);
    }

    #[test]
    fn posterior_rejects_out_of_range() {
        let probs = [(ItemId::from("a"), 1.5)].into_iter().collect();
        assert!(PosteriorEstimate::<f64>::new(probs).is_err());
    }

    #[test]
    fn vetted_only_prec_needs_k_vetted() {
        let mut items: Vec<TestItem> = (0..60)
            .map(|i| TestItem::new(format!("i{i:02}"), "c", 1.0 - 0.01 * f64::from(i), true))
            .collect();
        for item in items.iter_mut().take(10) {
            *item = item.clone().vetted(true);
        }
        let p = pool(items);
        let cat = CategoryId::from("c");
        assert_eq!(
            vetted_only_metric::<f64>(&p, &cat, &MetricSpec::PrecAtK { k: 48 }).unwrap(),
            None
        );

        let p = pool(vec![
            TestItem::new("a", "c", 0.9, true).vetted(true),
            TestItem::new("b", "c", 0.8, true),
            TestItem::new("d", "c", 0.7, true).vetted(false),
        ]);
        assert_eq!(
            vetted_only_metric::<f64>(&p, &cat, &MetricSpec::PrecAtK { k: 2 }).unwrap(),
            Some(0.5)
        );
    }

    #[test]
    fn all_estimators_agree_when_fully_vetted() {
        let items: Vec<TestItem> = (0..30)
            .map(|i| {
                TestItem::new(
                    format!("i{i:02}"),
                    if i % 2 == 0 { "a" } else { "b" },
                    f64::from(i % 7),
                    i % 3 == 0,
                )
                .vetted(i % 4 != 1)
            })
            .collect();
        let bench = Benchmark::single(pool(items));
        for spec in [MetricSpec::PrecAtK { k: 5 }, MetricSpec::AveragePrecision] {
            let truth = true_metric::<f64>(&bench, &spec).unwrap();
            for kind in [
                EstimatorKind::VettedOnly,
                EstimatorKind::Naive,
                EstimatorKind::LearnedTag,
            ] {
                let est = FittedEstimator::<f64>::fit(kind, &bench).unwrap();
                let post = est.posteriors(&bench).unwrap();
                assert_eq!(
                    est.estimate(&bench, &spec, &post).unwrap(),
                    truth,
                    "{kind:?} {spec:?}"
                );
            }
        }
    }

    #[test]
    fn model_ap_with_no_expected_positives_is_undefined() {
        let p = pool(vec![
            TestItem::new("a", "c", 0.9, false),
            TestItem::new("b", "c", 0.1, false),
        ]);
        let bench = Benchmark::single(p);
        let est = FittedEstimator::<f64>::fit(EstimatorKind::Naive, &bench).unwrap();
        let post = est.posteriors(&bench).unwrap();
        let out = est
            .estimate(&bench, &MetricSpec::AveragePrecision, &post)
            .unwrap();
        assert_eq!(out[&CategoryId::from("c")], None);
    }

    #[test]
    fn mean_abs_error_skips_undefined() {
        let cat = |s: &str| CategoryId::from(s);
        let truth = [
            (cat("a"), Some(0.5)),
            (cat("b"), None),
            (cat("c"), Some(1.0)),
        ]
        .into_iter()
        .collect();
        let est = [
            (cat("a"), Some(0.25)),
            (cat("b"), Some(0.0)),
            (cat("c"), None),
        ]
        .into_iter()
        .collect();
        assert_eq!(mean_abs_error::<f64>(&est, &truth), (Some(0.25), 1));
    }

    #[test]
    fn fitted_estimator_json_round_trip() {
        let items: Vec<TestItem> = (0..40)
            .map(|i| {
                TestItem::new(format!("i{i:02}"), "c", f64::from(i) / 40.0, i % 2 == 0)
                    .vetted(i % 3 == 0)
            })
            .collect();
        let bench = Benchmark::single(pool(items));
        let est = FittedEstimator::<f64>::fit(EstimatorKind::LearnedTag, &bench).unwrap();
        let back = FittedEstimator::<f64>::from_json(&est.to_json().unwrap()).unwrap();
        assert_eq!(est, back);
    }
}
