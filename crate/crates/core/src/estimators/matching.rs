//! Probability that a detection matches a box-only ground truth at an IoU
//! threshold, learned from pairs whose masks have been vetted.

use serde::{Deserialize, Serialize};

use super::logistic::{fit_logistic, LogisticOptions};
use super::{EstimatorError, PosteriorEstimate};
use crate::dataset::{CategoryId, EvaluationPool, InstancePair, PairFeatures};
use crate::scalar::Real;

/// Fewest vetted pairs a predictor is fit on.
pub const MIN_MATCH_EXAMPLES: usize = 10;

/// Continuous features: noisy IoU, both box areas, and their logs.
const N_CONTINUOUS: usize = 5;
const AREA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchExample {
    pub category: CategoryId,
    pub features: PairFeatures,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatchModel<T> {
    Logistic {
        weights: Vec<T>,
        bias: T,
        converged: bool,
    },
    Constant {
        rate: T,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPredictor<T> {
    pub threshold: f64,
    /// One-hot order; unseen categories map to all zeros.
    pub categories: Vec<CategoryId>,
    pub means: Vec<T>,
    pub scales: Vec<T>,
    pub model: MatchModel<T>,
    /// Set when the model had to fall back to a constant.
    pub degenerate: bool,
}

fn continuous(f: &PairFeatures) -> [f64; N_CONTINUOUS] {
    [
        f.noisy_iou,
        f.det_box_area,
        f.gt_box_area,
        f.det_box_area.max(AREA_FLOOR).ln(),
        f.gt_box_area.max(AREA_FLOOR).ln(),
    ]
}

impl<T: Real> MatchPredictor<T> {
    fn row(&self, category: &CategoryId, f: &PairFeatures) -> Result<Vec<T>, EstimatorError> {
        let mut row = Vec::with_capacity(N_CONTINUOUS + self.categories.len());
        for (i, raw) in continuous(f).into_iter().enumerate() {
            let scale = self.scales[i];
            if !scale.is_finite() || scale <= T::zero() {
                return Err(EstimatorError::ZeroScale(i));
            }
            row.push((T::lit(raw) - self.means[i]) / scale);
        }
        row.extend(self.categories.iter().map(|c| T::indicator(c == category)));
        Ok(row)
    }

    pub fn predict(
        &self,
        category: &CategoryId,
        features: &PairFeatures,
    ) -> Result<T, EstimatorError> {
        let row = self.row(category, features)?;
        Ok(match &self.model {
            MatchModel::Constant { rate } => *rate,
            MatchModel::Logistic { weights, bias, .. } => weights
                .iter()
                .zip(&row)
                .fold(*bias, |acc, (&w, &x)| acc + w * x)
                .sigmoid(),
        })
    }

    /// Weight on the standardized noisy IoU, if the model is logistic.
    pub fn noisy_iou_weight(&self) -> Option<T> {
        match &self.model {
            MatchModel::Logistic { weights, .. } => Some(weights[0]),
            MatchModel::Constant { .. } => None,
        }
    }

    pub fn posterior(&self, pool: &EvaluationPool) -> Result<PosteriorEstimate<T>, EstimatorError> {
        let probs = pool
            .unvetted()
            .map(|item| {
                let f = item
                    .features
                    .as_ref()
                    .ok_or_else(|| EstimatorError::MissingFeatures(item.id.0.clone()))?;
                self.predict(&item.category, f)
                    .map(|p| (item.id.clone(), p))
            })
            .collect::<Result<_, _>>()?;
        PosteriorEstimate::new(probs)
    }
}

pub fn fit_match_examples<T: Real>(
    examples: &[MatchExample],
    threshold: f64,
) -> Result<MatchPredictor<T>, EstimatorError> {
    if examples.len() < MIN_MATCH_EXAMPLES {
        return Err(EstimatorError::InsufficientData {
            have: examples.len(),
            need: MIN_MATCH_EXAMPLES,
        });
    }
    let mut categories: Vec<CategoryId> = examples.iter().map(|e| e.category.clone()).collect();
    categories.sort();
    categories.dedup();
    let n = examples.len() as f64;
    let raw: Vec<[f64; N_CONTINUOUS]> = examples.iter().map(|e| continuous(&e.features)).collect();
    let mut means = [0.0; N_CONTINUOUS];
    let mut scales = [0.0; N_CONTINUOUS];
    for i in 0..N_CONTINUOUS {
        means[i] = raw.iter().map(|r| r[i]).sum::<f64>() / n;
        scales[i] = (raw.iter().map(|r| (r[i] - means[i]).powi(2)).sum::<f64>() / n).sqrt();
    }
    // rounding in the mean leaves a tiny spread on constant columns
    for i in 0..N_CONTINUOUS {
        if scales[i] <= 1e-12 * (1.0 + means[i].abs()) {
            scales[i] = 0.0;
        }
    }
    let constant_features = scales.iter().all(|&s| s == 0.0);
    let scales = scales.map(|s| if s > 0.0 { s } else { 1.0 });
    let mut predictor = MatchPredictor {
        threshold,
        categories,
        means: means.iter().map(|&m| T::lit(m)).collect(),
        scales: scales.iter().map(|&s| T::lit(s)).collect(),
        model: MatchModel::Constant { rate: T::zero() },
        degenerate: false,
    };
    let positives = examples.iter().filter(|e| e.label).count();
    if positives == 0 || positives == examples.len() {
        predictor.model = MatchModel::Constant {
            rate: T::from_count(positives + 1) / T::from_count(examples.len() + 2),
        };
        predictor.degenerate = true;
        return Ok(predictor);
    }
    if constant_features && predictor.categories.len() == 1 {
        predictor.model = MatchModel::Constant {
            rate: T::from_count(positives) / T::from_count(examples.len()),
        };
        predictor.degenerate = true;
        return Ok(predictor);
    }
    let rows = examples
        .iter()
        .map(|e| predictor.row(&e.category, &e.features))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
    let fit = fit_logistic(&rows, &labels, &LogisticOptions::default());
    predictor.model = MatchModel::Logistic {
        weights: fit.weights,
        bias: fit.bias,
        converged: fit.converged,
    };
    Ok(predictor)
}

/// Fits on pairs whose true IoU is known; the label is whether that IoU
/// reaches `threshold`.
pub fn fit_match_predictor<T: Real>(
    pairs: &[InstancePair],
    threshold: f64,
) -> Result<MatchPredictor<T>, EstimatorError> {
    let examples: Vec<MatchExample> = pairs
        .iter()
        .filter_map(|p| {
            Some(MatchExample {
                category: p.category.clone(),
                features: p.features?,
                label: p.true_iou? >= threshold,
            })
        })
        .collect();
    fit_match_examples(&examples, threshold)
}

/// Fits on the vetted items of one label view.
pub fn fit_match_on_pool<T: Real>(
    pool: &EvaluationPool,
    threshold: f64,
) -> Result<MatchPredictor<T>, EstimatorError> {
    let examples: Vec<MatchExample> = pool
        .vetted()
        .filter_map(|item| {
            Some(MatchExample {
                category: item.category.clone(),
                features: item.features?,
                label: item.label.truth()?,
            })
        })
        .collect();
    fit_match_examples(&examples, threshold)
}

/// Match probability for a pair whose ground truth is still box-only.
pub fn match_probability<T: Real>(
    pair: &InstancePair,
    model: &MatchPredictor<T>,
) -> Result<T, EstimatorError> {
    if pair.gt_vetted {
        return Err(EstimatorError::VettedItem(pair.detection_id.clone()));
    }
    let f = pair
        .features
        .as_ref()
        .ok_or_else(|| EstimatorError::MissingFeatures(pair.detection_id.clone()))?;
    model.predict(&pair.category, f)
}
