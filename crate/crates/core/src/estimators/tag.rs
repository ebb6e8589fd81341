//! Posterior for noisy tags: counted flip priors combined with a logistic
//! score calibrator through Bayes' rule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::logistic::{fit_logistic, LogisticOptions};
use super::{EstimatorError, PosteriorEstimate};
use crate::dataset::{CategoryId, EvaluationPool, TestItem};
use crate::scalar::Real;

/// Categories with fewer vetted items than this borrow the pooled model.
pub const MIN_VETTED_PER_CATEGORY: usize = 5;

/// `p(y=1|z=1)` and `p(y=1|z=0)` with the counts they were fit on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipEntry<T> {
    pub p_y1_given_z1: T,
    pub p_y1_given_z0: T,
    pub n_z1: usize,
    pub n_z0: usize,
    pub n_y1_z1: usize,
    pub n_y1_z0: usize,
}

impl<T: Real> FlipEntry<T> {
    /// Add-one smoothed frequencies.
    pub fn from_counts(n_z1: usize, n_y1_z1: usize, n_z0: usize, n_y1_z0: usize) -> Self {
        let smooth = |hits: usize, n: usize| T::from_count(hits + 1) / T::from_count(n + 2);
        FlipEntry {
            p_y1_given_z1: smooth(n_y1_z1, n_z1),
            p_y1_given_z0: smooth(n_y1_z0, n_z0),
            n_z1,
            n_z0,
            n_y1_z1,
            n_y1_z0,
        }
    }

    pub fn fixed(p_y1_given_z1: T, p_y1_given_z0: T) -> Self {
        FlipEntry {
            p_y1_given_z1,
            p_y1_given_z0,
            n_z1: 0,
            n_z0: 0,
            n_y1_z1: 0,
            n_y1_z0: 0,
        }
    }

    fn likelihood(&self, noisy: bool, truth: bool) -> T {
        let p1 = if truth {
            self.p_y1_given_z1
        } else {
            self.p_y1_given_z0
        };
        if noisy {
            p1
        } else {
            T::one() - p1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipPriors<T> {
    pub per_category: BTreeMap<CategoryId, FlipEntry<T>>,
    pub global: FlipEntry<T>,
}

impl<T: Real> FlipPriors<T> {
    pub fn entry(&self, category: &CategoryId) -> &FlipEntry<T> {
        self.per_category.get(category).unwrap_or(&self.global)
    }
}

#[derive(Default, Clone, Copy)]
struct Counts {
    n: usize,
    z1: usize,
    y1_z1: usize,
    y1_z0: usize,
}

impl Counts {
    fn add(&mut self, noisy: bool, truth: bool) {
        self.n += 1;
        if truth {
            self.z1 += 1;
            self.y1_z1 += usize::from(noisy);
        } else {
            self.y1_z0 += usize::from(noisy);
        }
    }

    fn entry<T: Real>(&self) -> FlipEntry<T> {
        FlipEntry::from_counts(self.z1, self.y1_z1, self.n - self.z1, self.y1_z0)
    }
}

/// Counts `(noisy, truth)` pairs on the vetted items.
pub fn fit_flip_priors<T: Real>(pool: &EvaluationPool) -> FlipPriors<T> {
    let mut global = Counts::default();
    let mut per: BTreeMap<&CategoryId, Counts> = BTreeMap::new();
    for item in pool.vetted() {
        let truth = item.label.truth().expect("vetted");
        global.add(item.label.noisy(), truth);
        per.entry(&item.category)
            .or_default()
            .add(item.label.noisy(), truth);
    }
    FlipPriors {
        per_category: per
            .into_iter()
            .filter(|(_, c)| c.n >= MIN_VETTED_PER_CATEGORY)
            .map(|(cat, c)| (cat.clone(), c.entry()))
            .collect(),
        global: global.entry(),
    }
}

/// `p(z=1|s)` for one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationModel<T> {
    Logistic {
        weight: T,
        bias: T,
        converged: bool,
    },
    /// Score-independent rate, used when only one class has been vetted.
    Constant {
        rate: T,
    },
}

impl<T: Real> CalibrationModel<T> {
    pub fn predict(&self, score: f64) -> T {
        match *self {
            CalibrationModel::Logistic { weight, bias, .. } => {
                (weight * T::lit(score) + bias).sigmoid()
            }
            CalibrationModel::Constant { rate } => rate,
        }
    }

    pub fn converged(&self) -> bool {
        match self {
            CalibrationModel::Logistic { converged, .. } => *converged,
            CalibrationModel::Constant { .. } => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCalibrator<T> {
    pub per_category: BTreeMap<CategoryId, CalibrationModel<T>>,
    pub global: CalibrationModel<T>,
}

impl<T: Real> ScoreCalibrator<T> {
    pub fn model(&self, category: &CategoryId) -> &CalibrationModel<T> {
        self.per_category.get(category).unwrap_or(&self.global)
    }

    pub fn predict(&self, category: &CategoryId, score: f64) -> T {
        self.model(category).predict(score)
    }
}

/// Logistic regression of truth on score. Scores are standardized for the
/// fit and the weights mapped back, so the penalty acts on the
/// standardized slope.
pub fn fit_calibration<T: Real>(samples: &[(f64, bool)]) -> CalibrationModel<T> {
    let n = samples.len();
    let positives = samples.iter().filter(|(_, z)| *z).count();
    if positives == 0 || positives == n {
        return CalibrationModel::Constant {
            rate: T::from_count(positives + 1) / T::from_count(n + 2),
        };
    }
    let mean = samples.iter().map(|(s, _)| s).sum::<f64>() / n as f64;
    let var = samples.iter().map(|(s, _)| (s - mean).powi(2)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return CalibrationModel::Constant {
            rate: T::from_count(positives) / T::from_count(n),
        };
    }
    let sd = var.sqrt();
    let rows: Vec<Vec<T>> = samples
        .iter()
        .map(|(s, _)| vec![T::lit((s - mean) / sd)])
        .collect();
    let labels: Vec<bool> = samples.iter().map(|(_, z)| *z).collect();
    let fit = fit_logistic(&rows, &labels, &LogisticOptions::default());
    let weight = fit.weights[0] / T::lit(sd);
    CalibrationModel::Logistic {
        weight,
        bias: fit.bias - weight * T::lit(mean),
        converged: fit.converged,
    }
}

pub fn fit_score_calibrator<T: Real>(pool: &EvaluationPool) -> ScoreCalibrator<T> {
    let mut all = Vec::new();
    let mut per: BTreeMap<&CategoryId, Vec<(f64, bool)>> = BTreeMap::new();
    for item in pool.vetted() {
        let sample = (item.score, item.label.truth().expect("vetted"));
        all.push(sample);
        per.entry(&item.category).or_default().push(sample);
    }
    let per_category = per
        .into_iter()
        .filter(|(_, s)| {
            s.len() >= MIN_VETTED_PER_CATEGORY && s.iter().any(|x| x.1) && s.iter().any(|x| !x.1)
        })
        .map(|(cat, s)| (cat.clone(), fit_calibration(&s)))
        .collect();
    ScoreCalibrator {
        per_category,
        global: fit_calibration(&all),
    }
}

/// Result of combining flip priors with `p(z=1|s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TagPosterior<T> {
    pub p: T,
    /// The Bayes denominator vanished and `p(z=1|s)` was returned as is.
    pub degenerate: bool,
}

/// `p(z=1|s,y) = p(y|z=1)p(z=1|s) / sum_v p(y|z=v)p(z=v|s)`.
pub fn bayes_combine<T: Real>(noisy: bool, priors: &FlipEntry<T>, p_z1: T) -> TagPosterior<T> {
    let pos = priors.likelihood(noisy, true) * p_z1;
    let neg = priors.likelihood(noisy, false) * (T::one() - p_z1);
    let denom = pos + neg;
    if denom <= T::zero() {
        TagPosterior {
            p: p_z1,
            degenerate: true,
        }
    } else {
        TagPosterior {
            p: pos / denom,
            degenerate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagModel<T> {
    pub priors: FlipPriors<T>,
    pub calibrator: ScoreCalibrator<T>,
}

impl<T: Real> TagModel<T> {
    pub fn fit(pool: &EvaluationPool) -> Self {
        TagModel {
            priors: fit_flip_priors(pool),
            calibrator: fit_score_calibrator(pool),
        }
    }

    pub fn posterior(&self, pool: &EvaluationPool) -> Result<PosteriorEstimate<T>, EstimatorError> {
        let probs = pool
            .unvetted()
            .map(|item| {
                tag_posterior(item, &self.priors, &self.calibrator).map(|p| (item.id.clone(), p.p))
            })
            .collect::<Result<_, _>>()?;
        PosteriorEstimate::new(probs)
    }
}

pub fn tag_posterior<T: Real>(
    item: &TestItem,
    priors: &FlipPriors<T>,
    calibrator: &ScoreCalibrator<T>,
) -> Result<TagPosterior<T>, EstimatorError> {
    if item.label.is_vetted() {
        return Err(EstimatorError::VettedItem(item.id.0.clone()));
    }
    let p_z1 = calibrator.predict(&item.category, item.score);
    Ok(bayes_combine(
        item.label.noisy(),
        priors.entry(&item.category),
        p_z1,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TestItem;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vetted(id: usize, cat: &str, score: f64, noisy: bool, truth: bool) -> TestItem {
        TestItem::new(format!("{cat}-{id:04}"), cat, score, noisy).vetted(truth)
    }

    #[test]
    fn flip_prior_counting() {
        let items: Vec<TestItem> = (0..100)
            .map(|i| vetted(i, "a", 0.0, i < 38, true))
            .collect();
        let priors: FlipPriors<f64> = fit_flip_priors(&EvaluationPool::new(items).unwrap());
        let e = priors.entry(&"a".into());
        assert!((e.p_y1_given_z1 - 39.0 / 102.0).abs() < 1e-15);
        assert_eq!(e.p_y1_given_z0, 0.5);

        let items: Vec<TestItem> = (0..10).map(|i| vetted(i, "a", 0.0, true, true)).collect();
        let priors: FlipPriors<f64> = fit_flip_priors(&EvaluationPool::new(items).unwrap());
        assert!((priors.entry(&"a".into()).p_y1_given_z1 - 11.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn sparse_category_uses_pooled_priors() {
        let mut items: Vec<TestItem> = (0..20)
            .map(|i| vetted(i, "a", 0.0, i % 2 == 0, true))
            .collect();
        items.push(TestItem::new("b-0", "b", 0.0, true));
        let priors: FlipPriors<f64> = fit_flip_priors(&EvaluationPool::new(items).unwrap());
        assert!(!priors.per_category.contains_key(&CategoryId::from("b")));
        assert_eq!(priors.entry(&"b".into()), &priors.global);
    }

    #[test]
    fn bayes_spot_values() {
        let priors = FlipEntry::<f64>::fixed(0.38, 0.01);
        let p1 = bayes_combine(true, &priors, 0.5).p;
        assert!((p1 - 0.38 / 0.39).abs() < 1e-15);
        assert!((p1 - 0.9744).abs() < 1e-4);
        let p0 = bayes_combine(false, &priors, 0.5).p;
        assert!((p0 - 0.3851).abs() < 1e-4);
        let exact = bayes_combine(true, &FlipEntry::fixed(1.0, 0.0), 0.2);
        assert_eq!(exact.p, 1.0);
    }

    #[test]
    fn degenerate_denominator_falls_back() {
        let r = bayes_combine(true, &FlipEntry::fixed(0.0, 0.0), 0.3);
        assert!(r.degenerate);
        assert_eq!(r.p, 0.3);
    }

    #[test]
    fn posterior_is_monotone_in_calibrated_probability() {
        let priors = FlipEntry::fixed(0.38, 0.01);
        for noisy in [false, true] {
            let mut last = -1.0;
            for i in 0..=100 {
                let p = bayes_combine(noisy, &priors, f64::from(i) / 100.0).p;
                assert!(p >= last);
                last = p;
            }
        }
    }

    #[test]
    fn independent_scores_give_flat_calibration() {
        // every score value carries one positive and three negatives
        let samples: Vec<(f64, bool)> = (0..4000)
            .map(|i| (f64::from(i / 4) / 100.0 - 3.0, i % 4 == 0))
            .collect();
        let model: CalibrationModel<f64> = fit_calibration(&samples);
        let CalibrationModel::Logistic {
            weight,
            bias,
            converged,
        } = model
        else {
            panic!("expected logistic")
        };
        assert!(converged);
        assert!(weight.abs() < 1e-3, "{weight}");
        assert!((bias - (1.0_f64 / 3.0).ln()).abs() < 1e-3, "{bias}");
    }

    #[test]
    fn noisy_scores_fit_close_to_generating_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<(f64, bool)> = (0..20_000)
            .map(|_| {
                let s = rng.gen::<f64>() * 4.0 - 2.0;
                (s, rng.gen::<f64>() < Real::sigmoid(1.5 * s - 0.5))
            })
            .collect();
        let CalibrationModel::Logistic { weight, bias, .. } = fit_calibration::<f64>(&samples)
        else {
            panic!("expected logistic")
        };
        assert!((weight - 1.5).abs() < 0.1, "{weight}");
        assert!((bias + 0.5).abs() < 0.1, "{bias}");
    }

    #[test]
    fn separable_scores_are_capped() {
        let samples: Vec<(f64, bool)> = (0..40)
            .map(|i| {
                let z = i >= 20;
                (f64::from(i % 20) / 20.0 + if z { 3.0 } else { 0.0 }, z)
            })
            .collect();
        let model: CalibrationModel<f64> = fit_calibration(&samples);
        let CalibrationModel::Logistic { weight, .. } = model else {
            panic!("expected logistic")
        };
        assert!(weight.is_finite() && weight > 0.0);
        assert!(!model.converged());
        for (s, z) in &samples {
            if *z {
                assert!(model.predict(*s) > 0.95);
            }
        }
    }

    #[test]
    fn single_class_gives_constant_rate() {
        let model: CalibrationModel<f64> =
            fit_calibration(&[(0.1, true), (0.9, true), (0.5, true)]);
        assert_eq!(model, CalibrationModel::Constant { rate: 0.8 });
    }

    #[test]
    fn tag_posterior_rejects_vetted_items() {
        let pool = EvaluationPool::new(vec![vetted(0, "a", 0.0, true, true)]).unwrap();
        let model: TagModel<f64> = TagModel::fit(&pool);
        let item = &pool.items()[0];
        assert!(tag_posterior(item, &model.priors, &model.calibrator).is_err());
    }
}
