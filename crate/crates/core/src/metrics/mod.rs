//! Ranking metrics on known labels and their expectations under a
//! per-item posterior.
//!
//! Every function takes labels already ordered by descending system score.
//! The metrics only see that order, never the scores themselves.

mod overlap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub(crate) use overlap::greedy_assign;
pub use overlap::{
    box_iou, mask_box_iou, mask_iou, match_detections, IouMode, MatchRecord, MatchSpec,
    OverlapError,
};

/// Exhaustive enumeration is refused beyond this many uncertain labels.
pub const MAX_ENUMERATED: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("ranking has {len} items, fewer than K = {k}")]
    TooShort { len: usize, k: usize },
    #[error("K must be at least 1")]
    ZeroK,
    #[error("number of positives is zero; the metric is undefined")]
    Undefined,
    #[error("negative positive count")]
    NegativeCount,
    #[error("probability at rank {0} lies outside [0, 1]")]
    InvalidProbability(usize),
    #[error("no posterior for unvetted item {0}")]
    MissingPosterior(String),
    #[error("{0} uncertain labels exceed the enumeration limit of {MAX_ENUMERATED}")]
    TooManyToEnumerate(usize),
    #[error("invalid metric spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricSpec {
    PrecAtK { k: usize },
    AveragePrecision,
    MeanAp { iou_thresholds: Vec<f64> },
}

impl MetricSpec {
    /// Mean AP over IoU thresholds 0.50, 0.55, ..., 0.95.
    pub fn mean_ap_default() -> Self {
        MetricSpec::MeanAp {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * f64::from(i)).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        match self {
            MetricSpec::PrecAtK { k: 0 } => Err(MetricError::ZeroK),
            MetricSpec::MeanAp { iou_thresholds } => {
                if iou_thresholds.is_empty() {
                    return Err(MetricError::InvalidSpec("no IoU thresholds".into()));
                }
                if iou_thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
                    return Err(MetricError::InvalidSpec(
                        "IoU thresholds must lie in (0, 1)".into(),
                    ));
                }
                if iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(MetricError::InvalidSpec(
                        "IoU thresholds must be strictly increasing".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// IoU thresholds for instance data. Single-threshold metrics match at 0.5.
    pub fn iou_thresholds(&self) -> Vec<f64> {
        match self {
            MetricSpec::MeanAp { iou_thresholds } => iou_thresholds.clone(),
            _ => vec![0.5],
        }
    }

    pub fn top_k(&self) -> Option<usize> {
        match self {
            MetricSpec::PrecAtK { k } => Some(*k),
            _ => None,
        }
    }
}

/// `N_p`, the number of positives. Fractional when it is an expectation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveCount<T>(T);

impl<T: Scalar> PositiveCount<T> {
    pub fn new(value: T) -> Result<Self, MetricError> {
        if value < T::zero() {
            return Err(MetricError::NegativeCount);
        }
        Ok(PositiveCount(value))
    }

    pub fn exact(count: usize) -> Self {
        PositiveCount(T::from_count(count))
    }

    /// Vetted positives plus the sum of unvetted probabilities.
    pub fn expected(ranked: &[LabelBelief<T>]) -> Self {
        PositiveCount(ranked.iter().map(LabelBelief::mean).sum())
    }

    pub fn plus(self, extra: usize) -> Self {
        PositiveCount(self.0 + T::from_count(extra))
    }

    pub fn value(self) -> T {
        self.0
    }
}

/// What is known about one ranked label: its vetted value, or the
/// posterior probability that it is positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelBelief<T> {
    Known(bool),
    Uncertain(T),
}

impl<T: Scalar> LabelBelief<T> {
    pub fn mean(&self) -> T {
        match *self {
            LabelBelief::Known(z) => T::indicator(z),
            LabelBelief::Uncertain(p) => p,
        }
    }

    pub fn is_uncertain(&self) -> bool {
        matches!(self, LabelBelief::Uncertain(_))
    }
}

fn check_probabilities<T: Scalar>(ranked: &[LabelBelief<T>]) -> Result<(), MetricError> {
    match ranked
        .iter()
        .position(|b| matches!(b, LabelBelief::Uncertain(p) if !p.is_probability()))
    {
        Some(rank) => Err(MetricError::InvalidProbability(rank + 1)),
        None => Ok(()),
    }
}

/// Fraction of positives among the first `k` labels.
pub fn prec_at_k<T: Scalar>(labels: &[bool], k: usize) -> Result<T, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    if labels.len() < k {
        return Err(MetricError::TooShort {
            len: labels.len(),
            k,
        });
    }
    let hits = labels[..k].iter().filter(|&&z| z).count();
    Ok(T::from_count(hits) / T::from_count(k))
}

/// Average precision: `(1/N_p) sum_k (z_k / k) sum_{i<=k} z_i`.
///
/// `n_p` may exceed the number of positives in `labels`; positives that
/// were never retrieved lower the score without adding terms.
pub fn average_precision<T: Scalar>(
    labels: &[bool],
    n_p: PositiveCount<T>,
) -> Result<T, MetricError> {
    if n_p.value() <= T::zero() {
        return Err(MetricError::Undefined);
    }
    let mut hits = T::zero();
    let mut total = T::zero();
    for (rank, &z) in labels.iter().enumerate() {
        hits = hits + T::indicator(z);
        if z {
            total = total + hits / T::from_count(rank + 1);
        }
    }
    Ok(total / n_p.value())
}

/// Expected precision at `k`. Linear in the labels, so this is the exact
/// expectation for independent labels.
pub fn expected_prec_at_k<T: Scalar>(
    ranked: &[LabelBelief<T>],
    k: usize,
) -> Result<T, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    if ranked.len() < k {
        return Err(MetricError::TooShort {
            len: ranked.len(),
            k,
        });
    }
    check_probabilities(&ranked[..k])?;
    let sum: T = ranked[..k].iter().map(LabelBelief::mean).sum();
    Ok(sum / T::from_count(k))
}

/// Expected AP in the rank-weighted form
/// `(1/N_p) sum_k E[z_k] E[Prec@k]`.
///
/// For interior probabilities this is not the exact expectation of AP
/// (labels appear inside `Prec@k` and `N_p` is itself random); compare
/// with [`exact_expected_metric`]. With no uncertain labels it reduces to
/// [`average_precision`] bit for bit.
pub fn expected_ap<T: Scalar>(
    ranked: &[LabelBelief<T>],
    n_p: PositiveCount<T>,
) -> Result<T, MetricError> {
    if n_p.value() <= T::zero() {
        return Err(MetricError::Undefined);
    }
    check_probabilities(ranked)?;
    let mut running = T::zero();
    let mut total = T::zero();
    for (rank, belief) in ranked.iter().enumerate() {
        let mean = belief.mean();
        running = running + mean;
        if mean != T::zero() {
            let prec = running / T::from_count(rank + 1);
            total = total + mean * prec;
        }
    }
    Ok(total / n_p.value())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    Exhaustive,
    MonteCarlo { samples: usize, seed: u64 },
}

/// `E[Q(z)]` under independent labels, by enumerating every assignment of
/// the uncertain labels (or sampling them). For AP, `N_p` is recounted per
/// assignment as its positives plus `unretrieved`; assignments with no
/// positives at all score 0.
pub fn exact_expected_metric<T: Scalar>(
    ranked: &[LabelBelief<T>],
    spec: &MetricSpec,
    unretrieved: usize,
    mode: OracleMode,
) -> Result<T, MetricError> {
    spec.validate()?;
    check_probabilities(ranked)?;
    let uncertain: Vec<usize> = ranked
        .iter()
        .enumerate()
        .filter(|(_, b)| b.is_uncertain())
        .map(|(i, _)| i)
        .collect();
    let mut labels: Vec<bool> = ranked
        .iter()
        .map(|b| matches!(b, LabelBelief::Known(true)))
        .collect();
    let score = |labels: &[bool]| -> Result<T, MetricError> {
        match spec {
            MetricSpec::PrecAtK { k } => prec_at_k(labels, *k),
            MetricSpec::AveragePrecision | MetricSpec::MeanAp { .. } => {
                let n = labels.iter().filter(|&&z| z).count() + unretrieved;
                if n == 0 {
                    Ok(T::zero())
                } else {
                    average_precision(labels, PositiveCount::exact(n))
                }
            }
        }
    };
    let prob = |i: usize| match ranked[i] {
        LabelBelief::Uncertain(p) => p,
        LabelBelief::Known(_) => unreachable!("only uncertain ranks are drawn"),
    };
    match mode {
        OracleMode::Exhaustive => {
            if uncertain.len() > MAX_ENUMERATED {
                return Err(MetricError::TooManyToEnumerate(uncertain.len()));
            }
            let mut expectation = T::zero();
            for assignment in 0u32..(1u32 << uncertain.len()) {
                let mut weight = T::one();
                for (bit, &i) in uncertain.iter().enumerate() {
                    let z = (assignment >> bit) & 1 == 1;
                    labels[i] = z;
                    weight = weight * if z { prob(i) } else { T::one() - prob(i) };
                }
                if weight != T::zero() {
                    expectation = expectation + weight * score(&labels)?;
                }
            }
            Ok(expectation)
        }
        OracleMode::MonteCarlo { samples, seed } => {
            let samples = samples.max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probs: Vec<f64> = uncertain
                .iter()
                .map(|&i| prob(i).to_f64().unwrap_or(0.0))
                .collect();
            let mut total = T::zero();
            for _ in 0..samples {
                for (&i, &p) in uncertain.iter().zip(&probs) {
                    labels[i] = rng.gen::<f64>() < p;
                }
                total = total + score(&labels)?;
            }
            Ok(total / T::from_count(samples))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use LabelBelief::{Known, Uncertain};

    type Q = Ratio<i64>;

    fn z(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn prec_at_k_examples() {
        assert_eq!(
            prec_at_k::<Q>(&z(&[1, 1, 0, 1, 0]), 4).unwrap(),
            Q::new(3, 4)
        );
        assert_eq!(prec_at_k::<f64>(&z(&[1, 1, 1]), 2).unwrap(), 1.0);
        assert_eq!(prec_at_k::<Q>(&z(&[0, 1, 1]), 3).unwrap(), Q::new(2, 3));
        assert_eq!(
            prec_at_k::<f64>(&z(&[1]), 2),
            Err(MetricError::TooShort { len: 1, k: 2 })
        );
    }

    #[test]
    fn average_precision_examples() {
        // (1/2)(1*1 + (1/3)*2)
        assert_eq!(
            average_precision(&z(&[1, 0, 1]), PositiveCount::<Q>::exact(2)).unwrap(),
            Q::new(5, 6)
        );
        assert_eq!(
            average_precision(&z(&[0, 0, 1]), PositiveCount::<Q>::exact(1)).unwrap(),
            Q::new(1, 3)
        );
        assert_eq!(
            average_precision(&z(&[1, 1, 1, 1]), PositiveCount::<f64>::exact(4)).unwrap(),
            1.0
        );
        assert_eq!(
            average_precision(&z(&[1]), PositiveCount::<f64>::exact(0)),
            Err(MetricError::Undefined)
        );
    }

    #[test]
    fn unretrieved_positives_lower_ap() {
        let ap: Q = average_precision(&z(&[1, 0]), PositiveCount::exact(2)).unwrap();
        assert_eq!(ap, Q::new(1, 2));
    }

    #[test]
    fn expected_prec_examples() {
        let ranked = [
            Known(true),
            Uncertain(Q::new(1, 2)),
            Known(true),
            Uncertain(Q::new(1, 2)),
            Known(false),
        ];
        assert_eq!(expected_prec_at_k(&ranked, 4).unwrap(), Q::new(3, 4));
        let zeros = [Uncertain(0.0), Known(false), Uncertain(0.0)];
        assert_eq!(expected_prec_at_k(&zeros, 3).unwrap(), 0.0);
        let known: Vec<LabelBelief<Q>> = z(&[1, 0, 1, 1]).into_iter().map(Known).collect();
        assert_eq!(
            expected_prec_at_k(&known, 3).unwrap(),
            prec_at_k::<Q>(&z(&[1, 0, 1, 1]), 3).unwrap()
        );
    }

    #[test]
    fn expected_prec_rejects_bad_probabilities() {
        let ranked = [Known(true), Uncertain(1.5)];
        assert_eq!(
            expected_prec_at_k(&ranked, 2),
            Err(MetricError::InvalidProbability(2))
        );
    }

    #[test]
    fn expected_ap_two_item_example() {
        // (1/1.5)(1*1 + 0.5*0.75) = 11/12
        let ranked = [Known(true), Uncertain(Q::new(1, 2))];
        let n_p = PositiveCount::expected(&ranked);
        assert_eq!(n_p.value(), Q::new(3, 2));
        assert_eq!(expected_ap(&ranked, n_p).unwrap(), Q::new(11, 12));
    }

    #[test]
    fn expected_ap_reduces_to_ap() {
        let ranked: Vec<LabelBelief<Q>> = z(&[1, 0, 1]).into_iter().map(Known).collect();
        assert_eq!(
            expected_ap(&ranked, PositiveCount::expected(&ranked)).unwrap(),
            Q::new(5, 6)
        );
        let degenerate = [Uncertain(1.0), Known(false), Uncertain(1.0), Uncertain(0.0)];
        let labels = z(&[1, 0, 1, 0]);
        assert_eq!(
            expected_ap(&degenerate, PositiveCount::expected(&degenerate)).unwrap(),
            average_precision(&labels, PositiveCount::<f64>::exact(2)).unwrap()
        );
    }

    #[test]
    fn oracle_examples() {
        let ranked = [Known(true), Uncertain(Q::new(1, 2))];
        let ap = exact_expected_metric(
            &ranked,
            &MetricSpec::AveragePrecision,
            0,
            OracleMode::Exhaustive,
        )
        .unwrap();
        assert_eq!(ap, Q::new(1, 1));

        let halves = [Uncertain(Q::new(1, 2)), Uncertain(Q::new(1, 2))];
        let prec = exact_expected_metric(
            &halves,
            &MetricSpec::PrecAtK { k: 2 },
            0,
            OracleMode::Exhaustive,
        )
        .unwrap();
        assert_eq!(prec, Q::new(1, 2));

        let known: Vec<LabelBelief<Q>> = z(&[0, 1, 1]).into_iter().map(Known).collect();
        assert_eq!(
            exact_expected_metric(
                &known,
                &MetricSpec::AveragePrecision,
                1,
                OracleMode::Exhaustive
            )
            .unwrap(),
            average_precision(&z(&[0, 1, 1]), PositiveCount::exact(3)).unwrap()
        );
    }

    #[test]
    fn oracle_refuses_large_enumerations() {
        let ranked = vec![Uncertain(0.5_f64); MAX_ENUMERATED + 1];
        assert_eq!(
            exact_expected_metric(
                &ranked,
                &MetricSpec::PrecAtK { k: 3 },
                0,
                OracleMode::Exhaustive
            ),
            Err(MetricError::TooManyToEnumerate(MAX_ENUMERATED + 1))
        );
        let mc = exact_expected_metric(
            &ranked,
            &MetricSpec::PrecAtK { k: 3 },
            0,
            OracleMode::MonteCarlo {
                samples: 20_000,
                seed: 3,
            },
        )
        .unwrap();
        assert!((mc - 0.5).abs() < 0.02, "{mc}");
    }

    #[test]
    fn mean_ap_spec_validation() {
        MetricSpec::mean_ap_default().validate().unwrap();
        let bad = MetricSpec::MeanAp {
            iou_thresholds: vec![0.7, 0.5],
        };
        assert!(bad.validate().is_err());
        assert_eq!(
            MetricSpec::PrecAtK { k: 0 }.validate(),
            Err(MetricError::ZeroK)
        );
    }
}
