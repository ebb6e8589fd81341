//! Choosing which unvetted items to vet next.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CategoryId, EvaluationPool, ItemId};
use crate::estimators::{positive_count, ranked_beliefs, EstimatorError, PosteriorEstimate};
use crate::metrics::{LabelBelief, PositiveCount};
use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum StrategyError {
    #[error("K must be at least 1")]
    ZeroK,
    #[error("N_p must be positive")]
    ZeroPositives,
    #[error("r = {0} lies outside [0, 1]")]
    InvalidRank(f64),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// Items to vet next. `exhausted` is set when nothing is left to select.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub ids: Vec<ItemId>,
    pub exhausted: bool,
}

impl Batch {
    fn from_ids(ids: Vec<ItemId>) -> Self {
        let exhausted = ids.is_empty();
        Batch { ids, exhausted }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VettingStrategyKind {
    Random,
    Mcm,
    MeecPrec { k: usize },
    MeecAp,
}

impl VettingStrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            VettingStrategyKind::Random => "random",
            VettingStrategyKind::Mcm => "mcm",
            VettingStrategyKind::MeecPrec { .. } => "meec_prec",
            VettingStrategyKind::MeecAp => "meec_ap",
        }
    }

    pub fn needs_posterior(&self) -> bool {
        matches!(
            self,
            VettingStrategyKind::MeecPrec { .. } | VettingStrategyKind::MeecAp
        )
    }
}

/// Samples a category uniformly among those with unvetted items left, then
/// an item uniformly within it, until the batch is full.
pub fn select_random_hierarchical<R: Rng>(
    pool: &EvaluationPool,
    batch_size: usize,
    rng: &mut R,
) -> Batch {
    let mut remaining: BTreeMap<&CategoryId, Vec<&ItemId>> = BTreeMap::new();
    for category in pool.categories() {
        let ids: Vec<&ItemId> = pool
            .ranked_items(category)
            .filter(|i| !i.label.is_vetted())
            .map(|i| &i.id)
            .collect();
        if !ids.is_empty() {
            remaining.insert(category, ids);
        }
    }
    let mut ids = Vec::with_capacity(batch_size);
    while ids.len() < batch_size && !remaining.is_empty() {
        let cats: Vec<&CategoryId> = remaining.keys().copied().collect();
        let category = *cats.choose(rng).expect("non-empty");
        let items = remaining.get_mut(category).expect("present");
        let pick = rng.gen_range(0..items.len());
        ids.push(items.swap_remove(pick).clone());
        if items.is_empty() {
            remaining.remove(category);
        }
    }
    Batch::from_ids(ids)
}

/// Most-confident mistakes: unvetted noisy negatives by descending score,
/// then noisy positives by descending score. Ties go to the smaller id.
pub fn select_mcm(pool: &EvaluationPool, batch_size: usize) -> Batch {
    let mut candidates: Vec<_> = pool.unvetted().collect();
    candidates.sort_by(|a, b| {
        a.label
            .noisy()
            .cmp(&b.label.noisy())
            .then(b.score.total_cmp(&a.score))
            .then_with(|| a.id.cmp(&b.id))
    });
    Batch::from_ids(
        candidates
            .into_iter()
            .take(batch_size)
            .map(|i| i.id.clone())
            .collect(),
    )
}

/// Expected change of Prec@K from vetting an item in the top K:
/// `(2/K) p (1 - p)`.
pub fn meec_score_prec<T: Real>(p: T, k: usize) -> Result<T, StrategyError> {
    if k == 0 {
        return Err(StrategyError::ZeroK);
    }
    Ok(T::lit(2.0) / T::from_count(k) * p * (T::one() - p))
}

/// Expected change of AP from vetting an item: `(1/N_p) r p (1 - p)`.
pub fn meec_score_ap<T: Real>(p: T, r: T, n_p: PositiveCount<T>) -> Result<T, StrategyError> {
    if n_p.value() <= T::zero() {
        return Err(StrategyError::ZeroPositives);
    }
    if !r.is_probability() {
        return Err(StrategyError::InvalidRank(r.to_f64().unwrap_or(f64::NAN)));
    }
    Ok(r * p * (T::one() - p) / n_p.value())
}

/// MEEC priorities for the candidate items of one view, with the `r`
/// values used for AP.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionScore<'a, T> {
    pub priority: Vec<(&'a ItemId, T)>,
    /// Only filled for AP.
    pub r: Vec<(&'a ItemId, T)>,
}

impl<T: Copy> SelectionScore<'_, T> {
    pub fn priority_of(&self, id: &ItemId) -> Option<T> {
        self.priority.iter().find(|(i, _)| *i == id).map(|e| e.1)
    }

    pub fn r_of(&self, id: &ItemId) -> Option<T> {
        self.r.iter().find(|(i, _)| *i == id).map(|e| e.1)
    }
}

/// Fraction of a category's unvetted items that score strictly higher
/// than each of its unvetted items, in rank order.
pub fn unvetted_rank_fractions<'a, T: Real>(
    pool: &'a EvaluationPool,
    category: &CategoryId,
) -> Vec<(&'a ItemId, T)> {
    let unvetted: Vec<_> = pool
        .ranked_items(category)
        .filter(|i| !i.label.is_vetted())
        .collect();
    let n = T::from_count(unvetted.len());
    let mut higher = 0;
    unvetted
        .iter()
        .enumerate()
        .map(|(pos, item)| {
            if pos > 0 && unvetted[pos - 1].score > item.score {
                higher = pos;
            }
            (&item.id, T::from_count(higher) / n)
        })
        .collect()
}

pub fn meec_scores<'a, T: Real>(
    pool: &'a EvaluationPool,
    posterior: &PosteriorEstimate<T>,
    strategy: VettingStrategyKind,
) -> Result<SelectionScore<'a, T>, StrategyError> {
    let mut score = SelectionScore {
        priority: Vec::new(),
        r: Vec::new(),
    };
    for category in pool.categories() {
        match strategy {
            VettingStrategyKind::MeecPrec { k } => {
                for item in pool.ranked_items(category).take(k) {
                    if let Some(p) = posterior.get(&item.id) {
                        score.priority.push((&item.id, meec_score_prec(p, k)?));
                    }
                }
            }
            VettingStrategyKind::MeecAp => {
                let beliefs = ranked_beliefs(pool, category, posterior)?;
                let n_p = positive_count(pool, category, &beliefs);
                let uncertain = beliefs.iter().filter_map(|b| match b {
                    LabelBelief::Uncertain(p) => Some(*p),
                    LabelBelief::Known(_) => None,
                });
                for ((id, r), p) in unvetted_rank_fractions::<T>(pool, category)
                    .into_iter()
                    .zip(uncertain)
                {
                    let priority = if n_p.value() > T::zero() {
                        meec_score_ap(p, r, n_p)?
                    } else {
                        T::zero()
                    };
                    score.priority.push((id, priority));
                    score.r.push((id, r));
                }
            }
            VettingStrategyKind::Random | VettingStrategyKind::Mcm => {}
        }
    }
    Ok(score)
}

/// Pools priorities across categories and sums them across scores (an item
/// missing from a score contributes 0 there), then takes the highest,
/// smallest id first among ties. Candidates are the items scored at least
/// once.
pub fn select_by_priority<T: Real>(scores: &[SelectionScore<'_, T>], batch_size: usize) -> Batch {
    let mut total: HashMap<&ItemId, T> = HashMap::new();
    for score in scores {
        for &(id, p) in &score.priority {
            let slot = total.entry(id).or_insert_with(T::zero);
            *slot = *slot + p;
        }
    }
    let mut ranked: Vec<(&ItemId, T)> = total.into_iter().collect();
    let order = |a: &(&ItemId, T), b: &(&ItemId, T)| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(b.0))
    };
    if batch_size < ranked.len() {
        ranked.select_nth_unstable_by(batch_size, order);
        ranked.truncate(batch_size);
    }
    ranked.sort_by(order);
    Batch::from_ids(ranked.into_iter().map(|(id, _)| id.clone()).collect())
}

pub fn select_meec<T: Real>(
    pool: &EvaluationPool,
    posterior: &PosteriorEstimate<T>,
    strategy: VettingStrategyKind,
    batch_size: usize,
) -> Result<Batch, StrategyError> {
    let score = meec_scores(pool, posterior, strategy)?;
    Ok(select_by_priority(&[score], batch_size))
}

/// Checks a batch against the pool: unvetted, distinct, known ids.
pub fn batch_is_valid(pool: &EvaluationPool, batch: &Batch) -> bool {
    let mut seen = BTreeSet::new();
    batch
        .ids
        .iter()
        .all(|id| seen.insert(id) && pool.get(id).is_some_and(|i| !i.label.is_vetted()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TestItem;
    use crate::estimators::naive_posterior;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(items: Vec<TestItem>) -> EvaluationPool {
        EvaluationPool::new(items).unwrap()
    }

    fn posterior(pairs: &[(&str, f64)]) -> PosteriorEstimate<f64> {
        PosteriorEstimate::new(
            pairs
                .iter()
                .map(|(id, p)| (ItemId::from(*id), *p))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn random_skips_fully_vetted_categories() {
        let mut items: Vec<TestItem> = (0..10)
            .map(|i| TestItem::new(format!("a{i}"), "a", 0.5, true).vetted(true))
            .collect();
        items.extend((0..10).map(|i| TestItem::new(format!("b{i}"), "b", 0.5, true)));
        let p = pool(items);
        let batch = select_random_hierarchical(&p, 4, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(batch.ids.len(), 4);
        assert!(batch.ids.iter().all(|id| id.0.starts_with('b')));
        assert!(batch_is_valid(&p, &batch));
    }

    #[test]
    fn random_returns_everything_when_batch_exceeds_pool() {
        let p = pool(
            (0..5)
                .map(|i| TestItem::new(format!("x{i}"), "a", 0.5, true))
                .collect(),
        );
        let mut ids = select_random_hierarchical(&p, 50, &mut ChaCha8Rng::seed_from_u64(0)).ids;
        ids.sort();
        assert_eq!(
            ids,
            p.items().iter().map(|i| i.id.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn random_on_empty_pool_is_exhausted() {
        let p = pool(vec![TestItem::new("a", "a", 0.5, true).vetted(true)]);
        assert!(select_random_hierarchical(&p, 3, &mut ChaCha8Rng::seed_from_u64(0)).exhausted);
    }

    #[test]
    fn random_samples_categories_evenly() {
        // unequal category sizes, so item-uniform sampling would give 0.9
        let mut items: Vec<TestItem> = (0..9000)
            .map(|i| TestItem::new(format!("a{i}"), "a", 0.5, true))
            .collect();
        items.extend((0..1000).map(|i| TestItem::new(format!("b{i}"), "b", 0.5, true)));
        let p = pool(items);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut from_a = 0;
        for _ in 0..10_000 {
            let batch = select_random_hierarchical(&p, 1, &mut rng);
            from_a += usize::from(batch.ids[0].0.starts_with('a'));
        }
        let frac = from_a as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn random_is_reproducible() {
        let p = pool(
            (0..50)
                .map(|i| {
                    TestItem::new(
                        format!("x{i:02}"),
                        if i % 3 == 0 { "a" } else { "b" },
                        0.5,
                        true,
                    )
                })
                .collect(),
        );
        let a = select_random_hierarchical(&p, 7, &mut ChaCha8Rng::seed_from_u64(5));
        let b = select_random_hierarchical(&p, 7, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn mcm_prefers_confident_noisy_negatives() {
        let p = pool(vec![
            TestItem::new("first", "a", 0.9, false),
            TestItem::new("second", "a", 0.8, true),
            TestItem::new("third", "a", 0.7, false),
        ]);
        assert_eq!(
            select_mcm(&p, 2).ids,
            vec![ItemId::from("first"), ItemId::from("third")]
        );
    }

    #[test]
    fn mcm_falls_back_to_score_order_and_breaks_ties_by_id() {
        let p = pool(vec![
            TestItem::new("b", "a", 0.5, true),
            TestItem::new("a", "a", 0.5, true),
            TestItem::new("c", "a", 0.9, true),
        ]);
        let batch = select_mcm(&p, 3);
        let ids: Vec<&str> = batch.ids.iter().map(ItemId::as_str).collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn mcm_ignores_monotone_score_transforms() {
        let items: Vec<TestItem> = (0..30)
            .map(|i| {
                TestItem::new(
                    format!("x{i:02}"),
                    "a",
                    f64::from((i * 7) % 30) / 30.0,
                    i % 4 == 0,
                )
            })
            .collect();
        let warped: Vec<TestItem> = items
            .iter()
            .map(|i| TestItem {
                score: (3.0 * i.score).exp() - 2.0,
                ..i.clone()
            })
            .collect();
        assert_eq!(select_mcm(&pool(items), 12), select_mcm(&pool(warped), 12));
    }

    #[test]
    fn meec_prec_formula() {
        assert!((meec_score_prec(0.5f64, 48).unwrap() - 2.0 / 48.0 * 0.25).abs() < 1e-15);
        assert!((meec_score_prec(0.5f64, 48).unwrap() - 0.010417).abs() < 1e-6);
        assert_eq!(meec_score_prec(0.0, 5).unwrap(), 0.0);
        assert_eq!(meec_score_prec(1.0, 5).unwrap(), 0.0);
        assert_eq!(meec_score_prec(0.3, 0), Err(StrategyError::ZeroK));
    }

    #[test]
    fn meec_ap_formula() {
        let n = PositiveCount::exact(10);
        assert!((meec_score_ap(0.5, 0.2, n).unwrap() - 0.005f64).abs() < 1e-15);
        assert_eq!(meec_score_ap(0.5, 0.0, n).unwrap(), 0.0);
        assert_eq!(
            meec_score_ap(0.5, 0.2, PositiveCount::exact(0)),
            Err(StrategyError::ZeroPositives)
        );
    }

    #[test]
    fn meec_prec_picks_highest_entropy() {
        let p = pool(vec![
            TestItem::new("sure", "a", 0.9, true),
            TestItem::new("unsure", "a", 0.8, true),
        ]);
        let post = posterior(&[("sure", 0.9), ("unsure", 0.5)]);
        let batch = select_meec(&p, &post, VettingStrategyKind::MeecPrec { k: 2 }, 1).unwrap();
        assert_eq!(batch.ids, vec![ItemId::from("unsure")]);
    }

    #[test]
    fn meec_prec_ignores_items_below_k() {
        let p = pool(vec![
            TestItem::new("top", "a", 0.9, true),
            TestItem::new("low", "a", 0.1, true),
        ]);
        let post = posterior(&[("top", 0.99), ("low", 0.5)]);
        let batch = select_meec(&p, &post, VettingStrategyKind::MeecPrec { k: 1 }, 2).unwrap();
        assert_eq!(batch.ids, vec![ItemId::from("top")]);
    }

    #[test]
    fn meec_ap_orders_by_r_at_equal_p() {
        // ten unvetted items; "hi" has 1 above it, "lo" has 6
        let mut items: Vec<TestItem> = (0..10)
            .map(|i| TestItem::new(format!("x{i}"), "a", 1.0 - 0.1 * f64::from(i), true))
            .collect();
        items[1].id = "hi".into();
        items[6].id = "lo".into();
        let p = pool(items);
        let mut probs: Vec<(String, f64)> =
            p.items().iter().map(|i| (i.id.0.clone(), 1.0)).collect();
        for (id, prob) in &mut probs {
            if id == "hi" || id == "lo" {
                *prob = 0.5;
            }
        }
        let post =
            PosteriorEstimate::new(probs.into_iter().map(|(id, p)| (ItemId(id), p)).collect())
                .unwrap();
        let score = meec_scores(&p, &post, VettingStrategyKind::MeecAp).unwrap();
        assert!((score.r_of(&"hi".into()).unwrap() - 0.1f64).abs() < 1e-15);
        assert!((score.r_of(&"lo".into()).unwrap() - 0.6f64).abs() < 1e-15);
        let batch = select_by_priority(&[score], 1);
        assert_eq!(batch.ids, vec![ItemId::from("lo")]);
    }

    #[test]
    fn summed_priorities_cover_the_union() {
        let (x, y, z) = (ItemId::from("x"), ItemId::from("y"), ItemId::from("z"));
        let a = SelectionScore {
            priority: vec![(&x, 0.1), (&y, 0.3)],
            r: Vec::new(),
        };
        let b = SelectionScore {
            priority: vec![(&x, 0.25), (&z, 0.2)],
            r: Vec::new(),
        };
        let ids: Vec<ItemId> = select_by_priority(&[a, b], 3).ids;
        assert_eq!(
            ids,
            vec![ItemId::from("x"), ItemId::from("y"), ItemId::from("z")]
        );
    }

    #[test]
    fn meec_pools_across_categories() {
        let p = pool(vec![
            TestItem::new("a1", "a", 0.9, true),
            TestItem::new("a2", "a", 0.8, true),
            TestItem::new("b1", "b", 0.9, true),
            TestItem::new("b2", "b", 0.8, true),
        ]);
        let post = posterior(&[("a1", 0.5), ("a2", 0.45), ("b1", 0.99), ("b2", 0.99)]);
        let batch = select_meec(&p, &post, VettingStrategyKind::MeecPrec { k: 2 }, 2).unwrap();
        assert_eq!(batch.ids, vec![ItemId::from("a1"), ItemId::from("a2")]);
    }

    #[test]
    fn meec_is_deterministic_and_stays_unvetted() {
        let items: Vec<TestItem> = (0..40)
            .map(|i| {
                let item = TestItem::new(
                    format!("x{i:02}"),
                    if i % 2 == 0 { "a" } else { "b" },
                    f64::from(i % 9),
                    i % 3 == 0,
                );
                if i % 5 == 0 {
                    item.vetted(true)
                } else {
                    item
                }
            })
            .collect();
        let p = pool(items);
        let post = naive_posterior::<f64>(&p);
        for strategy in [
            VettingStrategyKind::MeecPrec { k: 10 },
            VettingStrategyKind::MeecAp,
        ] {
            let a = select_meec(&p, &post, strategy, 8).unwrap();
            assert_eq!(a, select_meec(&p, &post, strategy, 8).unwrap());
            assert!(batch_is_valid(&p, &a));
        }
    }
}
