//! Seeded synthetic benchmarks with controllable label noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    CategoryId, DatasetError, DetectionInstance, EvaluationPool, GroundTruthInstance, Mask,
    TestItem,
};

const SCORE_LIMIT: f64 = 1e6;

/// Noisy-tag corruption for one category: `p(y=1|z=1)` and `p(y=1|z=0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipPair {
    pub p_y1_given_z1: f64,
    pub p_y1_given_z0: f64,
}

impl Default for FlipPair {
    /// A relevant tag is present 38% of the time, an irrelevant one 1%.
    fn default() -> Self {
        FlipPair {
            p_y1_given_z1: 0.38,
            p_y1_given_z0: 0.01,
        }
    }
}

/// Class-conditional Gaussian scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreModel {
    pub pos_mean: f64,
    pub pos_std: f64,
    pub neg_mean: f64,
    pub neg_std: f64,
}

impl Default for ScoreModel {
    fn default() -> Self {
        ScoreModel {
            pos_mean: 1.5,
            pos_std: 1.0,
            neg_mean: 0.0,
            neg_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TagSynthSpec {
    pub n_categories: usize,
    pub items_per_category: usize,
    /// Prior probability that an item is truly positive.
    pub positive_rate: f64,
    /// One entry per category, or a single entry shared by all.
    pub flip_priors: Vec<FlipPair>,
    pub score: ScoreModel,
    pub seed: u64,
}

impl Default for TagSynthSpec {
    fn default() -> Self {
        TagSynthSpec {
            n_categories: 10,
            items_per_category: 500,
            positive_rate: 0.1,
            flip_priors: vec![FlipPair::default()],
            score: ScoreModel::default(),
            seed: 0,
        }
    }
}

fn probability(name: &str, p: f64) -> Result<(), DatasetError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(DatasetError::InvalidSpec(format!(
            "{name} = {p} is not a probability"
        )))
    }
}

impl TagSynthSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.n_categories == 0 || self.items_per_category == 0 {
            return Err(DatasetError::InvalidSpec("empty dataset".into()));
        }
        if self.n_categories > 1000 {
            return Err(DatasetError::InvalidSpec("at most 1000 categories".into()));
        }
        probability("positive_rate", self.positive_rate)?;
        if self.flip_priors.len() != 1 && self.flip_priors.len() != self.n_categories {
            return Err(DatasetError::InvalidSpec(format!(
                "{} flip prior entries for {} categories",
                self.flip_priors.len(),
                self.n_categories
            )));
        }
        for pair in &self.flip_priors {
            probability("p_y1_given_z1", pair.p_y1_given_z1)?;
            probability("p_y1_given_z0", pair.p_y1_given_z0)?;
        }
        check_scores(&self.score)
    }

    fn flip(&self, category: usize) -> FlipPair {
        self.flip_priors[category.min(self.flip_priors.len() - 1)]
    }
}

fn check_scores(model: &ScoreModel) -> Result<(), DatasetError> {
    let ok = [model.pos_mean, model.neg_mean]
        .iter()
        .all(|m| m.is_finite())
        && [model.pos_std, model.neg_std]
            .iter()
            .all(|s| s.is_finite() && *s >= 0.0);
    if ok {
        Ok(())
    } else {
        Err(DatasetError::InvalidSpec(
            "score model needs finite means and std >= 0".into(),
        ))
    }
}

pub fn synthesize_tag_dataset(spec: &TagSynthSpec) -> Result<EvaluationPool, DatasetError> {
    let mut pools = synthesize_tag_systems(spec, &[spec.score])?;
    Ok(pools.remove(0))
}

/// Several systems scoring one shared labelled item set. Labels come from
/// one random stream, each system's scores from its own.
pub fn synthesize_tag_systems(
    spec: &TagSynthSpec,
    systems: &[ScoreModel],
) -> Result<Vec<EvaluationPool>, DatasetError> {
    spec.validate()?;
    for model in systems {
        check_scores(model)?;
    }
    let mut label_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = Vec::with_capacity(spec.n_categories * spec.items_per_category);
    for c in 0..spec.n_categories {
        let flip = spec.flip(c);
        for i in 0..spec.items_per_category {
            let z = label_rng.gen::<f64>() < spec.positive_rate;
            let p_y = if z {
                flip.p_y1_given_z1
            } else {
                flip.p_y1_given_z0
            };
            let y = label_rng.gen::<f64>() < p_y;
            labels.push((format!("c{c:03}-{i:05}"), format!("c{c:03}"), z, y));
        }
    }
    systems
        .iter()
        .enumerate()
        .map(|(s, model)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(s as u64 + 1);
            let pos = Normal::new(model.pos_mean, model.pos_std).expect("validated");
            let neg = Normal::new(model.neg_mean, model.neg_std).expect("validated");
            let items = labels
                .iter()
                .map(|(id, cat, z, y)| {
                    let raw = if *z {
                        pos.sample(&mut rng)
                    } else {
                        neg.sample(&mut rng)
                    };
                    let score = raw.clamp(-SCORE_LIMIT, SCORE_LIMIT);
                    TestItem::new(id.as_str(), cat, score, *y).with_sim_truth(*z)
                })
                .collect();
            EvaluationPool::new(items)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    NotchedRect,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceSynthSpec {
    pub n_images: usize,
    pub instances_per_image: usize,
    pub n_categories: usize,
    pub grid_width: u32,
    pub grid_height: u32,
    pub min_size: u32,
    pub max_size: u32,
    pub shape_family: ShapeFamily,
    /// Largest shift, in cells, applied to a detection copied from its
    /// instance. Nonzero radii also grow or shrink the copy by one cell.
    pub perturbation_radius: u32,
    /// Expected number of non-overlapping distractors per true detection.
    pub distractor_rate: f64,
    pub miss_rate: f64,
    pub score_noise: f64,
    pub seed: u64,
}

impl Default for InstanceSynthSpec {
    fn default() -> Self {
        InstanceSynthSpec {
            n_images: 200,
            instances_per_image: 3,
            n_categories: 4,
            grid_width: 64,
            grid_height: 64,
            min_size: 6,
            max_size: 16,
            shape_family: ShapeFamily::Mixed,
            perturbation_radius: 2,
            distractor_rate: 0.3,
            miss_rate: 0.1,
            score_noise: 0.1,
            seed: 0,
        }
    }
}

impl InstanceSynthSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.n_images == 0 || self.n_categories == 0 {
            return Err(DatasetError::InvalidSpec("empty dataset".into()));
        }
        if self.min_size < 3 || self.min_size > self.max_size {
            return Err(DatasetError::InvalidSpec(
                "need 3 <= min_size <= max_size".into(),
            ));
        }
        if self.max_size > self.grid_width || self.max_size > self.grid_height {
            return Err(DatasetError::InvalidSpec(
                "shapes larger than the grid".into(),
            ));
        }
        if !(self.distractor_rate >= 0.0 && self.distractor_rate <= 1.0) {
            return Err(DatasetError::InvalidSpec(
                "distractor_rate must lie in [0, 1]".into(),
            ));
        }
        probability("miss_rate", self.miss_rate)?;
        if !(self.score_noise >= 0.0 && self.score_noise.is_finite()) {
            return Err(DatasetError::InvalidSpec("score_noise must be >= 0".into()));
        }
        Ok(())
    }
}

struct Shaper<'a> {
    spec: &'a InstanceSynthSpec,
}

impl Shaper<'_> {
    fn random_shape(&self, rng: &mut ChaCha8Rng) -> Mask {
        let s = self.spec;
        let w = rng.gen_range(s.min_size..=s.max_size);
        let h = rng.gen_range(s.min_size..=s.max_size);
        let x0 = rng.gen_range(0..=s.grid_width - w);
        let y0 = rng.gen_range(0..=s.grid_height - h);
        let ellipse = match s.shape_family {
            ShapeFamily::Ellipse => true,
            ShapeFamily::NotchedRect => false,
            ShapeFamily::Mixed => rng.gen_bool(0.5),
        };
        let (cx, cy) = (
            f64::from(x0) + f64::from(w) / 2.0,
            f64::from(y0) + f64::from(h) / 2.0,
        );
        let (rx, ry) = (f64::from(w) / 2.0, f64::from(h) / 2.0);
        let (notch_w, notch_h) = (w / 3, h / 3);
        Mask::from_fn(s.grid_width, s.grid_height, |x, y| {
            if x < x0 || x >= x0 + w || y < y0 || y >= y0 + h {
                return false;
            }
            if ellipse {
                let dx = (f64::from(x) + 0.5 - cx) / rx;
                let dy = (f64::from(y) + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            } else {
                !(x >= x0 + w - notch_w && y < y0 + notch_h)
            }
        })
    }

    fn perturb(&self, mask: &Mask, rng: &mut ChaCha8Rng) -> Mask {
        let r = self.spec.perturbation_radius as i64;
        if r == 0 {
            return mask.clone();
        }
        let (w, h) = (mask.width() as i64, mask.height() as i64);
        let bits = mask.decode();
        let dx = rng.gen_range(-r..=r);
        let dy = rng.gen_range(-r..=r);
        let at = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && bits[(y * w + x) as usize];
        let shifted = |x: i64, y: i64| at(x - dx, y - dy);
        let morph = rng.gen_range(0..3);
        let out = Mask::from_fn(mask.width(), mask.height(), |x, y| {
            let (x, y) = (x as i64, y as i64);
            let here = shifted(x, y);
            let nbrs = [(1, 0), (-1, 0), (0, 1), (0, -1)].map(|(a, b)| shifted(x + a, y + b));
            match morph {
                0 => here,
                1 => here || nbrs.iter().any(|&n| n),
                _ => here && nbrs.iter().all(|&n| n),
            }
        });
        if out.area() == 0 {
            mask.clone()
        } else {
            out
        }
    }
}

/// Ground truth with hidden masks and boxes, plus detections that copy
/// (and perturb) most instances and add distractors overlapping none.
/// Detection scores rise with true overlap.
pub fn synthesize_instance_dataset(
    spec: &InstanceSynthSpec,
) -> Result<(Vec<DetectionInstance>, Vec<GroundTruthInstance>), DatasetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shaper = Shaper { spec };
    let noise = Normal::new(0.0, spec.score_noise).expect("validated");
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for img in 0..spec.n_images {
        let image = format!("img{img:05}");
        let first_gt = gts.len();
        for j in 0..spec.instances_per_image {
            let category = CategoryId(format!("k{:02}", rng.gen_range(0..spec.n_categories)));
            let mask = shaper.random_shape(&mut rng);
            gts.push(GroundTruthInstance {
                id: format!("{image}-g{j}"),
                category,
                image: image.clone(),
                bbox: mask.tight_box().expect("shapes are non-empty"),
                mask: None,
                sim_mask: Some(mask),
            });
        }
        let image_gts = &gts[first_gt..];
        let mut n_det = 0;
        let mut n_true = 0;
        for gt in image_gts {
            if rng.gen::<f64>() < spec.miss_rate {
                continue;
            }
            let truth = gt
                .sim_mask
                .as_ref()
                .expect("synthetic ground truth has masks");
            let mask = shaper.perturb(truth, &mut rng);
            let iou: f64 = crate::metrics::mask_iou(&mask, truth).expect("same grid");
            let score = (0.3 + 0.7 * iou + noise.sample(&mut rng)).clamp(0.0, 1.0);
            dets.push(DetectionInstance::from_mask(
                &format!("{image}-d{n_det}"),
                gt.category.as_str(),
                &image,
                score,
                mask,
            ));
            n_det += 1;
            n_true += 1;
        }
        let mut occupied = vec![false; (spec.grid_width * spec.grid_height) as usize];
        for gt in image_gts {
            let raster = Mask::rasterize_box(spec.grid_width, spec.grid_height, &gt.bbox);
            for (cell, inside) in occupied.iter_mut().zip(raster.decode()) {
                *cell |= inside;
            }
        }
        for _ in 0..n_true {
            if rng.gen::<f64>() >= spec.distractor_rate {
                continue;
            }
            let category = format!("k{:02}", rng.gen_range(0..spec.n_categories));
            let placed = (0..200).map(|_| shaper.random_shape(&mut rng)).find(|m| {
                m.decode()
                    .iter()
                    .zip(&occupied)
                    .all(|(&set, &taken)| !(set && taken))
            });
            if let Some(mask) = placed {
                let score = (0.3 * rng.gen::<f64>() + noise.sample(&mut rng)).clamp(0.0, 1.0);
                dets.push(DetectionInstance::from_mask(
                    &format!("{image}-d{n_det}"),
                    &category,
                    &image,
                    score,
                    mask,
                ));
                n_det += 1;
            }
        }
    }
    Ok((dets, gts))
}
