//! Turning detections and box-or-mask ground truth into label views.
//!
//! Each detection is paired with the free ground-truth instance it overlaps
//! most, judged by the noisy (box) IoU. The pair's binary label at an IoU
//! threshold is whether the detection mask overlaps the ground-truth mask
//! by at least that much; its noisy label is the same test against the
//! box. Vetting the pair reveals the mask.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    Benchmark, CategoryId, DatasetError, DetectionInstance, EvaluationPool, GroundTruthInstance,
    LabelState, TestItem,
};
use crate::metrics::{greedy_assign, mask_box_iou, mask_iou};

/// Features visible without the ground-truth mask. Areas are fractions of
/// the image grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairFeatures {
    pub noisy_iou: f64,
    pub det_box_area: f64,
    pub gt_box_area: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstancePair {
    pub detection_id: String,
    pub category: CategoryId,
    pub image: String,
    pub score: f64,
    pub gt_id: Option<String>,
    pub noisy_iou: f64,
    /// Mask IoU, when the ground truth has a vetted or simulated mask.
    pub true_iou: Option<f64>,
    /// Whether the paired ground truth already carries a vetted mask.
    pub gt_vetted: bool,
    pub features: Option<PairFeatures>,
}

pub fn pair_detections(
    detections: &[DetectionInstance],
    ground_truth: &[GroundTruthInstance],
) -> Result<Vec<InstancePair>, DatasetError> {
    let assigned = greedy_assign(
        detections,
        ground_truth,
        |det, gt| Ok(noisy_overlap(det, gt)),
        |iou: f64| iou > 0.0,
    )
    .map_err(|e| DatasetError::Instance {
        id: "pairing".into(),
        message: e.to_string(),
    })?;
    let mut pairs = Vec::with_capacity(detections.len());
    for (det, (gt, noisy_iou)) in detections.iter().zip(assigned) {
        let gt = gt.map(|g| &ground_truth[g]);
        let true_iou = match gt.and_then(GroundTruthInstance::reference_mask) {
            Some(mask) => {
                Some(
                    mask_iou::<f64>(&det.mask, mask).map_err(|e| DatasetError::Instance {
                        id: det.id.clone(),
                        message: e.to_string(),
                    })?,
                )
            }
            None => None,
        };
        let grid = f64::from(det.mask.width()) * f64::from(det.mask.height());
        pairs.push(InstancePair {
            detection_id: det.id.clone(),
            category: det.category.clone(),
            image: det.image.clone(),
            score: det.score,
            gt_id: gt.map(|g| g.id.clone()),
            noisy_iou,
            true_iou,
            gt_vetted: gt.is_some_and(|g| g.mask.is_some()),
            features: gt.map(|g| PairFeatures {
                noisy_iou,
                det_box_area: det.bbox.area() / grid,
                gt_box_area: g.bbox.area() / grid,
            }),
        });
    }
    Ok(pairs)
}

impl InstancePair {
    fn item_at(&self, threshold: f64) -> TestItem {
        let (noisy, truth, vetted) = match self.gt_id {
            // nothing to overlap: a certain false positive, no vetting needed
            None => (false, Some(false), true),
            Some(_) => (
                self.noisy_iou >= threshold,
                self.true_iou.map(|iou| iou >= threshold),
                self.gt_vetted,
            ),
        };
        let label = match (vetted, truth) {
            (true, Some(truth)) => LabelState::Vetted { noisy, truth },
            _ => LabelState::Unvetted { noisy },
        };
        TestItem {
            id: self.detection_id.clone().into(),
            category: self.category.clone(),
            score: self.score,
            label,
            sim_truth: truth,
            features: self.features,
            meta: Some(serde_json::json!({ "image": self.image, "gt": self.gt_id })),
        }
    }
}

/// One view per IoU threshold over the paired detections. Every category's
/// positive count is fixed to its number of ground-truth instances, so
/// instances no detection reached still count against AP.
pub fn build_benchmark(
    detections: &[DetectionInstance],
    ground_truth: &[GroundTruthInstance],
    thresholds: &[f64],
) -> Result<Benchmark, DatasetError> {
    let pairs = pair_detections(detections, ground_truth)?;
    let mut totals: BTreeMap<CategoryId, usize> = BTreeMap::new();
    for gt in ground_truth {
        *totals.entry(gt.category.clone()).or_default() += 1;
    }
    let views = thresholds
        .iter()
        .map(|&t| {
            EvaluationPool::new(pairs.iter().map(|p| p.item_at(t)).collect())
                .map(|pool| pool.with_positive_totals(totals.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Benchmark::from_views(views, thresholds.to_vec())
}

fn noisy_overlap(det: &DetectionInstance, gt: &GroundTruthInstance) -> f64 {
    mask_box_iou(&det.mask, &gt.bbox)
}
