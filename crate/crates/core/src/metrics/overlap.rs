//! Region overlap and one-to-one detection matching.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BoundingBox, DetectionInstance, GroundTruthInstance, Mask};
use crate::scalar::{Real, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum OverlapError {
    #[error("mask grids differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("ground truth without a mask: {0:?}")]
    MissingMasks(Vec<String>),
    #[error("IoU threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
}

pub fn box_iou<T: Real>(a: &BoundingBox, b: &BoundingBox) -> T {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = T::lit(w * h);
    let union = T::lit(a.area()) + T::lit(b.area()) - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    }
}

fn check_dims(a: &Mask, b: &Mask) -> Result<(), OverlapError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(OverlapError::DimensionMismatch(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ));
    }
    Ok(())
}

/// Cell-set IoU of two masks on the same grid. Two empty masks score 0.
pub fn mask_iou<T: Scalar>(a: &Mask, b: &Mask) -> Result<T, OverlapError> {
    check_dims(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.decode().into_iter().zip(b.decode()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 {
        T::zero()
    } else {
        T::from_count(inter) / T::from_count(union)
    })
}

/// IoU of a mask with a box rasterized onto the mask's grid (cells whose
/// centers fall inside the box, clipped to the grid).
pub fn mask_box_iou<T: Scalar>(mask: &Mask, b: &BoundingBox) -> T {
    let raster = Mask::rasterize_box(mask.width(), mask.height(), b);
    mask_iou(mask, &raster).expect("raster shares the mask grid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    /// Detection mask against the ground-truth box.
    Noisy,
    /// Detection mask against the ground-truth mask.
    True,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchSpec {
    pub iou_threshold: f64,
}

impl MatchSpec {
    pub fn new(iou_threshold: f64) -> Result<Self, OverlapError> {
        if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
            return Err(OverlapError::InvalidThreshold(iou_threshold));
        }
        Ok(MatchSpec { iou_threshold })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord<T> {
    pub detection_id: String,
    pub matched: bool,
    /// Ground truth the detection was assigned to, if any.
    pub gt_id: Option<String>,
    /// Best IoU over the ground truth still available to this detection.
    pub iou: T,
}

/// Order in which detections claim ground truth: descending score, then
/// ascending id.
pub(crate) fn claim_order(detections: &[DetectionInstance]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        let (a, b) = (&detections[a], &detections[b]);
        b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
    });
    order
}

/// Greedy one-to-one assignment within (image, category). Each detection,
/// best score first, takes the free ground truth of highest overlap if
/// `accept` admits that overlap. Returns `(gt index, iou)` per detection,
/// indexed like `detections`; the gt index is `None` when unassigned.
pub(crate) fn greedy_assign<T, F, A>(
    detections: &[DetectionInstance],
    ground_truth: &[GroundTruthInstance],
    mut overlap: F,
    accept: A,
) -> Result<Vec<(Option<usize>, T)>, OverlapError>
where
    T: Scalar,
    F: FnMut(&DetectionInstance, &GroundTruthInstance) -> Result<T, OverlapError>,
    A: Fn(T) -> bool,
{
    let mut taken = vec![false; ground_truth.len()];
    let mut result = vec![(None, T::zero()); detections.len()];
    let mut gt_order: Vec<usize> = (0..ground_truth.len()).collect();
    gt_order.sort_by(|&a, &b| ground_truth[a].id.cmp(&ground_truth[b].id));
    for d in claim_order(detections) {
        let det = &detections[d];
        let mut best: Option<(usize, T)> = None;
        for &g in &gt_order {
            let gt = &ground_truth[g];
            if taken[g] || gt.category != det.category || gt.image != det.image {
                continue;
            }
            let iou = overlap(det, gt)?;
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, iou)) = best {
            if accept(iou) {
                taken[g] = true;
                result[d] = (Some(g), iou);
            } else {
                result[d] = (None, iou);
            }
        }
    }
    Ok(result)
}

/// Matches detections to ground truth one-to-one, greedily by descending
/// score within each category and image. A detection counts as a true
/// positive when its best free ground truth overlaps it by at least the
/// threshold; a second detection on an already claimed instance is a
/// false positive.
pub fn match_detections<T: Scalar>(
    detections: &[DetectionInstance],
    ground_truth: &[GroundTruthInstance],
    spec: &MatchSpec,
    mode: IouMode,
) -> Result<Vec<MatchRecord<T>>, OverlapError> {
    let spec = MatchSpec::new(spec.iou_threshold)?;
    if mode == IouMode::True {
        let wanted: HashSet<(&str, &str)> = detections
            .iter()
            .map(|d| (d.image.as_str(), d.category.as_str()))
            .collect();
        let missing: Vec<String> = ground_truth
            .iter()
            .filter(|g| g.reference_mask().is_none())
            .filter(|g| wanted.contains(&(g.image.as_str(), g.category.as_str())))
            .map(|g| g.id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(OverlapError::MissingMasks(missing));
        }
    }
    let threshold = T::from_f64(spec.iou_threshold).expect("threshold is representable");
    let assigned = greedy_assign(
        detections,
        ground_truth,
        |det, gt| match mode {
            IouMode::Noisy => Ok(mask_box_iou(&det.mask, &gt.bbox)),
            IouMode::True => mask_iou(&det.mask, gt.reference_mask().expect("checked above")),
        },
        |iou| iou >= threshold,
    )?;
    Ok(detections
        .iter()
        .zip(assigned)
        .map(|(det, (gt, iou))| MatchRecord {
            detection_id: det.id.clone(),
            matched: gt.is_some(),
            gt_id: gt.map(|g| ground_truth[g].id.clone()),
            iou,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    fn bbox(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn block(x0: u32, y0: u32, x1: u32, y1: u32) -> Mask {
        Mask::from_fn(20, 20, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    fn gt(id: &str, mask: Mask) -> GroundTruthInstance {
        GroundTruthInstance {
            id: id.into(),
            category: "c".into(),
            image: "0".into(),
            bbox: mask.tight_box().unwrap(),
            mask: None,
            sim_mask: Some(mask),
        }
    }

    #[test]
    fn box_iou_examples() {
        let a = bbox(0.0, 0.0, 10.0, 10.0);
        let b = bbox(5.0, 0.0, 15.0, 10.0);
        assert!((box_iou::<f64>(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(box_iou::<f64>(&a, &a), 1.0);
        assert_eq!(box_iou::<f32>(&a, &bbox(20.0, 20.0, 30.0, 30.0)), 0.0);
    }

    #[test]
    fn mask_iou_examples() {
        let left = Mask::from_fn(10, 10, |x, _| x < 5);
        let right = Mask::from_fn(10, 10, |x, _| x >= 5);
        assert_eq!(mask_iou::<f64>(&left, &left).unwrap(), 1.0);
        assert_eq!(mask_iou::<f64>(&left, &right).unwrap(), 0.0);
        assert_eq!(
            mask_box_iou::<Ratio<i64>>(&left, &bbox(0.0, 0.0, 10.0, 10.0)),
            Ratio::new(1, 2)
        );
        assert!(matches!(
            mask_iou::<f64>(&left, &Mask::from_fn(5, 10, |_, _| true)),
            Err(OverlapError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn mask_iou_is_symmetric() {
        let a = block(0, 0, 8, 6);
        let b = block(3, 2, 12, 9);
        assert_eq!(
            mask_iou::<f64>(&a, &b).unwrap(),
            mask_iou::<f64>(&b, &a).unwrap()
        );
    }

    #[test]
    fn single_detection_above_threshold_matches() {
        // 6x10 det inside a 10x10 gt: IoU 0.6
        let gts = [gt("g", block(0, 0, 10, 10))];
        let dets = [DetectionInstance::from_mask(
            "d",
            "c",
            "0",
            0.9,
            block(0, 0, 6, 10),
        )];
        let spec = MatchSpec::new(0.5).unwrap();
        let m = match_detections::<f64>(&dets, &gts, &spec, IouMode::True).unwrap();
        assert!(m[0].matched);
        assert!((m[0].iou - 0.6).abs() < 1e-12);
    }

    #[test]
    fn second_detection_on_same_gt_is_false_positive() {
        let gts = [gt("g", block(0, 0, 10, 10))];
        let dets = [
            DetectionInstance::from_mask("low", "c", "0", 0.6, block(0, 0, 10, 9)),
            DetectionInstance::from_mask("high", "c", "0", 0.8, block(0, 0, 10, 8)),
        ];
        let spec = MatchSpec::new(0.5).unwrap();
        for mode in [IouMode::Noisy, IouMode::True] {
            let m = match_detections::<f64>(&dets, &gts, &spec, mode).unwrap();
            assert!(!m[0].matched);
            assert!(m[1].matched);
            assert_eq!(m[1].gt_id.as_deref(), Some("g"));
        }
    }

    #[test]
    fn no_ground_truth_means_no_matches() {
        let dets = [DetectionInstance::from_mask(
            "d",
            "c",
            "0",
            0.8,
            block(0, 0, 4, 4),
        )];
        let m = match_detections::<f64>(&dets, &[], &MatchSpec::new(0.5).unwrap(), IouMode::Noisy)
            .unwrap();
        assert!(!m[0].matched);
        assert_eq!(m[0].iou, 0.0);
    }

    #[test]
    fn categories_do_not_cross_match() {
        let gts = [gt("g", block(0, 0, 10, 10))];
        let dets = [DetectionInstance::from_mask(
            "d",
            "other",
            "0",
            0.8,
            block(0, 0, 10, 10),
        )];
        let m = match_detections::<f64>(&dets, &gts, &MatchSpec::new(0.5).unwrap(), IouMode::True)
            .unwrap();
        assert!(!m[0].matched);
    }

    #[test]
    fn true_mode_needs_masks() {
        let mut g = gt("g", block(0, 0, 10, 10));
        g.sim_mask = None;
        let dets = [DetectionInstance::from_mask(
            "d",
            "c",
            "0",
            0.8,
            block(0, 0, 10, 10),
        )];
        let err =
            match_detections::<f64>(&dets, &[g], &MatchSpec::new(0.5).unwrap(), IouMode::True);
        assert_eq!(err, Err(OverlapError::MissingMasks(vec!["g".into()])));
    }

    #[test]
    fn threshold_must_be_open_unit_interval() {
        assert!(MatchSpec::new(0.0).is_err());
        assert!(MatchSpec::new(1.0).is_err());
    }
}
