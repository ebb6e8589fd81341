use serde::{Deserialize, Serialize};

use super::{CategoryId, DatasetError};

/// Axis-aligned box in continuous pixel coordinates; the cell `(x, y)`
/// spans `[x, x+1) x [y, y+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, String> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), String> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(format!("degenerate box {self:?}"));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    fn max_edge_gap(&self, other: &BoundingBox) -> f64 {
        [
            (self.x_min - other.x_min).abs(),
            (self.y_min - other.y_min).abs(),
            (self.x_max - other.x_max).abs(),
            (self.y_max - other.y_max).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Binary grid stored as row-major run lengths. Runs alternate starting
/// with background, so a mask whose first cell is set begins with a zero
/// run. No other run may be empty, which makes the encoding canonical.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    #[serde(rename = "w")]
    width: u32,
    #[serde(rename = "h")]
    height: u32,
    runs: Vec<u32>,
}

impl Mask {
    pub fn new(width: u32, height: u32, runs: Vec<u32>) -> Result<Self, String> {
        let mask = Mask {
            width,
            height,
            runs,
        };
        mask.validate()?;
        Ok(mask)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.height == 0 {
            return Err("mask dimensions must be positive".into());
        }
        let total: u64 = self.runs.iter().map(|&r| u64::from(r)).sum();
        let cells = u64::from(self.width) * u64::from(self.height);
        if total != cells {
            return Err(format!(
                "run lengths sum to {total}, expected {cells} for a {}x{} grid",
                self.width, self.height
            ));
        }
        if self.runs.iter().skip(1).any(|&r| r == 0) {
            return Err("only the leading run may be empty".into());
        }
        Ok(())
    }

    pub fn from_bits(width: u32, height: u32, bits: &[bool]) -> Self {
        assert_eq!(bits.len(), (width * height) as usize, "bit count mismatch");
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &bit in bits {
            if bit == current {
                len += 1;
            } else {
                runs.push(len);
                current = bit;
                len = 1;
            }
        }
        runs.push(len);
        Mask {
            width,
            height,
            runs,
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let bits: Vec<bool> = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Mask::from_bits(width, height, &bits)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn decode(&self) -> Vec<bool> {
        let mut bits = Vec::with_capacity((self.width * self.height) as usize);
        let mut value = false;
        for &run in &self.runs {
            bits.extend(std::iter::repeat_n(value, run as usize));
            value = !value;
        }
        bits
    }

    pub fn area(&self) -> usize {
        self.runs
            .iter()
            .skip(1)
            .step_by(2)
            .map(|&r| r as usize)
            .sum()
    }

    /// Tight box around the set cells, `None` for an empty mask.
    pub fn tight_box(&self) -> Option<BoundingBox> {
        let bits = self.decode();
        let w = self.width as usize;
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (pos, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            let (x, y) = (pos % w, pos / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        (x0 != usize::MAX).then(|| BoundingBox {
            x_min: x0 as f64,
            y_min: y0 as f64,
            x_max: (x1 + 1) as f64,
            y_max: (y1 + 1) as f64,
        })
    }

    /// Rasterizes a box onto this mask's grid: a cell is inside when its
    /// center is.
    pub fn rasterize_box(width: u32, height: u32, b: &BoundingBox) -> Mask {
        Mask::from_fn(width, height, |x, y| {
            let (cx, cy) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
            cx >= b.x_min && cx <= b.x_max && cy >= b.y_min && cy <= b.y_max
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionInstance {
    pub id: String,
    pub category: CategoryId,
    #[serde(default = "default_image")]
    pub image: String,
    pub score: f64,
    pub mask: Mask,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

impl DetectionInstance {
    pub fn from_mask(id: &str, category: &str, image: &str, score: f64, mask: Mask) -> Self {
        let bbox = mask.tight_box().expect("detection mask is non-empty");
        DetectionInstance {
            id: id.into(),
            category: category.into(),
            image: image.into(),
            score,
            mask,
            bbox,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let err = |message: String| DatasetError::Instance {
            id: self.id.clone(),
            message,
        };
        if !self.score.is_finite() {
            return Err(err("non-finite score".into()));
        }
        self.mask.validate().map_err(err)?;
        let tight = self
            .mask
            .tight_box()
            .ok_or_else(|| err("empty detection mask".into()))?;
        if tight.max_edge_gap(&self.bbox) > 1e-9 {
            return Err(err(format!(
                "declared box {:?} differs from mask box {:?}",
                self.bbox, tight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub id: String,
    pub category: CategoryId,
    #[serde(default = "default_image")]
    pub image: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Mask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_mask: Option<Mask>,
}

impl GroundTruthInstance {
    /// The mask used for true IoU: the vetted one if present, else the
    /// simulation's hidden mask.
    pub fn reference_mask(&self) -> Option<&Mask> {
        self.mask.as_ref().or(self.sim_mask.as_ref())
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let err = |message: String| DatasetError::Instance {
            id: self.id.clone(),
            message,
        };
        self.bbox.validate().map_err(err)?;
        for mask in self.mask.iter().chain(self.sim_mask.iter()) {
            mask.validate().map_err(err)?;
            let tight = mask
                .tight_box()
                .ok_or_else(|| err("empty ground-truth mask".into()))?;
            if tight.max_edge_gap(&self.bbox) > 1.0 {
                return Err(err(format!(
                    "mask box {:?} is more than one pixel from box {:?}",
                    tight, self.bbox
                )));
            }
        }
        Ok(())
    }
}

fn default_image() -> String {
    "0".into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn runs_must_cover_the_grid() {
        assert!(Mask::new(2, 2, vec![1, 2]).is_err());
        assert!(Mask::new(2, 2, vec![0, 4]).is_ok());
        assert!(Mask::new(2, 2, vec![1, 0, 3]).is_err());
    }

    #[test]
    fn tight_box_of_a_block() {
        let m = Mask::from_fn(10, 8, |x, y| (2..5).contains(&x) && (3..7).contains(&y));
        assert_eq!(m.area(), 12);
        assert_eq!(
            m.tight_box(),
            Some(BoundingBox::new(2.0, 3.0, 5.0, 7.0).unwrap())
        );
        assert_eq!(Mask::from_fn(3, 3, |_, _| false).tight_box(), None);
    }

    #[test]
    fn rasterized_tight_box_covers_its_block() {
        let m = Mask::from_fn(10, 10, |x, y| (1..4).contains(&x) && (2..9).contains(&y));
        let b = m.tight_box().unwrap();
        assert_eq!(Mask::rasterize_box(10, 10, &b), m);
    }

    #[test]
    fn detection_box_must_match_mask() {
        let mask = Mask::from_fn(8, 8, |x, y| x < 4 && y < 4);
        let mut det = DetectionInstance::from_mask("d", "c", "0", 0.5, mask);
        det.validate().unwrap();
        det.bbox.x_max = 5.0;
        assert!(det.validate().is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(w in 1u32..12, h in 1u32..12, seed in any::<u64>()) {
            let bits: Vec<bool> = (0..w * h).map(|i| (seed >> (i % 64)) & 1 == 1 || i % 7 == 3).collect();
            let m = Mask::from_bits(w, h, &bits);
            prop_assert!(m.validate().is_ok());
            prop_assert_eq!(m.decode(), bits.clone());
            prop_assert_eq!(Mask::from_bits(w, h, &m.decode()), m.clone());
            prop_assert_eq!(m.area(), bits.iter().filter(|&&b| b).count());
        }
    }
}
