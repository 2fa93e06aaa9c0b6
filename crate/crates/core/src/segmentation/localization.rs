use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SegmentationError;

/// Inclusive pixel box. Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    x_min: u32,
    y_min: u32,
    x_max: u32,
    y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self, SegmentationError> {
        if x_min > x_max || y_min > y_max {
            return Err(SegmentationError::InvalidBox([x_min, y_min, x_max, y_max]));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn x_min(&self) -> u32 {
        self.x_min
    }

    pub fn y_min(&self) -> u32 {
        self.y_min
    }

    pub fn x_max(&self) -> u32 {
        self.x_max
    }

    pub fn y_max(&self) -> u32 {
        self.y_max
    }

    pub fn area(&self) -> u64 {
        (self.x_max - self.x_min + 1) as u64 * (self.y_max - self.y_min + 1) as u64
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let x0 = self.x_min.max(other.x_min);
        let y0 = self.y_min.max(other.y_min);
        let x1 = self.x_max.min(other.x_max);
        let y1 = self.y_max.min(other.y_max);
        if x0 > x1 || y0 > y1 {
            0
        } else {
            (x1 - x0 + 1) as u64 * (y1 - y0 + 1) as u64
        }
    }

    /// `(intersection, union)` pixel counts.
    pub fn overlap_counts(&self, other: &BBox) -> (u64, u64) {
        let inter = self.intersection_area(other);
        (inter, self.area() + other.area() - inter)
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x_max < width && self.y_max < height
    }
}

impl TryFrom<[u32; 4]> for BBox {
    type Error = SegmentationError;

    fn try_from(v: [u32; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

/// IoU of two inclusive pixel boxes.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union) = a.overlap_counts(b);
    inter as f64 / union as f64
}

/// Whether the overlap strictly exceeds one half, decided on integer counts.
pub fn boxes_match(a: &BBox, b: &BBox) -> bool {
    let (inter, union) = a.overlap_counts(b);
    2 * inter > union
}

/// Percentage of predicted boxes whose IoU with some ground-truth box of the
/// same image exceeds 0.5.
pub fn corloc(
    preds: &BTreeMap<String, BBox>,
    gts: &BTreeMap<String, Vec<BBox>>,
) -> Result<f64, SegmentationError> {
    if preds.is_empty() {
        return Err(SegmentationError::NoPredictions);
    }
    let mut correct = 0usize;
    for (image, pred) in preds {
        let boxes = gts
            .get(image)
            .filter(|b| !b.is_empty())
            .ok_or_else(|| SegmentationError::MissingGroundTruth(image.clone()))?;
        if boxes.iter().any(|gt| boxes_match(pred, gt)) {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / preds.len() as f64)
}
