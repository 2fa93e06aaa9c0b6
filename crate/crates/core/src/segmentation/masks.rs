use std::collections::BTreeMap;

use ndarray::{Array2, Zip};

use super::{Mask, SegmentationError};

/// Binary masks of one factor, one per image in set order.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMaskSet {
    pub factor_id: usize,
    pub masks: Vec<Mask>,
}

impl BinaryMaskSet {
    pub fn foreground_count(&self) -> usize {
        self.masks.iter().map(count).sum()
    }

    pub fn total_count(&self) -> usize {
        self.masks.iter().map(Array2::len).sum()
    }
}

/// Ground-truth pixels of one labeled part, one mask per image in set order.
#[derive(Debug, Clone, PartialEq)]
pub struct PartAnnotation {
    pub part_label: String,
    pub masks: Vec<Mask>,
}

fn count(m: &Mask) -> usize {
    m.iter().filter(|&&v| v).count()
}

/// Nearest-rank percentile: the smallest value with at least `p%` of the
/// samples at or below it.
pub fn nearest_rank(values: &mut [f32], percentile: f64) -> Option<f32> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    let rank = rank.clamp(1, n);
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, f32::total_cmp);
    Some(*v)
}

/// Thresholds factor `factor_id`'s maps at the nearest-rank `percentile` of
/// all their pixels pooled together; a pixel is foreground iff its value is
/// at or above the threshold.
pub fn binarize_factor(
    factor_id: usize,
    maps: &[&Array2<f32>],
    percentile: f64,
) -> Result<BinaryMaskSet, SegmentationError> {
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(SegmentationError::InvalidPercentile(percentile));
    }
    let mut pooled: Vec<f32> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    let threshold = nearest_rank(&mut pooled, percentile).ok_or(SegmentationError::EmptySet)?;
    Ok(BinaryMaskSet {
        factor_id,
        masks: maps.iter().map(|m| m.mapv(|v| v >= threshold)).collect(),
    })
}

fn check_pair(a: &[Mask], b: &[Mask], what: &str) -> Result<(), SegmentationError> {
    if a.len() != b.len() {
        return Err(SegmentationError::SizeMismatch(format!(
            "{what}: {} masks vs {} masks",
            a.len(),
            b.len()
        )));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.dim() != y.dim() {
            return Err(SegmentationError::SizeMismatch(format!(
                "{what}: image {i} is {:?} vs {:?}",
                x.dim(),
                y.dim()
            )));
        }
    }
    Ok(())
}

fn intersection(a: &Mask, b: &Mask) -> usize {
    Zip::from(a).and(b).fold(0, |n, &x, &y| n + usize::from(x && y))
}

fn union(a: &Mask, b: &Mask) -> usize {
    Zip::from(a).and(b).fold(0, |n, &x, &y| n + usize::from(x || y))
}

/// Fraction of the part's pixels, summed over the set, that the factor's
/// masks cover.
pub fn coverage(b: &BinaryMaskSet, p: &PartAnnotation) -> Result<f64, SegmentationError> {
    check_pair(&b.masks, &p.masks, &p.part_label)?;
    let part_pixels: usize = p.masks.iter().map(count).sum();
    if part_pixels == 0 {
        return Err(SegmentationError::EmptyPart(p.part_label.clone()));
    }
    let covered: usize = b.masks.iter().zip(&p.masks).map(|(x, y)| intersection(x, y)).sum();
    Ok(covered as f64 / part_pixels as f64)
}

/// Parts whose coverage strictly exceeds `threshold`.
pub fn associate_parts(coverages: &BTreeMap<String, f64>, threshold: f64) -> Vec<String> {
    coverages
        .iter()
        .filter(|(_, &c)| c > threshold)
        .map(|(label, _)| label.clone())
        .collect()
}

/// Per-image union of the given parts.
pub fn union_of_parts(parts: &[&PartAnnotation], shapes: &[(usize, usize)]) -> Vec<Mask> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, &dim)| {
            let mut m = Array2::from_elem(dim, false);
            for p in parts {
                Zip::from(&mut m).and(&p.masks[i]).for_each(|u, &v| *u |= v);
            }
            m
        })
        .collect()
}

/// Dataset-wide IoU: intersections and unions are summed over all images
/// before dividing. The target is the per-image union of `parts`.
pub fn dataset_iou(
    b: &BinaryMaskSet,
    parts: &[&PartAnnotation],
) -> Result<f64, SegmentationError> {
    for p in parts {
        check_pair(&b.masks, &p.masks, &p.part_label)?;
    }
    let shapes: Vec<_> = b.masks.iter().map(Array2::dim).collect();
    let target = union_of_parts(parts, &shapes);
    let (mut inter, mut uni) = (0usize, 0usize);
    for (m, t) in b.masks.iter().zip(&target) {
        inter += intersection(m, t);
        uni += union(m, t);
    }
    if uni == 0 {
        return Err(SegmentationError::EmptyUnion);
    }
    Ok(inter as f64 / uni as f64)
}
