//! Scoring factor masks against part annotations and boxes, and the CSV
//! layouts the scores are written in.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use dff_core::segmentation::{associate_parts, boxes_match, coverage, dataset_iou, SegmentationError};
use dff_core::{BBox, BinaryMaskSet, PartAnnotation};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("NoParts: every part is labeled background")]
    NoParts,
    #[error("NoFactors: no factor masks to score")]
    NoFactors,
    #[error("UnknownPart: manual map names part {0:?}, which has no annotation")]
    UnknownPart(String),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
}

/// Mean over factors of the best dataset IoU with any non-background part.
/// A factor/part pair whose union is empty scores 0.
pub fn average_best_iou(
    factors: &[BinaryMaskSet],
    parts: &[PartAnnotation],
    background: &[String],
) -> Result<f64, EvalError> {
    let candidates: Vec<&PartAnnotation> = parts
        .iter()
        .filter(|p| !background.contains(&p.part_label))
        .collect();
    if candidates.is_empty() {
        return Err(EvalError::NoParts);
    }
    if factors.is_empty() {
        return Err(EvalError::NoFactors);
    }
    let mut total = 0.0;
    for b in factors {
        let mut best = 0.0f64;
        for p in &candidates {
            let iou = match dataset_iou(b, &[*p]) {
                Ok(v) => v,
                Err(SegmentationError::EmptyUnion) => 0.0,
                Err(e) => return Err(e.into()),
            };
            best = best.max(iou);
        }
        total += best;
    }
    Ok(total / factors.len() as f64)
}

/// One line of the part metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct PartRow {
    pub factor: usize,
    /// Associated parts with their coverage, in label order.
    pub parts: Vec<(String, f64)>,
    /// IoU against the union of `parts`; `None` if nothing was associated.
    pub iou: Option<f64>,
}

/// Associates each factor with the parts it covers beyond `threshold`, or
/// with the manual assignment when one is given for that factor, and
/// scores the association. Parts with no pixels anywhere are skipped.
pub fn part_rows(
    factors: &[BinaryMaskSet],
    parts: &[PartAnnotation],
    threshold: f64,
    manual: Option<&BTreeMap<usize, Vec<String>>>,
) -> Result<Vec<PartRow>, EvalError> {
    let by_label: BTreeMap<&str, &PartAnnotation> =
        parts.iter().map(|p| (p.part_label.as_str(), p)).collect();
    let mut rows = Vec::with_capacity(factors.len());
    for b in factors {
        let mut coverages = BTreeMap::new();
        for p in parts {
            match coverage(b, p) {
                Ok(c) => {
                    coverages.insert(p.part_label.clone(), c);
                }
                Err(SegmentationError::EmptyPart(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let labels = match manual.and_then(|m| m.get(&b.factor_id)) {
            Some(assigned) => {
                for l in assigned {
                    if !by_label.contains_key(l.as_str()) {
                        return Err(EvalError::UnknownPart(l.clone()));
                    }
                }
                assigned.clone()
            }
            None => associate_parts(&coverages, threshold),
        };
        let iou = if labels.is_empty() {
            None
        } else {
            let selected: Vec<&PartAnnotation> = labels.iter().map(|l| by_label[l.as_str()]).collect();
            Some(dataset_iou(b, &selected)?)
        };
        rows.push(PartRow {
            factor: b.factor_id,
            parts: labels
                .into_iter()
                .map(|l| {
                    let c = coverages.get(&l).copied().unwrap_or(0.0);
                    (l, c)
                })
                .collect(),
            iou,
        });
    }
    Ok(rows)
}

/// `factor,parts,coverage,iou`; multiple parts and coverages are joined with
/// `;` in the same order, numbers have six decimals.
pub fn part_rows_csv(rows: &[PartRow]) -> String {
    let mut out = String::from("factor,parts,coverage,iou\n");
    for r in rows {
        let labels: Vec<&str> = r.parts.iter().map(|(l, _)| l.as_str()).collect();
        let covs: Vec<String> = r.parts.iter().map(|(_, c)| format!("{c:.6}")).collect();
        let iou = r.iou.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.factor, labels.join(";"), covs.join(";"), iou);
    }
    out
}

/// CorLoc over every image in `images`: an image without a predicted box
/// (its mask had no foreground) counts as a miss.
pub fn corloc_over_images(
    preds: &BTreeMap<String, BBox>,
    gts: &BTreeMap<String, Vec<BBox>>,
    images: &[String],
) -> Result<f64, EvalError> {
    if images.is_empty() {
        return Err(SegmentationError::NoPredictions.into());
    }
    let mut hits = 0usize;
    for id in images {
        let Some(pred) = preds.get(id) else { continue };
        let boxes = gts
            .get(id)
            .filter(|b| !b.is_empty())
            .ok_or_else(|| SegmentationError::MissingGroundTruth(id.clone()))?;
        if boxes.iter().any(|gt| boxes_match(pred, gt)) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / images.len() as f64)
}

/// `class,corloc` with the score in percent to four decimals.
pub fn corloc_csv(class_name: &str, score: f64) -> String {
    format!("class,corloc\n{class_name},{score:.4}\n")
}

/// One cell of a layer/k sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub layer: String,
    pub k: usize,
    pub scores: Vec<f64>,
}

impl SweepRow {
    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    /// Sample standard deviation; zero for a single trial.
    pub fn std(&self) -> f64 {
        let n = self.scores.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.scores.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// `layer,k,mean_iou,std_iou,trials`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("layer,k,mean_iou,std_iou,trials\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{}",
            r.layer,
            r.k,
            r.mean(),
            r.std(),
            r.scores.len()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn mask(bits: &[u8], w: usize) -> Array2<bool> {
        Array2::from_shape_fn((bits.len() / w, w), |(y, x)| bits[y * w + x] == 1)
    }

    fn factor(id: usize, bits: &[u8]) -> BinaryMaskSet {
        BinaryMaskSet {
            factor_id: id,
            masks: vec![mask(bits, 5)],
        }
    }

    fn part(label: &str, bits: &[u8]) -> PartAnnotation {
        PartAnnotation {
            part_label: label.into(),
            masks: vec![mask(bits, 5)],
        }
    }

    #[test]
    fn identical_masks_score_one() {
        let bits = [1, 1, 0, 0, 0];
        let v = average_best_iou(&[factor(0, &bits)], &[part("head", &bits)], &[]).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn best_matches_are_averaged() {
        // Factor 0: IoU 2/5 with "a"; factor 1: IoU 1/5 with "b".
        let f0 = factor(0, &[1, 1, 0, 0, 0]);
        let f1 = factor(1, &[0, 0, 0, 0, 1]);
        let a = part("a", &[1, 1, 1, 1, 1]);
        let b = part("b", &[1, 1, 1, 1, 1]);
        let v = average_best_iou(&[f0, f1], &[a, b], &[]).unwrap();
        assert!((v - 0.3).abs() < 1e-12, "{v}");
    }

    #[test]
    fn background_is_excluded() {
        let bits = [1, 1, 0, 0, 0];
        let parts = [part("sky", &bits)];
        assert_eq!(
            average_best_iou(&[factor(0, &bits)], &parts, &["sky".into()]),
            Err(EvalError::NoParts)
        );
        let other = [part("sky", &bits), part("head", &[0, 0, 0, 1, 1])];
        let v = average_best_iou(&[factor(0, &bits)], &other, &["sky".into()]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn rows_follow_coverage_or_manual_map() {
        let f = factor(0, &[1, 1, 1, 0, 0]);
        let parts = [part("head", &[1, 1, 0, 0, 0]), part("tail", &[0, 0, 1, 1, 1])];
        let rows = part_rows(std::slice::from_ref(&f), &parts, 0.5, None).unwrap();
        assert_eq!(rows[0].parts, vec![("head".to_string(), 1.0)]);
        assert_eq!(rows[0].iou, Some(2.0 / 3.0));
        let manual = BTreeMap::from([(0, vec!["tail".to_string()])]);
        let rows = part_rows(&[f], &parts, 0.5, Some(&manual)).unwrap();
        assert_eq!(rows[0].parts[0].0, "tail");
        assert_eq!(rows[0].iou, Some(0.2));
    }

    #[test]
    fn images_without_boxes_are_misses() {
        let bx = |x: u32| BBox::new(x, 0, x + 3, 3).unwrap();
        let gts = BTreeMap::from([
            ("a".to_string(), vec![bx(0)]),
            ("b".to_string(), vec![bx(0)]),
            ("c".to_string(), vec![bx(0)]),
            ("d".to_string(), vec![bx(0)]),
        ]);
        let preds = BTreeMap::from([("a".to_string(), bx(0)), ("b".to_string(), bx(10))]);
        let ids: Vec<String> = gts.keys().cloned().collect();
        assert_eq!(corloc_over_images(&preds, &gts, &ids).unwrap(), 25.0);
        assert_eq!(corloc_over_images(&BTreeMap::new(), &gts, &ids).unwrap(), 0.0);
    }

    #[test]
    fn csv_layouts() {
        let rows = [
            PartRow {
                factor: 0,
                parts: vec![("a".into(), 1.0), ("b".into(), 0.5)],
                iou: Some(0.25),
            },
            PartRow {
                factor: 1,
                parts: vec![],
                iou: None,
            },
        ];
        assert_eq!(
            part_rows_csv(&rows),
            "factor,parts,coverage,iou\n0,a;b,1.000000;0.500000,0.250000\n1,,,\n"
        );
        assert_eq!(corloc_csv("cat", 62.5), "class,corloc\ncat,62.5000\n");
    }

    #[test]
    fn sweep_statistics() {
        let r = SweepRow {
            layer: "l".into(),
            k: 2,
            scores: vec![0.2, 0.4],
        };
        assert!((r.mean() - 0.3).abs() < 1e-12);
        assert!((r.std() - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(sweep_csv(&[r]).ends_with("l,2,0.300000,0.141421,2\n"));
    }
}
