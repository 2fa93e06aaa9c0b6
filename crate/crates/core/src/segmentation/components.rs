use std::collections::VecDeque;

use ndarray::Array2;

use super::localization::BBox;
use super::{Mask, SegmentationError};

/// 8-connected labeling. Labels are dense from 1 in row-major order of each
/// component's first pixel; background is 0. `sizes[l - 1]` is the pixel
/// count of label `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub labels: Array2<u32>,
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

pub fn connected_components(mask: &Mask) -> Components {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            let label = sizes.len() as u32 + 1;
            labels[[y, x]] = label;
            queue.push_back((y, x));
            let mut size = 0;
            while let Some((cy, cx)) = queue.pop_front() {
                size += 1;
                for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                    for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                        if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = label;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            sizes.push(size);
        }
    }
    Components { labels, sizes }
}

/// Tight inclusive box around the largest 8-connected component; among
/// equally large components the lowest label wins.
pub fn largest_component_bbox(mask: &Mask) -> Result<BBox, SegmentationError> {
    let comps = connected_components(mask);
    let (best, _) = comps
        .sizes
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, usize)>, (i, &s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((i, s)),
        })
        .ok_or(SegmentationError::NoForeground)?;
    let label = best as u32 + 1;
    let (mut x_min, mut y_min, mut x_max, mut y_max) = (usize::MAX, usize::MAX, 0, 0);
    for ((y, x), &l) in comps.labels.indexed_iter() {
        if l == label {
            x_min = x_min.min(x);
            y_min = y_min.min(y);
            x_max = x_max.max(x);
            y_max = y_max.max(y);
        }
    }
    Ok(BBox::new(x_min as u32, y_min as u32, x_max as u32, y_max as u32)
        .expect("extent of a non-empty component"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> Mask {
        Array2::from_shape_fn((rows.len(), rows[0].len()), |(y, x)| {
            rows[y].as_bytes()[x] == b'#'
        })
    }

    #[test]
    fn diagonal_neighbours_connect() {
        let c = connected_components(&mask(&["#.", ".#"]));
        assert_eq!(c.count(), 1);
        assert_eq!(c.sizes, vec![2]);
    }

    #[test]
    fn empty_and_full() {
        assert_eq!(connected_components(&mask(&["...", "..."])).count(), 0);
        let full = connected_components(&mask(&["###", "###"]));
        assert_eq!(full.sizes, vec![6]);
    }

    #[test]
    fn labels_follow_scan_order() {
        let c = connected_components(&mask(&["#..#", "...#", "##.."]));
        assert_eq!(c.sizes, vec![1, 2, 2]);
        assert_eq!(c.labels[[0, 3]], 2);
        assert_eq!(c.labels[[2, 0]], 3);
    }

    #[test]
    fn bbox_of_largest_component() {
        let m = mask(&[
            "##....", //
            "##..#.", //
            "#...##", //
            "......",
        ]);
        // sizes 5 (left) and 3 (right)
        assert_eq!(largest_component_bbox(&m).unwrap(), BBox::new(0, 0, 1, 2).unwrap());
    }

    #[test]
    fn bbox_ties_prefer_first_component() {
        let m = mask(&["##..##"]);
        assert_eq!(largest_component_bbox(&m).unwrap(), BBox::new(0, 0, 1, 0).unwrap());
    }

    #[test]
    fn bbox_errors_and_full_extent() {
        assert_eq!(largest_component_bbox(&mask(&["..", ".."])), Err(SegmentationError::NoForeground));
        assert_eq!(largest_component_bbox(&mask(&["###", "###"])).unwrap(), BBox::new(0, 0, 2, 1).unwrap());
    }
}
