//! Mean-field refinement of upsampled heat maps. The pairwise message is a
//! guided filter steered by the image luma; the unary term is a softmax over
//! the normalized factor maps plus an explicit background channel.

use image::RgbImage;
use ndarray::{Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::heatmap::HeatMapStack;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RefineError {
    #[error("SizeMismatch: {0}")]
    SizeMismatch(String),
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub iterations: usize,
    /// Guided-filter window half-size in pixels.
    pub radius: usize,
    pub epsilon: f64,
    pub pairwise_weight: f64,
    /// Unary score of the background channel. `None` uses the median of
    /// the normalized factor values over the whole set.
    pub background_level: Option<f32>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            radius: 30,
            epsilon: 1e-4,
            pairwise_weight: 3.0,
            background_level: None,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if self.radius < 1 {
            return Err(RefineError::InvalidConfig("radius must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(RefineError::InvalidConfig("epsilon must be positive".into()));
        }
        if !(self.pairwise_weight >= 0.0) {
            return Err(RefineError::InvalidConfig("pairwise_weight must be non-negative".into()));
        }
        if let Some(b) = self.background_level {
            if !b.is_finite() {
                return Err(RefineError::InvalidConfig("background_level must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Rec. 601 luma scaled to [0, 1].
pub fn luma(image: &RgbImage) -> Array2<f32> {
    Array2::from_shape_fn((image.height() as usize, image.width() as usize), |(y, x)| {
        let p = image.get_pixel(x as u32, y as u32).0;
        (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0
    })
}

/// Mean over `(2r+1)²` windows clamped to the grid, from a summed-area table.
fn box_mean(src: &Array2<f64>, radius: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let mut integral = Array2::<f64>::zeros((h + 1, w + 1));
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += src[[y, x]];
            integral[[y + 1, x + 1]] = integral[[y, x + 1]] + row;
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
        let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
        let sum = integral[[y1, x1]] - integral[[y0, x1]] - integral[[y1, x0]] + integral[[y0, x0]];
        sum / ((y1 - y0) * (x1 - x0)) as f64
    })
}

pub(crate) fn guided_filter_f64(
    guide: &Array2<f64>,
    src: &Array2<f64>,
    radius: usize,
    epsilon: f64,
) -> Array2<f64> {
    let mean_g = box_mean(guide, radius);
    let mean_s = box_mean(src, radius);
    let corr_gs = box_mean(&(guide * src), radius);
    let corr_gg = box_mean(&(guide * guide), radius);

    let mut a = Array2::<f64>::zeros(guide.dim());
    let mut b = Array2::<f64>::zeros(guide.dim());
    Zip::from(&mut a)
        .and(&mut b)
        .and(&mean_g)
        .and(&mean_s)
        .and(&corr_gs)
        .and(&corr_gg)
        .for_each(|a, b, &mg, &ms, &cgs, &cgg| {
            let var = (cgg - mg * mg).max(0.0);
            *a = (cgs - mg * ms) / (var + epsilon);
            *b = ms - *a * mg;
        });
    let mean_a = box_mean(&a, radius);
    let mean_b = box_mean(&b, radius);
    &mean_a * guide + &mean_b
}

/// Guided filter `q = mean(a)·guide + mean(b)` with
/// `a = cov(guide, src) / (var(guide) + ε)` and `b = mean(src) − a·mean(guide)`.
pub fn guided_filter(
    guide: &Array2<f32>,
    src: &Array2<f32>,
    radius: usize,
    epsilon: f64,
) -> Result<Array2<f32>, RefineError> {
    if guide.dim() != src.dim() {
        return Err(RefineError::SizeMismatch(format!(
            "guide is {:?}, src is {:?}",
            guide.dim(),
            src.dim()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(RefineError::InvalidConfig("epsilon must be positive".into()));
    }
    let q = guided_filter_f64(&guide.mapv(f64::from), &src.mapv(f64::from), radius, epsilon);
    Ok(q.mapv(|v| v as f32))
}

/// Per-pixel label distribution over `k` factors plus a trailing background
/// channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMaps {
    pub image_id: String,
    pub channels: Vec<Array2<f64>>,
}

impl ProbabilityMaps {
    pub fn k(&self) -> usize {
        self.channels.len() - 1
    }

    /// The `k` factor channels as a heat-map stack (background dropped).
    pub fn factor_stack(&self) -> HeatMapStack {
        let maps = self.channels[..self.k()]
            .iter()
            .map(|c| c.mapv(|v| v as f32))
            .collect();
        HeatMapStack::new(self.image_id.clone(), maps).expect("probabilities are valid heat values")
    }
}

fn softmax_in_place(channels: &mut [Array2<f64>]) {
    let (h, w) = channels[0].dim();
    let mut buf = vec![0.0; channels.len()];
    for y in 0..h {
        for x in 0..w {
            let max = channels.iter().map(|c| c[[y, x]]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (b, c) in buf.iter_mut().zip(channels.iter()) {
                *b = (c[[y, x]] - max).exp();
                total += *b;
            }
            for (b, c) in buf.iter().zip(channels.iter_mut()) {
                c[[y, x]] = b / total;
            }
        }
    }
}

fn set_max(stacks: &[HeatMapStack]) -> f32 {
    stacks.iter().map(HeatMapStack::max_value).fold(0.0, f32::max)
}

/// Median (nearest-rank) of the factor values after dividing by the set max.
pub fn median_normalized_value(stacks: &[HeatMapStack]) -> f32 {
    let max = set_max(stacks);
    let mut values: Vec<f32> = stacks
        .iter()
        .flat_map(|s| s.maps().iter().flatten().copied())
        .map(|v| if max > 0.0 { v / max } else { v })
        .collect();
    if values.is_empty() {
        return 0.0;
    }
    let rank = (values.len() + 1) / 2;
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, f32::total_cmp);
    *v
}

/// Unary probabilities: per pixel, softmax over the factor values (divided
/// by the maximum over the whole set) and `background_level`.
pub fn softmax_unary(stacks: &[HeatMapStack], background_level: f32) -> Vec<ProbabilityMaps> {
    let max = set_max(stacks);
    let scale = if max > 0.0 { 1.0 / max as f64 } else { 1.0 };
    stacks
        .iter()
        .map(|s| {
            let mut channels: Vec<Array2<f64>> =
                s.maps().iter().map(|m| m.mapv(|v| v as f64 * scale)).collect();
            channels.push(Array2::from_elem((s.height(), s.width()), background_level as f64));
            softmax_in_place(&mut channels);
            ProbabilityMaps {
                image_id: s.image_id.clone(),
                channels,
            }
        })
        .collect()
}

/// Runs the mean-field iteration on one image, calling `observe` with the
/// distribution after every iteration.
pub fn meanfield_iterate<F>(
    unary: &ProbabilityMaps,
    guide: &Array2<f32>,
    cfg: &RefineConfig,
    mut observe: F,
) -> Result<ProbabilityMaps, RefineError>
where
    F: FnMut(usize, &ProbabilityMaps),
{
    cfg.validate()?;
    if unary.channels[0].dim() != guide.dim() {
        return Err(RefineError::SizeMismatch(format!(
            "{}: maps are {:?}, guide is {:?}",
            unary.image_id,
            unary.channels[0].dim(),
            guide.dim()
        )));
    }
    // With no pairwise weight the update is softmax(log U) = U.
    if cfg.pairwise_weight == 0.0 {
        return Ok(unary.clone());
    }
    let guide = guide.mapv(f64::from);
    let log_unary: Vec<Array2<f64>> = unary
        .channels
        .iter()
        .map(|u| u.mapv(|p| p.max(f64::MIN_POSITIVE).ln()))
        .collect();
    let mut q = unary.clone();
    for it in 0..cfg.iterations {
        let mut next: Vec<Array2<f64>> = q
            .channels
            .iter()
            .zip(&log_unary)
            .map(|(qj, lu)| {
                let message = guided_filter_f64(&guide, qj, cfg.radius, cfg.epsilon);
                lu + &(message * cfg.pairwise_weight)
            })
            .collect();
        softmax_in_place(&mut next);
        q.channels = next;
        observe(it, &q);
    }
    Ok(q)
}

/// Refines every image's upsampled stack against its guide; returns the
/// `k` factor channels of the final distribution.
pub fn meanfield_refine(
    stacks: &[HeatMapStack],
    guides: &[Array2<f32>],
    cfg: &RefineConfig,
) -> Result<Vec<HeatMapStack>, RefineError> {
    cfg.validate()?;
    if stacks.len() != guides.len() {
        return Err(RefineError::SizeMismatch(format!(
            "{} stacks but {} guides",
            stacks.len(),
            guides.len()
        )));
    }
    let background = cfg
        .background_level
        .unwrap_or_else(|| median_normalized_value(stacks));
    let unaries = softmax_unary(stacks, background);
    unaries
        .par_iter()
        .zip(guides.par_iter())
        .map(|(u, g)| meanfield_iterate(u, g, cfg, |_, _| {}).map(|q| q.factor_stack()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(h: usize, w: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((h, w), || rng.gen::<f32>())
    }

    /// Direct evaluation of every window mean, no summed-area table.
    fn window_mean(m: &Array2<f64>, y: usize, x: usize, r: usize) -> f64 {
        let (h, w) = m.dim();
        let mut sum = 0.0;
        let mut n = 0;
        for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
            for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                sum += m[[yy, xx]];
                n += 1;
            }
        }
        sum / n as f64
    }

    fn guided_filter_oracle(g: &Array2<f64>, p: &Array2<f64>, r: usize, eps: f64) -> Array2<f64> {
        let (h, w) = g.dim();
        let mut a = Array2::zeros((h, w));
        let mut b = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let (mut sg, mut sp, mut sgp, mut sgg, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                    for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                        sg += g[[yy, xx]];
                        sp += p[[yy, xx]];
                        sgp += g[[yy, xx]] * p[[yy, xx]];
                        sgg += g[[yy, xx]] * g[[yy, xx]];
                        n += 1.0;
                    }
                }
                let (mg, mp) = (sg / n, sp / n);
                let ak = (sgp / n - mg * mp) / (sgg / n - mg * mg + eps);
                a[[y, x]] = ak;
                b[[y, x]] = mp - ak * mg;
            }
        }
        Array2::from_shape_fn((h, w), |(y, x)| {
            window_mean(&a, y, x, r) * g[[y, x]] + window_mean(&b, y, x, r)
        })
    }

    #[test]
    fn box_mean_matches_direct_windows() {
        let m = random_grid(7, 9, 1).mapv(f64::from);
        let fast = box_mean(&m, 2);
        for ((y, x), v) in fast.indexed_iter() {
            assert!((v - window_mean(&m, y, x, 2)).abs() < 1e-12);
        }
    }

    #[test]
    fn guided_filter_matches_window_oracle() {
        let guide = random_grid(4, 4, 2);
        let src = random_grid(4, 4, 3);
        let q = guided_filter(&guide, &src, 1, 0.01).unwrap();
        let oracle = guided_filter_oracle(&guide.mapv(f64::from), &src.mapv(f64::from), 1, 0.01);
        for (a, b) in q.iter().zip(oracle.iter()) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn guided_filter_constant_src() {
        let guide = random_grid(6, 5, 4);
        let src = Array2::from_elem((6, 5), 0.375f32);
        let q = guided_filter(&guide, &src, 2, 1e-3).unwrap();
        for v in q.iter() {
            assert!((v - 0.375).abs() < 1e-6);
        }
    }

    #[test]
    fn guided_filter_self_guidance() {
        let g = random_grid(12, 12, 5);
        let q = guided_filter(&g, &g, 2, 1e-8).unwrap();
        for (a, b) in q.iter().zip(g.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn guided_filter_size_mismatch() {
        let g = Array2::<f32>::zeros((3, 3));
        let s = Array2::<f32>::zeros((3, 4));
        assert!(matches!(guided_filter(&g, &s, 1, 0.1), Err(RefineError::SizeMismatch(_))));
    }

    #[test]
    fn softmax_unary_examples() {
        let stack = HeatMapStack::new("a", vec![array![[1.0f32]], array![[0.0f32]]]).unwrap();
        let p = &softmax_unary(&[stack], 0.0)[0];
        let e = std::f64::consts::E;
        let expected = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        for (c, want) in p.channels.iter().zip(expected) {
            assert!((c[[0, 0]] - want).abs() < 1e-12);
        }

        // equal to background at every channel after normalization
        let flat = HeatMapStack::new("b", vec![array![[0.5f32]], array![[0.5f32]]]).unwrap();
        let p = &softmax_unary(&[flat], 1.0)[0];
        for c in &p.channels {
            assert!((c[[0, 0]] - 1.0 / 3.0).abs() < 1e-12);
        }

        let dominant =
            HeatMapStack::new("c", vec![array![[1000.0f32]], array![[0.0f32]]]).unwrap();
        let p = &softmax_unary(&[dominant], -1000.0)[0];
        assert!(p.channels[0][[0, 0]] > 0.5);
    }

    #[test]
    fn softmax_unary_normalizes_over_the_set() {
        let a = HeatMapStack::new("a", vec![array![[2.0f32]]]).unwrap();
        let b = HeatMapStack::new("b", vec![array![[4.0f32]]]).unwrap();
        let p = softmax_unary(&[a, b], 0.0);
        let expected = 0.5f64.exp() / (0.5f64.exp() + 1.0);
        assert!((p[0].channels[0][[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_and_zero_weight_are_fixed_points() {
        let stacks = vec![
            HeatMapStack::new("a", vec![random_grid(8, 8, 6), random_grid(8, 8, 7)]).unwrap(),
        ];
        let guides = vec![random_grid(8, 8, 8)];
        let unary = softmax_unary(&stacks, 0.3)[0].factor_stack();

        let cfg = RefineConfig { iterations: 0, radius: 2, background_level: Some(0.3), ..RefineConfig::default() };
        assert_eq!(meanfield_refine(&stacks, &guides, &cfg).unwrap()[0], unary);

        let cfg = RefineConfig { iterations: 7, pairwise_weight: 0.0, ..cfg };
        assert_eq!(meanfield_refine(&stacks, &guides, &cfg).unwrap()[0], unary);
    }

    #[test]
    fn dominant_channel_survives_refinement() {
        let mut strong = Array2::from_elem((8, 8), 0.9f32);
        strong[[0, 0]] = 1.0;
        let weak = Array2::from_elem((8, 8), 0.1f32);
        let stacks = vec![HeatMapStack::new("a", vec![weak, strong]).unwrap()];
        let guides = vec![Array2::from_elem((8, 8), 0.5f32)];
        let cfg = RefineConfig { radius: 2, background_level: Some(0.0), ..RefineConfig::default() };
        let refined = &meanfield_refine(&stacks, &guides, &cfg).unwrap()[0];
        assert!(Zip::from(refined.map(1)).and(refined.map(0)).all(|s, w| s > w));
    }

    #[test]
    fn refine_rejects_mismatched_guides() {
        let stacks = vec![HeatMapStack::new("a", vec![Array2::zeros((4, 4))]).unwrap()];
        let guides = vec![Array2::zeros((4, 5))];
        assert!(matches!(
            meanfield_refine(&stacks, &guides, &RefineConfig::default()),
            Err(RefineError::SizeMismatch(_))
        ));
    }

    #[test]
    fn luma_of_white_is_one() {
        let img = RgbImage::from_pixel(2, 1, image::Rgb([255, 255, 255]));
        assert!(luma(&img).iter().all(|v| (v - 1.0).abs() < 1e-6));
    }
}
