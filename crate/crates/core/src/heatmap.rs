//! Per-image heat maps recovered from the columns of `H`, align-corners
//! bilinear upsampling, and overlay rendering.

use image::{GrayImage, Luma, Rgb, RgbImage, Rgba, RgbaImage};
use ndarray::Array2;

use crate::nmf::Factorization;
use crate::tensor::{ActivationTensor, BatchLayout, TensorError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HeatmapError {
    #[error("LayoutMismatch: H has {h_rows} rows, layout covers {layout_rows}")]
    LayoutMismatch { h_rows: usize, layout_rows: usize },
    #[error("SizeMismatch: {0}")]
    SizeMismatch(String),
    #[error("InvalidStack: {0}")]
    InvalidStack(String),
}

/// The `k` heat maps of one image, all of the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMapStack {
    pub image_id: String,
    height: usize,
    width: usize,
    maps: Vec<Array2<f32>>,
}

impl HeatMapStack {
    pub fn new(image_id: impl Into<String>, maps: Vec<Array2<f32>>) -> Result<Self, HeatmapError> {
        let first = maps
            .first()
            .ok_or_else(|| HeatmapError::InvalidStack("a stack needs at least one map".into()))?;
        let (height, width) = first.dim();
        if maps.iter().any(|m| m.dim() != (height, width)) {
            return Err(HeatmapError::InvalidStack("maps differ in size".into()));
        }
        if let Some(v) = maps.iter().flatten().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(HeatmapError::InvalidStack(format!("invalid heat value {v}")));
        }
        Ok(Self {
            image_id: image_id.into(),
            height,
            width,
            maps,
        })
    }

    pub fn k(&self) -> usize {
        self.maps.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn maps(&self) -> &[Array2<f32>] {
        &self.maps
    }

    pub fn map(&self, factor: usize) -> &Array2<f32> {
        &self.maps[factor]
    }

    pub fn max_value(&self) -> f32 {
        self.maps.iter().flatten().copied().fold(0.0, f32::max)
    }

    /// Upsamples every map to `target_h x target_w`.
    pub fn upsample(&self, target_h: usize, target_w: usize) -> HeatMapStack {
        HeatMapStack {
            image_id: self.image_id.clone(),
            height: target_h,
            width: target_w,
            maps: self
                .maps
                .iter()
                .map(|m| bilinear_upsample(m, target_h, target_w))
                .collect(),
        }
    }

    /// Packs the stack as an `h x w x k` tensor, the on-disk form of maps.
    pub fn to_tensor(&self) -> ActivationTensor {
        let k = self.k();
        let mut data = Vec::with_capacity(self.height * self.width * k);
        for y in 0..self.height {
            for x in 0..self.width {
                data.extend(self.maps.iter().map(|m| m[[y, x]]));
            }
        }
        ActivationTensor::new(self.image_id.clone(), self.height, self.width, k, data)
            .expect("stack values are validated non-negative")
    }

    pub fn from_tensor(t: &ActivationTensor) -> Result<Self, HeatmapError> {
        let maps = (0..t.channels())
            .map(|c| Array2::from_shape_fn((t.height(), t.width()), |(y, x)| t.get(y, x, c)))
            .collect();
        Self::new(t.image_id(), maps)
    }
}

impl From<TensorError> for HeatmapError {
    fn from(e: TensorError) -> Self {
        HeatmapError::InvalidStack(e.to_string())
    }
}

/// Reshapes every column of `H` into one map per image: factor `j` of image
/// `i` at `(y, x)` is `H[offset_i + y*w_i + x, j]`.
pub fn columns_to_heatmaps(
    f: &Factorization,
    layout: &BatchLayout,
) -> Result<Vec<HeatMapStack>, HeatmapError> {
    if f.h.nrows() != layout.total_rows() {
        return Err(HeatmapError::LayoutMismatch {
            h_rows: f.h.nrows(),
            layout_rows: layout.total_rows(),
        });
    }
    layout
        .entries()
        .iter()
        .map(|e| {
            let maps = (0..f.h.ncols())
                .map(|j| {
                    Array2::from_shape_fn((e.height, e.width), |(y, x)| {
                        f.h[[e.row_offset + y * e.width + x, j]]
                    })
                })
                .collect();
            HeatMapStack::new(e.image_id.clone(), maps)
        })
        .collect()
}

/// Inverse of [`columns_to_heatmaps`]: stacks the maps back into `H`.
pub fn heatmaps_to_columns(stacks: &[HeatMapStack]) -> Array2<f32> {
    let k = stacks.first().map_or(0, HeatMapStack::k);
    let rows: usize = stacks.iter().map(|s| s.height * s.width).sum();
    let mut h = Array2::zeros((rows, k));
    let mut offset = 0;
    for s in stacks {
        for (j, m) in s.maps.iter().enumerate() {
            for ((y, x), &v) in m.indexed_iter() {
                h[[offset + y * s.width + x, j]] = v;
            }
        }
        offset += s.height * s.width;
    }
    h
}

fn source_coord(dst: usize, dst_len: usize, src_len: usize) -> f64 {
    if src_len == 1 || dst_len == 1 {
        0.0
    } else {
        dst as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64
    }
}

/// Bilinear resize with align-corners semantics: output corners coincide
/// with input corners. Degenerate axes sample coordinate 0.
pub fn bilinear_upsample(m: &Array2<f32>, target_h: usize, target_w: usize) -> Array2<f32> {
    let (h, w) = m.dim();
    assert!(h >= 1 && w >= 1 && target_h >= 1 && target_w >= 1, "empty grid");
    if (h, w) == (target_h, target_w) {
        return m.clone();
    }
    let cols: Vec<(usize, usize, f64)> = (0..target_w)
        .map(|x| {
            let sx = source_coord(x, target_w, w);
            let x0 = (sx.floor() as usize).min(w - 1);
            (x0, (x0 + 1).min(w - 1), sx - x0 as f64)
        })
        .collect();
    Array2::from_shape_fn((target_h, target_w), |(y, x)| {
        let sy = source_coord(y, target_h, h);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        let (x0, x1, fx) = cols[x];
        let v = |yy: usize, xx: usize| m[[yy, xx]] as f64;
        let top = (1.0 - fx) * v(y0, x0) + fx * v(y0, x1);
        let bottom = (1.0 - fx) * v(y1, x0) + fx * v(y1, x1);
        ((1.0 - fy) * top + fy * bottom) as f32
    })
}

/// Distinct colors cycled when `k` exceeds the list.
pub const DEFAULT_PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [70, 240, 240],
    [245, 130, 48],
    [240, 50, 230],
    [128, 128, 0],
    [0, 0, 128],
];

pub fn default_palette(k: usize) -> Vec<[u8; 3]> {
    DEFAULT_PALETTE.iter().copied().cycle().take(k).collect()
}

/// Blends, per pixel, the color of the strongest factor into `image` with
/// opacity equal to that factor's value over the stack's global maximum.
/// Ties go to the lower factor index; pixels where every factor is zero are
/// left untouched.
pub fn render_overlay(
    image: &RgbImage,
    stack: &HeatMapStack,
    palette: &[[u8; 3]],
) -> Result<RgbaImage, HeatmapError> {
    if (image.height() as usize, image.width() as usize) != (stack.height, stack.width) {
        return Err(HeatmapError::SizeMismatch(format!(
            "image is {}x{}, stack is {}x{}",
            image.height(),
            image.width(),
            stack.height,
            stack.width
        )));
    }
    if palette.len() < stack.k() {
        return Err(HeatmapError::SizeMismatch(format!(
            "palette has {} colors for {} factors",
            palette.len(),
            stack.k()
        )));
    }
    let global_max = stack.max_value();
    let mut out = RgbaImage::new(image.width(), image.height());
    for (x, y, &Rgb(px)) in image.enumerate_pixels() {
        let (yy, xx) = (y as usize, x as usize);
        let mut best = 0;
        for j in 1..stack.k() {
            if stack.maps[j][[yy, xx]] > stack.maps[best][[yy, xx]] {
                best = j;
            }
        }
        let value = stack.maps[best][[yy, xx]];
        let rgb = if global_max > 0.0 && value > 0.0 {
            let alpha = (value / global_max) as f64;
            let color = palette[best];
            std::array::from_fn(|c| {
                ((1.0 - alpha) * px[c] as f64 + alpha * color[c] as f64).round() as u8
            })
        } else {
            px
        };
        out.put_pixel(x, y, Rgba([rgb[0], rgb[1], rgb[2], 255]));
    }
    Ok(out)
}

/// 8-bit grayscale images of every factor map, min-max scaled per factor
/// across the whole set. Returned as `[image][factor]`.
pub fn grayscale_factor_maps(stacks: &[HeatMapStack]) -> Vec<Vec<GrayImage>> {
    let k = stacks.first().map_or(0, HeatMapStack::k);
    let ranges: Vec<(f32, f32)> = (0..k)
        .map(|j| {
            stacks
                .iter()
                .flat_map(|s| s.maps[j].iter().copied())
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        })
        .collect();
    stacks
        .iter()
        .map(|s| {
            s.maps
                .iter()
                .zip(&ranges)
                .map(|(m, &(lo, hi))| {
                    let span = hi - lo;
                    GrayImage::from_fn(s.width as u32, s.height as u32, |x, y| {
                        let v = m[[y as usize, x as usize]];
                        let scaled = if span > 0.0 { (v - lo) / span * 255.0 } else { 0.0 };
                        Luma([scaled.round().clamp(0.0, 255.0) as u8])
                    })
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn factorization(h: Array2<f32>) -> Factorization {
        let k = h.ncols();
        Factorization { h, w: Array2::ones((k, 1)), loss_trace: vec![], iterations_run: 0 }
    }

    #[test]
    fn column_reshapes_row_major() {
        let f = factorization(array![[0.1], [0.2], [0.3], [0.4]]);
        let layout = BatchLayout::from_shapes([("img", 2, 2)]);
        let stacks = columns_to_heatmaps(&f, &layout).unwrap();
        assert_eq!(stacks.len(), 1);
        assert_eq!(stacks[0].map(0), &array![[0.1, 0.2], [0.3, 0.4]]);
    }

    #[test]
    fn columns_round_trip_with_two_images() {
        let h = Array2::from_shape_fn((10, 3), |(r, c)| (r * 3 + c) as f32 * 0.5);
        let layout = BatchLayout::from_shapes([("a", 2, 2), ("b", 3, 2)]);
        let stacks = columns_to_heatmaps(&factorization(h.clone()), &layout).unwrap();
        assert_eq!((stacks[1].height(), stacks[1].width()), (3, 2));
        assert_eq!(stacks[1].map(2)[[0, 0]], h[[4, 2]]);
        assert_eq!(heatmaps_to_columns(&stacks), h);
    }

    #[test]
    fn layout_mismatch() {
        let f = factorization(Array2::ones((10, 1)));
        let layout = BatchLayout::from_shapes([("a", 2, 4)]);
        assert_eq!(
            columns_to_heatmaps(&f, &layout),
            Err(HeatmapError::LayoutMismatch { h_rows: 10, layout_rows: 8 })
        );
    }

    #[test]
    fn upsample_constant_and_identity() {
        let c = Array2::from_elem((3, 5), 0.7f32);
        assert_eq!(bilinear_upsample(&c, 11, 4), Array2::from_elem((11, 4), 0.7f32));
        let m = array![[0.0f32, 1.0, 5.0], [2.0, 3.0, 0.25]];
        assert_eq!(bilinear_upsample(&m, 2, 3), m);
    }

    #[test]
    fn upsample_align_corners_closed_form() {
        let m = array![[0.0f32, 1.0], [0.0, 1.0]];
        let up = bilinear_upsample(&m, 4, 4);
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for row in up.rows() {
            for (v, e) in row.iter().zip(expected) {
                assert!((*v as f64 - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn upsample_degenerate_axes() {
        let single = array![[2.5f32]];
        assert_eq!(bilinear_upsample(&single, 3, 2), Array2::from_elem((3, 2), 2.5));
        // a 1-row target samples source row 0
        let m = array![[1.0f32, 3.0], [10.0, 30.0]];
        assert_eq!(bilinear_upsample(&m, 1, 3), array![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn overlay_zero_stack_is_identity() {
        let img = RgbImage::from_fn(3, 2, |x, y| Rgb([x as u8 * 40, y as u8 * 90, 7]));
        let stack = HeatMapStack::new("a", vec![Array2::zeros((2, 3)); 2]).unwrap();
        let out = render_overlay(&img, &stack, &default_palette(2)).unwrap();
        for (x, y, p) in out.enumerate_pixels() {
            let Rgb(src) = *img.get_pixel(x, y);
            assert_eq!(p.0, [src[0], src[1], src[2], 255]);
        }
    }

    #[test]
    fn overlay_one_hot_uses_full_strength() {
        let img = RgbImage::from_pixel(2, 2, Rgb([10, 20, 30]));
        let mut maps = vec![Array2::zeros((2, 2)); 3];
        maps[2][[1, 0]] = 1.0;
        let stack = HeatMapStack::new("a", maps).unwrap();
        let palette = default_palette(3);
        let out = render_overlay(&img, &stack, &palette).unwrap();
        let c = palette[2];
        assert_eq!(out.get_pixel(0, 1).0, [c[0], c[1], c[2], 255]);
        assert_eq!(out.get_pixel(1, 1).0, [10, 20, 30, 255]);
    }

    #[test]
    fn overlay_tie_goes_to_lower_factor() {
        let img = RgbImage::from_pixel(1, 1, Rgb([0, 0, 0]));
        let stack =
            HeatMapStack::new("a", vec![array![[0.0f32]], array![[2.0f32]], array![[2.0f32]]]).unwrap();
        let palette = default_palette(3);
        let out = render_overlay(&img, &stack, &palette).unwrap();
        let c = palette[1];
        assert_eq!(out.get_pixel(0, 0).0, [c[0], c[1], c[2], 255]);
    }

    #[test]
    fn overlay_size_mismatch() {
        let img = RgbImage::new(3, 3);
        let stack = HeatMapStack::new("a", vec![Array2::zeros((2, 3))]).unwrap();
        assert!(matches!(
            render_overlay(&img, &stack, &default_palette(1)),
            Err(HeatmapError::SizeMismatch(_))
        ));
    }

    #[test]
    fn grayscale_scaling_spans_the_set() {
        let a = HeatMapStack::new("a", vec![array![[0.0f32, 1.0]]]).unwrap();
        let b = HeatMapStack::new("b", vec![array![[2.0f32, 4.0]]]).unwrap();
        let images = grayscale_factor_maps(&[a, b]);
        assert_eq!(images[0][0].as_raw(), &vec![0, 64]);
        assert_eq!(images[1][0].as_raw(), &vec![128, 255]);
    }

    #[test]
    fn tensor_round_trip() {
        let stack = HeatMapStack::new(
            "a",
            vec![array![[0.0f32, 1.0], [2.0, 3.0]], array![[4.0f32, 5.0], [6.0, 7.0]]],
        )
        .unwrap();
        assert_eq!(HeatMapStack::from_tensor(&stack.to_tensor()).unwrap(), stack);
    }
}
