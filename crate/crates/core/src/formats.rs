//! On-disk artifacts other than activations: the factorization container,
//! binary-mask PNGs, part-annotation indexes and ground-truth box files.
//!
//! Factorization container (all integers little-endian):
//!
//! ```text
//! magic "DFFN" | version u16 = 1 | dtype u8 = 1 (f32) | reserved u8 = 0
//! rows u32 | k u32 | cols u32 | iterations_run u32 | trace_len u32 | images u32
//! per image: id_len u16 | id bytes (UTF-8) | height u32 | width u32
//! H: rows·k f32, row-major | W: k·cols f32, row-major | loss trace: trace_len f64
//! ```
//! Row offsets are not stored; they follow from the image order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::nmf::Factorization;
use crate::segmentation::{BBox, Mask, PartAnnotation};
use crate::tensor::BatchLayout;

pub const FACTORIZATION_MAGIC: [u8; 4] = *b"DFFN";
pub const FACTORIZATION_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("BadMagic: not a DFFN factorization file")]
    BadMagic,
    #[error("VersionUnsupported: container version {0}")]
    VersionUnsupported(u16),
    #[error("Truncated: {0}")]
    Truncated(String),
    #[error("Corrupt: {0}")]
    Corrupt(String),
    #[error("ImageError: {path}: {message}")]
    Image { path: String, message: String },
    #[error("JsonError: {path}: {message}")]
    Json { path: String, message: String },
    #[error("SizeMismatch: {0}")]
    SizeMismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn json_err(path: &Path, e: impl std::fmt::Display) -> FormatError {
    FormatError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn encode_factorization(f: &Factorization, layout: &BatchLayout) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&FACTORIZATION_MAGIC);
    out.extend_from_slice(&FACTORIZATION_VERSION.to_le_bytes());
    out.extend_from_slice(&[1, 0]);
    for v in [
        f.h.nrows(),
        f.k(),
        f.w.ncols(),
        f.iterations_run,
        f.loss_trace.len(),
        layout.len(),
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for e in layout.entries() {
        out.extend_from_slice(&(e.image_id.len() as u16).to_le_bytes());
        out.extend_from_slice(e.image_id.as_bytes());
        out.extend_from_slice(&(e.height as u32).to_le_bytes());
        out.extend_from_slice(&(e.width as u32).to_le_bytes());
    }
    for v in f.h.iter().chain(f.w.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &f.loss_trace {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| FormatError::Truncated(format!("while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<usize, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, FormatError> {
        let len = n.checked_mul(4).ok_or_else(|| FormatError::Corrupt(format!("{what} too large")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_factorization(bytes: &[u8]) -> Result<(Factorization, BatchLayout), FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| FormatError::BadMagic)? != FACTORIZATION_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u16("version")?;
    if version != FACTORIZATION_VERSION {
        return Err(FormatError::VersionUnsupported(version));
    }
    let flags = r.take(2, "dtype")?;
    if flags[0] != 1 {
        return Err(FormatError::Corrupt(format!("unsupported dtype {}", flags[0])));
    }
    let rows = r.u32("rows")?;
    let k = r.u32("k")?;
    let cols = r.u32("cols")?;
    let iterations_run = r.u32("iterations")?;
    let trace_len = r.u32("trace length")?;
    let n_images = r.u32("image count")?;
    let mut shapes = Vec::with_capacity(n_images.min(1 << 16));
    for _ in 0..n_images {
        let len = r.u16("image id length")? as usize;
        let id = std::str::from_utf8(r.take(len, "image id")?)
            .map_err(|e| FormatError::Corrupt(e.to_string()))?
            .to_string();
        let h = r.u32("image height")?;
        let w = r.u32("image width")?;
        shapes.push((id, h, w));
    }
    let layout = BatchLayout::from_shapes(shapes);
    if layout.total_rows() != rows {
        return Err(FormatError::Corrupt(format!(
            "layout covers {} rows, H has {rows}",
            layout.total_rows()
        )));
    }
    let h = r.f32s(rows * k, "H")?;
    let w = r.f32s(k * cols, "W")?;
    let trace_bytes = r.take(trace_len * 8, "loss trace")?;
    let loss_trace = trace_bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if r.pos != bytes.len() {
        return Err(FormatError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if h.iter().chain(&w).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(FormatError::Corrupt("negative or non-finite factor entry".into()));
    }
    let f = Factorization {
        h: Array2::from_shape_vec((rows, k), h).expect("length read"),
        w: Array2::from_shape_vec((k, cols), w).expect("length read"),
        loss_trace,
        iterations_run,
    };
    Ok((f, layout))
}

pub fn save_factorization(f: &Factorization, layout: &BatchLayout, path: &Path) -> Result<(), FormatError> {
    fs::write(path, encode_factorization(f, layout)).map_err(io_err(path))
}

pub fn load_factorization(path: &Path) -> Result<(Factorization, BatchLayout), FormatError> {
    decode_factorization(&fs::read(path).map_err(io_err(path))?)
}

/// Writes a mask as an 8-bit grayscale PNG with values 0 and 255.
pub fn write_mask_png(mask: &Mask, path: &Path) -> Result<(), FormatError> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| FormatError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Reads a mask PNG; pixels with luma above 127 are foreground.
pub fn read_mask_png(path: &Path) -> Result<Mask, FormatError> {
    let img = image::open(path)
        .map_err(|e| FormatError::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
        .to_luma8();
    Ok(Array2::from_shape_fn(
        (img.height() as usize, img.width() as usize),
        |(y, x)| img.get_pixel(x as u32, y as u32).0[0] > 127,
    ))
}

/// `{"background": [labels...], "parts": {label: {image_id: png_path}}}`.
/// An image missing from a part's map has no pixels of that part.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct PartIndex {
    #[serde(default)]
    pub background: Vec<String>,
    pub parts: BTreeMap<String, BTreeMap<String, PathBuf>>,
}

impl PartIndex {
    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut index: PartIndex = serde_json::from_str(&text).map_err(|e| json_err(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for files in index.parts.values_mut() {
            for p in files.values_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(index)
    }

    pub fn is_background(&self, label: &str) -> bool {
        self.background.iter().any(|b| b == label)
    }

    /// Reads every part's masks for `images`, given as `(id, height, width)`
    /// in set order.
    pub fn annotations(&self, images: &[(String, usize, usize)]) -> Result<Vec<PartAnnotation>, FormatError> {
        self.parts
            .iter()
            .map(|(label, files)| {
                let masks = images
                    .iter()
                    .map(|(id, h, w)| match files.get(id) {
                        Some(p) => {
                            let m = read_mask_png(p)?;
                            if m.dim() != (*h, *w) {
                                return Err(FormatError::SizeMismatch(format!(
                                    "part {label} of {id} is {:?}, image is {:?}",
                                    m.dim(),
                                    (h, w)
                                )));
                            }
                            Ok(m)
                        }
                        None => Ok(Array2::from_elem((*h, *w), false)),
                    })
                    .collect::<Result<_, _>>()?;
                Ok(PartAnnotation {
                    part_label: label.clone(),
                    masks,
                })
            })
            .collect()
    }
}

/// `{image_id: [[x_min, y_min, x_max, y_max], ...]}`.
pub fn load_boxes(path: &Path) -> Result<BTreeMap<String, Vec<BBox>>, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| json_err(path, e))
}

/// One predicted box per image, `{image_id: [x_min, y_min, x_max, y_max]}`.
pub fn load_predicted_boxes(path: &Path) -> Result<BTreeMap<String, BBox>, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| json_err(path, e))
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<(), FormatError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| json_err(path, e))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Manual factor-to-part assignment, `{"0": ["head"], "2": ["body", "leg"]}`.
pub fn load_factor_part_map(path: &Path) -> Result<BTreeMap<usize, Vec<String>>, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(&text).map_err(|e| json_err(path, e))?;
    raw.into_iter()
        .map(|(k, v)| {
            k.parse::<usize>()
                .map(|f| (f, v))
                .map_err(|_| json_err(path, format!("factor key {k:?} is not an index")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> (Factorization, BatchLayout) {
        let layout = BatchLayout::from_shapes([("a", 1, 2), ("bé", 2, 1)]);
        let f = Factorization {
            h: Array2::from_shape_fn((4, 2), |(r, c)| (r * 2 + c) as f32 * 0.5),
            w: array![[1.0f32, 0.0, 2.5], [0.125, 3.0, 0.0]],
            loss_trace: vec![10.0, 4.5, 4.25],
            iterations_run: 2,
        };
        (f, layout)
    }

    #[test]
    fn factorization_round_trip() {
        let (f, layout) = sample();
        let bytes = encode_factorization(&f, &layout);
        assert_eq!(&bytes[..4], b"DFFN");
        assert_eq!(decode_factorization(&bytes).unwrap(), (f, layout));
    }

    #[test]
    fn factorization_guards() {
        let (f, layout) = sample();
        let mut bytes = encode_factorization(&f, &layout);
        assert!(matches!(decode_factorization(&bytes[..bytes.len() - 1]), Err(FormatError::Truncated(_))));
        bytes.push(0);
        assert!(matches!(decode_factorization(&bytes), Err(FormatError::Corrupt(_))));
        bytes[0] = b'Z';
        assert!(matches!(decode_factorization(&bytes), Err(FormatError::BadMagic)));
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = array![[true, false, true], [false, false, true]];
        write_mask_png(&mask, &path).unwrap();
        assert_eq!(read_mask_png(&path).unwrap(), mask);
        let raw = image::open(&path).unwrap().to_luma8();
        assert_eq!(raw.as_raw(), &vec![255, 0, 255, 0, 0, 255]);
    }

    #[test]
    fn part_index_fills_missing_images() {
        let dir = tempfile::tempdir().unwrap();
        write_mask_png(&array![[true, false]], &dir.path().join("a_head.png")).unwrap();
        fs::write(
            dir.path().join("parts.json"),
            r#"{"background": ["sky"], "parts": {"head": {"a": "a_head.png"}}}"#,
        )
        .unwrap();
        let index = PartIndex::load(&dir.path().join("parts.json")).unwrap();
        assert!(index.is_background("sky"));
        let parts = index
            .annotations(&[("a".into(), 1, 2), ("b".into(), 2, 2)])
            .unwrap();
        assert_eq!(parts[0].masks[0], array![[true, false]]);
        assert_eq!(parts[0].masks[1], Array2::from_elem((2, 2), false));
        assert!(matches!(
            index.annotations(&[("a".into(), 2, 2)]),
            Err(FormatError::SizeMismatch(_))
        ));
    }

    #[test]
    fn factor_part_map_keys_are_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.json");
        fs::write(&path, r#"{"0": ["head"], "2": ["body", "leg"]}"#).unwrap();
        let map = load_factor_part_map(&path).unwrap();
        assert_eq!(map[&2], vec!["body".to_string(), "leg".to_string()]);
        fs::write(&path, r#"{"x": ["head"]}"#).unwrap();
        assert!(load_factor_part_map(&path).is_err());
    }
}
