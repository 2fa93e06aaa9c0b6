//! Activation tensors, their flattening into feature matrices, and batch
//! concatenation with a layout that can undo the flattening.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("NonNegativityViolated: element {index} is {value}")]
    NonNegativityViolated { index: usize, value: f32 },
    #[error("NonFinite: element {index} is {value}")]
    NonFinite { index: usize, value: f32 },
    #[error("DimMismatch: {height}x{width}x{channels} needs {expected} values, got {actual}")]
    DimMismatch {
        height: usize,
        width: usize,
        channels: usize,
        expected: usize,
        actual: usize,
    },
    #[error("ChannelMismatch: image {image_id} has {actual} channels, expected {expected}")]
    ChannelMismatch {
        image_id: String,
        expected: usize,
        actual: usize,
    },
    #[error("EmptyBatch: no feature matrices to concatenate")]
    EmptyBatch,
    #[error("LayoutMismatch: layout covers {layout_rows} rows, matrix has {matrix_rows}")]
    LayoutMismatch {
        layout_rows: usize,
        matrix_rows: usize,
    },
}

/// Checks that every value is finite and non-negative.
pub(crate) fn validate_values(data: &[f32]) -> Result<(), TensorError> {
    for (index, &value) in data.iter().enumerate() {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { index, value });
        }
        if value < 0.0 {
            return Err(TensorError::NonNegativityViolated { index, value });
        }
    }
    Ok(())
}

/// One image's activations at one layer, stored row-major as (y, x, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    image_id: String,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ActivationTensor {
    pub fn new(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(TensorError::DimMismatch {
                height,
                width,
                channels,
                expected,
                actual: data.len(),
            });
        }
        validate_values(&data)?;
        Ok(Self {
            image_id: image_id.into(),
            height,
            width,
            channels,
            data,
        })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Value at spatial position (y, x), channel `c`.
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// A dense, non-negative `rows x cols` matrix whose rows are spatial
/// positions and whose columns are channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f32>,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f32>) -> Result<Self, TensorError> {
        let data = data.as_standard_layout().into_owned();
        validate_values(data.as_slice().expect("standard layout"))?;
        Ok(Self { data })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::DimMismatch {
                height: rows,
                width: 1,
                channels: cols,
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Self::new(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn as_array(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f32> {
        self.data
    }

    /// Mean over all entries, accumulated in f64.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Where one image's rows live inside a concatenated feature matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub row_offset: usize,
}

impl LayoutEntry {
    pub fn rows(&self) -> usize {
        self.height * self.width
    }
}

/// Row spans of each image inside a concatenated [`FeatureMatrix`], in
/// concatenation order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLayout {
    entries: Vec<LayoutEntry>,
}

impl BatchLayout {
    /// Builds a layout from `(image_id, height, width)` triples, assigning
    /// offsets cumulatively.
    pub fn from_shapes<I, S>(shapes: I) -> Self
    where
        I: IntoIterator<Item = (S, usize, usize)>,
        S: Into<String>,
    {
        let mut offset = 0;
        let entries = shapes
            .into_iter()
            .map(|(id, height, width)| {
                let entry = LayoutEntry {
                    image_id: id.into(),
                    height,
                    width,
                    row_offset: offset,
                };
                offset += height * width;
                entry
            })
            .collect();
        Self { entries }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.entries.iter().map(LayoutEntry::rows).sum()
    }

    /// Checks the cumulative-offset invariant; used after deserializing.
    pub fn is_consistent(&self) -> bool {
        let mut offset = 0;
        for e in &self.entries {
            if e.row_offset != offset {
                return false;
            }
            offset += e.rows();
        }
        true
    }
}

/// Reinterprets `h x w x c` activations as an `(h*w) x c` matrix; row
/// `y*w + x` is the channel vector at (y, x).
pub fn flatten_activations(t: &ActivationTensor) -> FeatureMatrix {
    let data = Array2::from_shape_vec((t.height * t.width, t.channels), t.data.clone())
        .expect("tensor invariants guarantee the shape");
    FeatureMatrix { data }
}

/// Inverse of [`flatten_activations`].
pub fn unflatten(
    m: &FeatureMatrix,
    image_id: impl Into<String>,
    height: usize,
    width: usize,
) -> Result<ActivationTensor, TensorError> {
    if m.rows() != height * width {
        return Err(TensorError::LayoutMismatch {
            layout_rows: height * width,
            matrix_rows: m.rows(),
        });
    }
    let data = m.data.iter().copied().collect();
    ActivationTensor::new(image_id, height, width, m.cols(), data)
}

/// A flattened image ready for concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub features: FeatureMatrix,
}

impl ImageFeatures {
    pub fn from_tensor(t: &ActivationTensor) -> Self {
        Self {
            image_id: t.image_id.clone(),
            height: t.height,
            width: t.width,
            features: flatten_activations(t),
        }
    }
}

/// Stacks per-image feature matrices vertically. Images may differ in
/// spatial size but must agree on channel count.
pub fn concat_batch(items: &[ImageFeatures]) -> Result<(FeatureMatrix, BatchLayout), TensorError> {
    let first = items.first().ok_or(TensorError::EmptyBatch)?;
    let cols = first.features.cols();
    for item in items {
        if item.features.cols() != cols {
            return Err(TensorError::ChannelMismatch {
                image_id: item.image_id.clone(),
                expected: cols,
                actual: item.features.cols(),
            });
        }
        if item.features.rows() != item.height * item.width {
            return Err(TensorError::LayoutMismatch {
                layout_rows: item.height * item.width,
                matrix_rows: item.features.rows(),
            });
        }
    }
    let layout = BatchLayout::from_shapes(
        items
            .iter()
            .map(|i| (i.image_id.clone(), i.height, i.width)),
    );
    let mut data = Array2::<f32>::zeros((layout.total_rows(), cols));
    for (item, entry) in items.iter().zip(layout.entries()) {
        data.slice_mut(s![entry.row_offset..entry.row_offset + entry.rows(), ..])
            .assign(item.features.as_array());
    }
    Ok((FeatureMatrix { data }, layout))
}

/// Splits a concatenated matrix back into per-image tensors.
pub fn split_batch(
    m: &FeatureMatrix,
    layout: &BatchLayout,
) -> Result<Vec<ActivationTensor>, TensorError> {
    if layout.total_rows() != m.rows() {
        return Err(TensorError::LayoutMismatch {
            layout_rows: layout.total_rows(),
            matrix_rows: m.rows(),
        });
    }
    layout
        .entries()
        .iter()
        .map(|e| {
            let rows = m.data.slice(s![e.row_offset..e.row_offset + e.rows(), ..]);
            ActivationTensor::new(
                e.image_id.clone(),
                e.height,
                e.width,
                m.cols(),
                rows.iter().copied().collect(),
            )
        })
        .collect()
}
