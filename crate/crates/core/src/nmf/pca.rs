use nalgebra::DMatrix;
use ndarray::Array2;

use super::NmfError;
use crate::tensor::FeatureMatrix;

/// Best rank-k approximation `A·V·Vᵀ` (uncentered), kept as a baseline
/// that NMF can never beat in Frobenius error.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// `cols x k`, orthonormal columns: the top-k right singular vectors.
    pub projection: Array2<f64>,
    /// Singular values in descending order (all of them, not just k).
    pub singular_values: Vec<f64>,
    /// `‖A − A·V·Vᵀ‖²`.
    pub approximation_error: f64,
}

pub fn pca_baseline(a: &FeatureMatrix, k: usize) -> Result<PcaResult, NmfError> {
    let (rows, cols) = (a.rows(), a.cols());
    let max = rows.min(cols);
    if k > max {
        return Err(NmfError::RankTooLarge { k, max });
    }
    if k == 0 {
        return Err(NmfError::InvalidConfig("k must be at least 1".into()));
    }
    let m = DMatrix::from_row_iterator(rows, cols, a.as_array().iter().map(|&v| v as f64));
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("v_t requested");

    let mut projection = Array2::<f64>::zeros((cols, k));
    for j in 0..k {
        for (i, &v) in v_t.row(j).iter().enumerate() {
            projection[[i, j]] = v;
        }
    }

    let a64 = a.as_array().mapv(f64::from);
    let approx = a64.dot(&projection).dot(&projection.t());
    let approximation_error = (&a64 - &approx).iter().map(|d| d * d).sum();

    Ok(PcaResult {
        projection,
        singular_values: svd.singular_values.iter().copied().collect(),
        approximation_error,
    })
}
