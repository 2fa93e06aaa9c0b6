use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{InitMethod, NmfConfig, NmfError};
use crate::tensor::FeatureMatrix;

/// Initial `(H, W)` for `a` under `cfg`, as f32.
pub fn init_factors(
    a: &FeatureMatrix,
    cfg: &NmfConfig,
) -> Result<(Array2<f32>, Array2<f32>), NmfError> {
    let a64 = a.as_array().mapv(f64::from);
    let (h, w) = init_factors_f64(a, &a64, cfg)?;
    Ok((h.mapv(|v| v as f32), w.mapv(|v| v as f32)))
}

pub(super) fn init_factors_f64(
    a: &FeatureMatrix,
    a64: &Array2<f64>,
    cfg: &NmfConfig,
) -> Result<(Array2<f64>, Array2<f64>), NmfError> {
    cfg.validate()?;
    match cfg.init {
        InitMethod::SeededUniform => Ok(seeded_uniform(a, cfg.k, cfg.seed)),
        InitMethod::Nndsvd => nndsvd_f64(a64, cfg.k),
    }
}

/// Scale so that `H·W` starts with roughly the magnitude of `A`.
pub(crate) fn uniform_scale(a: &FeatureMatrix, k: usize) -> f64 {
    (a.mean() / k as f64).sqrt()
}

fn seeded_uniform(a: &FeatureMatrix, k: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let scale = uniform_scale(a, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 1 - [0, 1) keeps every entry strictly positive, so nothing zero-locks.
    let mut draw = || scale * (1.0 - rng.gen::<f64>());
    let h = Array2::from_shape_simple_fn((a.rows(), k), &mut draw);
    let w = Array2::from_shape_simple_fn((k, a.cols()), &mut draw);
    (h, w)
}

/// NNDSVD initialization (Boutsidis & Gallopoulos). Exact zeros are lifted
/// to `mean(A) / 100` so multiplicative updates can still move them.
pub fn nndsvd(a: &FeatureMatrix, k: usize) -> Result<(Array2<f32>, Array2<f32>), NmfError> {
    let (h, w) = nndsvd_f64(&a.as_array().mapv(f64::from), k)?;
    Ok((h.mapv(|v| v as f32), w.mapv(|v| v as f32)))
}

fn nndsvd_f64(a: &Array2<f64>, k: usize) -> Result<(Array2<f64>, Array2<f64>), NmfError> {
    let (rows, cols) = a.dim();
    if k > rows.min(cols) {
        return Err(NmfError::RankTooLarge {
            k,
            max: rows.min(cols),
        });
    }
    let m = DMatrix::from_row_iterator(rows, cols, a.iter().copied());
    let svd = m.svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let sigma = &svd.singular_values;

    let mut h = Array2::<f64>::zeros((rows, k));
    let mut w = Array2::<f64>::zeros((k, cols));
    for j in 0..k {
        let x: Vec<f64> = u.column(j).iter().copied().collect();
        let y: Vec<f64> = v_t.row(j).iter().copied().collect();
        let (hx, wy) = if j == 0 {
            // The leading singular pair of a non-negative matrix can be
            // chosen non-negative; the SVD may return it with either sign.
            let s = sigma[0].sqrt();
            (
                x.iter().map(|v| s * v.abs()).collect::<Vec<_>>(),
                y.iter().map(|v| s * v.abs()).collect::<Vec<_>>(),
            )
        } else {
            dominant_signed_part(&x, &y, sigma[j])
        };
        h.column_mut(j).assign(&ndarray::Array1::from(hx));
        w.row_mut(j).assign(&ndarray::Array1::from(wy));
    }

    let fill = a.mean().unwrap_or(0.0) / 100.0;
    if fill > 0.0 {
        h.mapv_inplace(|v| if v == 0.0 { fill } else { v });
        w.mapv_inplace(|v| if v == 0.0 { fill } else { v });
    }
    if h.iter().chain(w.iter()).any(|v| !v.is_finite()) {
        return Err(NmfError::NumericFailure("NNDSVD produced non-finite factors".into()));
    }
    Ok((h, w))
}

fn dominant_signed_part(x: &[f64], y: &[f64], sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let pos = |v: &[f64]| v.iter().map(|&e| e.max(0.0)).collect::<Vec<_>>();
    let neg = |v: &[f64]| v.iter().map(|&e| (-e).max(0.0)).collect::<Vec<_>>();
    let norm = |v: &[f64]| v.iter().map(|e| e * e).sum::<f64>().sqrt();

    let (xp, xn, yp, yn) = (pos(x), neg(x), pos(y), neg(y));
    let (nxp, nxn, nyp, nyn) = (norm(&xp), norm(&xn), norm(&yp), norm(&yn));
    let (mp, mn) = (nxp * nyp, nxn * nyn);
    let (xs, ys, nx, ny, mag) = if mp >= mn {
        (xp, yp, nxp, nyp, mp)
    } else {
        (xn, yn, nxn, nyn, mn)
    };
    if mag == 0.0 {
        return (vec![0.0; x.len()], vec![0.0; y.len()]);
    }
    let s = (sigma * mag).sqrt();
    (
        xs.iter().map(|v| s * v / nx).collect(),
        ys.iter().map(|v| s * v / ny).collect(),
    )
}
