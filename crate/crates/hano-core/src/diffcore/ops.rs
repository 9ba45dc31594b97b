//! Differentiable primitives: affine maps, softmax, GELU, layer norm.
//!
//! Forward functions return fresh buffers; backward functions *accumulate*
//! into the gradient buffers they are handed, so fan-in in a composed graph
//! just works. Batched inputs are flat row-major `rows × width` slices.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Epsilon inside the layer-norm variance square root.
pub const LN_EPS: f64 = 1e-5;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn check_rows(len: usize, rows: usize, width: usize, what: &str) -> Result<()> {
    if rows == 0 || width == 0 || len != rows * width {
        return Err(Error::shape(format!(
            "{what}: buffer of {len} values is not {rows} rows x {width}"
        )));
    }
    Ok(())
}

/// `y = x Wᵀ + b` applied row-wise: `x` is `rows × in`, `w` is `[out, in]`,
/// optional bias `b` is `[out]`; returns `rows × out`.
pub fn affine(x: &[f64], rows: usize, w: &Tensor, b: Option<&Tensor>) -> Result<Vec<f64>> {
    let (out_dim, in_dim) = match w.shape() {
        [o, i] => (*o, *i),
        other => {
            return Err(Error::shape(format!(
                "affine weight must be rank-2, got {other:?}"
            )))
        }
    };
    check_rows(x.len(), rows, in_dim, "affine input")?;
    if let Some(b) = b {
        if b.shape() != [out_dim] {
            return Err(Error::shape(format!(
                "affine bias shape {:?} does not match {out_dim} outputs",
                b.shape()
            )));
        }
    }
    let wd = w.data();
    let mut y = vec![0.0; rows * out_dim];
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let yr = &mut y[r * out_dim..(r + 1) * out_dim];
        for o in 0..out_dim {
            let wrow = &wd[o * in_dim..(o + 1) * in_dim];
            let mut acc = match b {
                Some(b) => b.data()[o],
                None => 0.0,
            };
            for i in 0..in_dim {
                acc += wrow[i] * xr[i];
            }
            yr[o] = acc;
        }
    }
    Ok(y)
}

/// Backward of [`affine`]. Accumulates `dw[o,i] += Σ_r dy[r,o]·x[r,i]`,
/// `db[o] += Σ_r dy[r,o]` and `dx[r,i] += Σ_o dy[r,o]·w[o,i]`.
#[allow(clippy::too_many_arguments)]
pub fn affine_backward(
    x: &[f64],
    rows: usize,
    w: &Tensor,
    dy: &[f64],
    dw: &mut Tensor,
    mut db: Option<&mut Tensor>,
    dx: &mut [f64],
) -> Result<()> {
    let (out_dim, in_dim) = match w.shape() {
        [o, i] => (*o, *i),
        other => {
            return Err(Error::shape(format!(
                "affine weight must be rank-2, got {other:?}"
            )))
        }
    };
    check_rows(x.len(), rows, in_dim, "affine input")?;
    check_rows(dy.len(), rows, out_dim, "affine output gradient")?;
    if dw.shape() != w.shape() {
        return Err(Error::shape("affine dw shape differs from w".to_string()));
    }
    if dx.len() != x.len() {
        return Err(Error::shape("affine dx length differs from x".to_string()));
    }
    if let Some(db) = db.as_deref() {
        if db.shape() != [out_dim] {
            return Err(Error::shape("affine db shape mismatch".to_string()));
        }
    }
    let wd = w.data();
    let dwd = dw.data_mut();
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let dyr = &dy[r * out_dim..(r + 1) * out_dim];
        let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let g = dyr[o];
            if let Some(db) = db.as_deref_mut() {
                db.data_mut()[o] += g;
            }
            let wrow = &wd[o * in_dim..(o + 1) * in_dim];
            let dwrow = &mut dwd[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dwrow[i] += g * xr[i];
                dxr[i] += g * wrow[i];
            }
        }
    }
    Ok(())
}

/// Exact (erf-form) GELU: `x · Φ(x)` with the standard normal CDF `Φ`.
pub fn gelu(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| 0.5 * v * (1.0 + libm::erf(v * FRAC_1_SQRT_2)))
        .collect()
}

/// Backward of [`gelu`]: `dx += dy · (Φ(x) + x·φ(x))`.
pub fn gelu_backward(x: &[f64], dy: &[f64], dx: &mut [f64]) -> Result<()> {
    if x.len() != dy.len() || x.len() != dx.len() {
        return Err(Error::shape(format!(
            "gelu backward length mismatch: x {}, dy {}, dx {}",
            x.len(),
            dy.len(),
            dx.len()
        )));
    }
    for ((&v, &g), d) in x.iter().zip(dy).zip(dx.iter_mut()) {
        let cdf = 0.5 * (1.0 + libm::erf(v * FRAC_1_SQRT_2));
        let pdf = FRAC_1_SQRT_2PI * (-0.5 * v * v).exp();
        *d += g * (cdf + v * pdf);
    }
    Ok(())
}

/// Numerically stable softmax of one score slice into `out`.
pub fn softmax_slice(scores: &[f64], out: &mut [f64]) {
    debug_assert_eq!(scores.len(), out.len());
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        let e = (s - max).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Backward of [`softmax_slice`]: `ds_i += y_i (dy_i − Σ_j y_j dy_j)`.
pub fn softmax_slice_backward(y: &[f64], dy: &[f64], ds: &mut [f64]) {
    debug_assert_eq!(y.len(), dy.len());
    debug_assert_eq!(y.len(), ds.len());
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for ((&yi, &gi), d) in y.iter().zip(dy).zip(ds.iter_mut()) {
        *d += yi * (gi - dot);
    }
}

/// Row-wise softmax of a `rows × k` matrix.
pub fn softmax_rows(z: &[f64], rows: usize) -> Result<Vec<f64>> {
    if rows == 0 || !z.len().is_multiple_of(rows) {
        return Err(Error::shape(format!(
            "softmax_rows: {} values do not split into {rows} rows",
            z.len()
        )));
    }
    let k = z.len() / rows;
    let mut y = vec![0.0; z.len()];
    for r in 0..rows {
        softmax_slice(&z[r * k..(r + 1) * k], &mut y[r * k..(r + 1) * k]);
    }
    Ok(y)
}

/// Backward of [`softmax_rows`]; returns `dz` (same layout as `y`).
pub fn softmax_rows_backward(y: &[f64], dy: &[f64], rows: usize) -> Result<Vec<f64>> {
    if y.len() != dy.len() || rows == 0 || !y.len().is_multiple_of(rows) {
        return Err(Error::shape(
            "softmax_rows_backward: layout mismatch".to_string(),
        ));
    }
    let k = y.len() / rows;
    let mut dz = vec![0.0; y.len()];
    for r in 0..rows {
        softmax_slice_backward(
            &y[r * k..(r + 1) * k],
            &dy[r * k..(r + 1) * k],
            &mut dz[r * k..(r + 1) * k],
        );
    }
    Ok(dz)
}

/// Values the layer-norm backward pass needs.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    /// Normalized pre-scale activations, same layout as the input.
    pub xhat: Vec<f64>,
    /// Per-row `1/√(var + ε)`.
    pub inv_std: Vec<f64>,
}

/// Row-wise layer norm over the channel axis:
/// `y = γ·(x − μ)/√(σ² + ε) + β` with per-row mean/variance.
pub fn layer_norm(
    x: &[f64],
    rows: usize,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Vec<f64>, LayerNormCache)> {
    let c = match gamma.shape() {
        [c] => *c,
        other => {
            return Err(Error::shape(format!(
                "layer_norm gamma must be rank-1, got {other:?}"
            )))
        }
    };
    if beta.shape() != [c] {
        return Err(Error::shape("layer_norm beta shape mismatch".to_string()));
    }
    check_rows(x.len(), rows, c, "layer_norm input")?;
    let gd = gamma.data();
    let bd = beta.data();
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    let cf = c as f64;
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let mean = xr.iter().sum::<f64>() / cf;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = istd;
        let xh = &mut xhat[r * c..(r + 1) * c];
        let yr = &mut y[r * c..(r + 1) * c];
        for i in 0..c {
            let h = (xr[i] - mean) * istd;
            xh[i] = h;
            yr[i] = gd[i] * h + bd[i];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Backward of [`layer_norm`]; accumulates `dgamma`, `dbeta`, `dx`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    rows: usize,
    gamma: &Tensor,
    dy: &[f64],
    dgamma: &mut Tensor,
    dbeta: &mut Tensor,
    dx: &mut [f64],
) -> Result<()> {
    let c = gamma.shape()[0];
    check_rows(dy.len(), rows, c, "layer_norm output gradient")?;
    if cache.xhat.len() != dy.len() || cache.inv_std.len() != rows || dx.len() != dy.len() {
        return Err(Error::shape(
            "layer_norm backward cache/buffer mismatch".to_string(),
        ));
    }
    if dgamma.shape() != gamma.shape() || dbeta.shape() != gamma.shape() {
        return Err(Error::shape(
            "layer_norm dgamma/dbeta shape mismatch".to_string(),
        ));
    }
    let gd = gamma.data();
    let cf = c as f64;
    for r in 0..rows {
        let xh = &cache.xhat[r * c..(r + 1) * c];
        let dyr = &dy[r * c..(r + 1) * c];
        let istd = cache.inv_std[r];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for i in 0..c {
            let dxh = dyr[i] * gd[i];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[i];
        }
        let mean_dxhat = sum_dxhat / cf;
        let mean_dxhat_xhat = sum_dxhat_xhat / cf;
        let dgd = dgamma.data_mut();
        let dbd = dbeta.data_mut();
        let dxr = &mut dx[r * c..(r + 1) * c];
        for i in 0..c {
            dgd[i] += dyr[i] * xh[i];
            dbd[i] += dyr[i];
            let dxh = dyr[i] * gd[i];
            dxr[i] += istd * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_matches_hand_computation() {
        // w = [[1,2],[3,4],[5,6]], b = [10,20,30], x = [1,1] → y = [13,27,41].
        let w = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![10.0, 20.0, 30.0]).unwrap();
        let y = affine(&[1.0, 1.0], 1, &w, Some(&b)).unwrap();
        assert_eq!(y, vec![13.0, 27.0, 41.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_order_preserved() {
        let y = softmax_rows(&[1.0, 2.0, 3.0, -1.0, -1.0, -1.0], 2).unwrap();
        for r in 0..2 {
            let s: f64 = y[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
        assert!(y[0] < y[1] && y[1] < y[2]);
        assert!((y[3] - y[4]).abs() < 1e-15 && (y[4] - y[5]).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax_rows(&[1.0, 2.0, 3.0], 1).unwrap();
        let b = softmax_rows(&[101.0, 102.0, 103.0], 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn gelu_frozen_values() {
        // gelu(x) = x·Φ(x): Φ(1) = 0.8413447460685429, by symmetry
        // gelu(−1) = −(1 − Φ(1)).
        let y = gelu(&[0.0, 1.0, -1.0]);
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 0.8413447460685429).abs() < 1e-15);
        assert!((y[2] + (1.0 - 0.8413447460685429)).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let gamma = Tensor::from_vec(&[4], vec![1.0; 4]).unwrap();
        let beta = Tensor::zeros(&[4]).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0];
        let (y, _) = layer_norm(&x, 2, &gamma, &beta).unwrap();
        for r in 0..2 {
            let row = &y[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4); // eps shifts variance slightly below 1
        }
    }

    // Finite-difference oracles for every backward function. Each routine is
    // reduced to a scalar through a fixed projection vector so the analytic
    // gradient can be compared against central differences entry by entry.

    fn fd_scalar(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], idx: usize, h: f64) -> f64 {
        let mut plus = x.to_vec();
        plus[idx] += h;
        let mut minus = x.to_vec();
        minus[idx] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    fn proj(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect()
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let rows = 3;
        let (out_d, in_d) = (2, 4);
        let w = Tensor::from_vec(
            &[out_d, in_d],
            (0..out_d * in_d).map(|i| (i as f64) * 0.13 - 0.4).collect(),
        )
        .unwrap();
        let b = Tensor::from_vec(&[out_d], vec![0.3, -0.2]).unwrap();
        let x: Vec<f64> = (0..rows * in_d).map(|i| (i as f64) * 0.07 - 0.3).collect();
        let p = proj(rows * out_d);

        let mut dw = w.zeros_like();
        let mut db = b.zeros_like();
        let mut dx = vec![0.0; x.len()];
        affine_backward(&x, rows, &w, &p, &mut dw, Some(&mut db), &mut dx).unwrap();

        let mut loss_of_x = |xv: &[f64]| -> f64 {
            let y = affine(xv, rows, &w, Some(&b)).unwrap();
            y.iter().zip(&p).map(|(a, b)| a * b).sum()
        };
        for (idx, &g) in dx.iter().enumerate() {
            let fd = fd_scalar(&mut loss_of_x, &x, idx, 1e-6);
            assert!((g - fd).abs() < 1e-8, "dx[{idx}]: {g} vs {fd}");
        }
        for idx in 0..w.numel() {
            let mut loss_of_w = |wv: &[f64]| -> f64 {
                let wt = Tensor::from_vec(&[out_d, in_d], wv.to_vec()).unwrap();
                let y = affine(&x, rows, &wt, Some(&b)).unwrap();
                y.iter().zip(&p).map(|(a, b)| a * b).sum()
            };
            let fd = fd_scalar(&mut loss_of_w, w.data(), idx, 1e-6);
            assert!((dw.data()[idx] - fd).abs() < 1e-8);
        }
        for idx in 0..b.numel() {
            let mut loss_of_b = |bv: &[f64]| -> f64 {
                let bt = Tensor::from_vec(&[out_d], bv.to_vec()).unwrap();
                let y = affine(&x, rows, &w, Some(&bt)).unwrap();
                y.iter().zip(&p).map(|(a, b)| a * b).sum()
            };
            let fd = fd_scalar(&mut loss_of_b, b.data(), idx, 1e-6);
            assert!((db.data()[idx] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn gelu_backward_matches_finite_differences() {
        let x: Vec<f64> = vec![-2.0, -0.5, 0.0, 0.3, 1.7];
        let p = proj(x.len());
        let mut dx = vec![0.0; x.len()];
        gelu_backward(&x, &p, &mut dx).unwrap();
        let mut loss = |xv: &[f64]| -> f64 { gelu(xv).iter().zip(&p).map(|(a, b)| a * b).sum() };
        for (idx, &g) in dx.iter().enumerate() {
            let fd = fd_scalar(&mut loss, &x, idx, 1e-6);
            assert!((g - fd).abs() < 1e-9, "dx[{idx}]: {g} vs {fd}");
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let z = vec![0.2, -1.0, 0.7, 1.5, 0.0, -0.3];
        let rows = 2;
        let p = proj(z.len());
        let y = softmax_rows(&z, rows).unwrap();
        let dz = softmax_rows_backward(&y, &p, rows).unwrap();
        let mut loss = |zv: &[f64]| -> f64 {
            softmax_rows(zv, rows)
                .unwrap()
                .iter()
                .zip(&p)
                .map(|(a, b)| a * b)
                .sum()
        };
        for (idx, &g) in dz.iter().enumerate() {
            let fd = fd_scalar(&mut loss, &z, idx, 1e-6);
            assert!((g - fd).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let rows = 2;
        let c = 5;
        let gamma = Tensor::from_vec(&[c], vec![1.1, 0.9, -0.7, 1.3, 0.5]).unwrap();
        let beta = Tensor::from_vec(&[c], vec![0.2, -0.1, 0.0, 0.4, -0.6]).unwrap();
        let x: Vec<f64> = (0..rows * c).map(|i| (i as f64) * 0.21 - 1.0).collect();
        let p = proj(rows * c);

        let (_, cache) = layer_norm(&x, rows, &gamma, &beta).unwrap();
        let mut dgamma = gamma.zeros_like();
        let mut dbeta = beta.zeros_like();
        let mut dx = vec![0.0; x.len()];
        layer_norm_backward(&cache, rows, &gamma, &p, &mut dgamma, &mut dbeta, &mut dx).unwrap();

        let mut loss_of_x = |xv: &[f64]| -> f64 {
            let (y, _) = layer_norm(xv, rows, &gamma, &beta).unwrap();
            y.iter().zip(&p).map(|(a, b)| a * b).sum()
        };
        for (idx, &g) in dx.iter().enumerate() {
            let fd = fd_scalar(&mut loss_of_x, &x, idx, 1e-6);
            assert!((g - fd).abs() < 1e-8, "dx[{idx}]: {g} vs {fd}");
        }
        for idx in 0..c {
            let mut loss_of_g = |gv: &[f64]| -> f64 {
                let gt = Tensor::from_vec(&[c], gv.to_vec()).unwrap();
                let (y, _) = layer_norm(&x, rows, &gt, &beta).unwrap();
                y.iter().zip(&p).map(|(a, b)| a * b).sum()
            };
            let fd = fd_scalar(&mut loss_of_g, gamma.data(), idx, 1e-6);
            assert!((dgamma.data()[idx] - fd).abs() < 1e-8);
            let mut loss_of_b = |bv: &[f64]| -> f64 {
                let bt = Tensor::from_vec(&[c], bv.to_vec()).unwrap();
                let (y, _) = layer_norm(&x, rows, &gamma, &bt).unwrap();
                y.iter().zip(&p).map(|(a, b)| a * b).sum()
            };
            let fd_b = fd_scalar(&mut loss_of_b, beta.data(), idx, 1e-6);
            assert!((dbeta.data()[idx] - fd_b).abs() < 1e-8);
        }
    }
}
