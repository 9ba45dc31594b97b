//! Bilinear resampling between boundary-inclusive grids on the same square.
//!
//! Both grids parameterize the domain by normalized coordinates
//! `i/(n−1) ∈ [0, 1]`, so resampling is domain-independent. Interpolation
//! positions are computed as exact integer products before the single
//! division, which makes coincident nodes (e.g. `n → 2n−1 → n`) exact.

use crate::error::{Error, Result};
use crate::grid::GridField;

/// Resample a field to resolution `new_n` by bilinear interpolation.
pub fn bilinear_resample(field: &GridField, new_n: usize) -> Result<GridField> {
    let old_n = field.n();
    if new_n < 2 {
        return Err(Error::invalid(format!(
            "target resolution must be at least 2, got {new_n}"
        )));
    }
    if new_n == old_n {
        return Ok(field.clone());
    }
    let mut out = GridField::zeros(new_n)?;
    let position = |idx: usize| -> (usize, f64) {
        // t = idx·(old_n−1)/(new_n−1), kept exact in the numerator.
        let t = (idx * (old_n - 1)) as f64 / (new_n - 1) as f64;
        let base = (t.floor() as usize).min(old_n - 2);
        (base, t - base as f64)
    };
    for i in 0..new_n {
        let (i0, fi) = position(i);
        for j in 0..new_n {
            let (j0, fj) = position(j);
            let v00 = field.get(i0, j0);
            let v01 = field.get(i0, j0 + 1);
            let v10 = field.get(i0 + 1, j0);
            let v11 = field.get(i0 + 1, j0 + 1);
            let value = (1.0 - fi) * ((1.0 - fj) * v00 + fj * v01)
                + fi * ((1.0 - fj) * v10 + fj * v11);
            out.set(i, j, value);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_survive_any_resolution() {
        let field = GridField::constant(9, 4.25).unwrap();
        for new_n in [2usize, 5, 9, 16, 33] {
            let out = bilinear_resample(&field, new_n).unwrap();
            assert!(out.values().iter().all(|&v| (v - 4.25).abs() < 1e-14));
        }
    }

    #[test]
    fn fields_linear_in_a_coordinate_are_exact() {
        let n = 9;
        let mut field = GridField::zeros(n).unwrap();
        for i in 0..n {
            for j in 0..n {
                field.set(i, j, 3.0 * i as f64 / (n - 1) as f64 - 1.0);
            }
        }
        let out = bilinear_resample(&field, 14).unwrap();
        for i in 0..14 {
            for j in 0..14 {
                let want = 3.0 * i as f64 / 13.0 - 1.0;
                assert!((out.get(i, j) - want).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn upsample_then_downsample_is_exact_at_coincident_nodes() {
        let n = 9;
        let mut field = GridField::zeros(n).unwrap();
        for (idx, v) in field.values_mut().iter_mut().enumerate() {
            *v = ((idx * 37 + 11) % 101) as f64 / 101.0 - 0.5;
        }
        let up = bilinear_resample(&field, 2 * n - 1).unwrap();
        let back = bilinear_resample(&up, n).unwrap();
        let max_diff = field
            .values()
            .iter()
            .zip(back.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-10, "round trip drifted by {max_diff}");
    }

    #[test]
    fn rejects_degenerate_targets() {
        let field = GridField::constant(4, 1.0).unwrap();
        assert!(bilinear_resample(&field, 1).is_err());
        assert!(bilinear_resample(&field, 0).is_err());
    }
}
