//! Gaussian random fields on the unit square by truncated
//! Karhunen–Loève expansion.
//!
//! The target measure is `N(0, (−Δ + cI)^{−2})` with zero Neumann boundary
//! conditions. Its eigenfunctions are the tensorized Neumann cosines
//! `φ_k(x) = η_{k₁}cos(k₁πx₁)·η_{k₂}cos(k₂πx₂)` (η₀ = 1, η_k = √2 so each
//! mode has unit L² norm) and its eigenvalues are
//! `λ_k = (π²(k₁²+k₂²) + c)^{−2}`, including the constant mode `k = (0,0)`
//! with `λ = c^{−2}`. A draw is
//!
//! ```text
//! X(x) = Σ_{k ∈ [0,M)²} z_k √λ_k φ_k(x),   z_k i.i.d. N(0,1).
//! ```
//!
//! The Gaussian coefficients are drawn *before* any grid is chosen, in a
//! fixed row-major mode order, so one seed defines one function of `x`:
//! evaluations at different resolutions agree at coincident nodes.

use crate::error::{Error, Result};
use crate::grid::GridField;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;

/// A drawn random field: the seeded KL coefficients of one realization,
/// evaluable at any resolution.
#[derive(Debug, Clone)]
pub struct GrfSampler {
    modes: usize,
    /// `z_k · √λ_k` in row-major `(k₁, k₂)` order.
    weighted: Vec<f64>,
}

impl GrfSampler {
    /// Draw the `M × M` Gaussian coefficients for one realization.
    pub fn draw(c: f64, modes: usize, seed: u64) -> Result<Self> {
        if modes == 0 {
            return Err(Error::invalid("KL truncation must keep at least one mode"));
        }
        if !c.is_finite() || c <= 0.0 {
            return Err(Error::invalid(format!(
                "covariance shift c must be positive and finite, got {c}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weighted = Vec::with_capacity(modes * modes);
        for k1 in 0..modes {
            for k2 in 0..modes {
                let z: f64 = StandardNormal.sample(&mut rng);
                let lambda = (PI * PI * ((k1 * k1 + k2 * k2) as f64) + c).powi(-2);
                weighted.push(z * lambda.sqrt());
            }
        }
        Ok(GrfSampler { modes, weighted })
    }

    /// Evaluate the realization on the boundary-inclusive `n × n` grid over
    /// the unit square (node `(i, j)` at `(i/(n−1), j/(n−1))`, row = x₁).
    pub fn evaluate(&self, n: usize) -> Result<GridField> {
        let m = self.modes;
        let basis = cosine_table(m, n);
        // X = B₁ᵀ · W · B₂ evaluated in two passes.
        let mut partial = vec![0.0; m * n]; // (k₁, j) after contracting k₂
        for k1 in 0..m {
            let wrow = &self.weighted[k1 * m..(k1 + 1) * m];
            let dst = &mut partial[k1 * n..(k1 + 1) * n];
            for (k2, &w) in wrow.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let brow = &basis[k2 * n..(k2 + 1) * n];
                for j in 0..n {
                    dst[j] += w * brow[j];
                }
            }
        }
        let mut values = vec![0.0; n * n];
        for k1 in 0..m {
            let brow = &basis[k1 * n..(k1 + 1) * n];
            let prow = &partial[k1 * n..(k1 + 1) * n];
            for i in 0..n {
                let b = brow[i];
                if b == 0.0 {
                    continue;
                }
                let dst = &mut values[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += b * prow[j];
                }
            }
        }
        GridField::from_values(n, values)
    }
}

/// `η_k cos(kπ·x_i)` table, modes by nodes.
fn cosine_table(modes: usize, n: usize) -> Vec<f64> {
    let mut table = vec![0.0; modes * n];
    for k in 0..modes {
        let eta = if k == 0 { 1.0 } else { std::f64::consts::SQRT_2 };
        for i in 0..n {
            let x = i as f64 / (n - 1) as f64;
            table[k * n + i] = eta * (k as f64 * PI * x).cos();
        }
    }
    table
}

/// Draw and evaluate one Gaussian random field.
pub fn sample_grf(n: usize, c: f64, modes: usize, seed: u64) -> Result<GridField> {
    GrfSampler::draw(c, modes, seed)?.evaluate(n)
}

/// Pointwise two-phase map: `a_max` where the field is positive, `a_min`
/// where it is zero or negative.
pub fn two_phase(field: &GridField, a_max: f64, a_min: f64) -> Result<GridField> {
    if !(a_min > 0.0 && a_max > 0.0) {
        return Err(Error::invalid(format!(
            "phase values must be positive, got a_max={a_max}, a_min={a_min}"
        )));
    }
    let values = field
        .values()
        .iter()
        .map(|&x| if x > 0.0 { a_max } else { a_min })
        .collect();
    GridField::from_values(field.n(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_mode_truncation_is_a_constant_field_with_variance_c_to_minus_two() {
        // M = 1 keeps only k = (0,0): X ≡ z·√λ₀ with λ₀ = c^{−2}, so the
        // field is constant and Var(X) = c^{−2}.
        let c = 9.0;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let draws = 10_000;
        for seed in 0..draws {
            let field = sample_grf(4, c, 1, seed).unwrap();
            let first = field.values()[0];
            for &v in field.values() {
                assert_eq!(v, first, "single-mode field must be constant");
            }
            sum += first;
            sum_sq += first * first;
        }
        let mean = sum / draws as f64;
        let var = sum_sq / draws as f64 - mean * mean;
        let want = c.powi(-2);
        assert!(
            (var - want).abs() < 0.1 * want,
            "variance {var} vs analytic {want}"
        );
    }

    /// Monte-Carlo check of the sampler's first two moments against the
    /// analytic eigenpairs, using trapezoid projections onto the cosine
    /// basis (exactly orthonormal on this grid for the modes used).
    #[test]
    fn moments_match_analytic_eigenvalues() {
        let c = 9.0;
        let modes = 16;
        let n = 17;
        let draws = 10_000usize;
        let h = 1.0 / (n - 1) as f64;
        let probe = (5, 11); // fixed interior node
        let check_modes = [(0usize, 0usize), (2, 3), (5, 1)];

        let weight = |i: usize| if i == 0 || i == n - 1 { 0.5 * h } else { h };
        let phi = |k: usize, i: usize| {
            let eta = if k == 0 { 1.0 } else { std::f64::consts::SQRT_2 };
            eta * (k as f64 * PI * i as f64 / (n - 1) as f64).cos()
        };

        let mut point_sum = 0.0;
        let mut proj_sq = [0.0; 3];
        for seed in 0..draws {
            let field = sample_grf(n, c, modes, 1_000_000 + seed as u64).unwrap();
            point_sum += field.get(probe.0, probe.1);
            for (idx, &(k1, k2)) in check_modes.iter().enumerate() {
                let mut proj = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        proj += weight(i) * weight(j) * phi(k1, i) * phi(k2, j) * field.get(i, j);
                    }
                }
                proj_sq[idx] += proj * proj;
            }
        }

        // Mean at the probe within 4 standard errors of zero.
        let var_at_probe: f64 = (0..modes)
            .flat_map(|k1| (0..modes).map(move |k2| (k1, k2)))
            .map(|(k1, k2)| {
                let lambda = (PI * PI * ((k1 * k1 + k2 * k2) as f64) + c).powi(-2);
                let p = phi(k1, probe.0) * phi(k2, probe.1);
                lambda * p * p
            })
            .sum();
        let mean = point_sum / draws as f64;
        let se = (var_at_probe / draws as f64).sqrt();
        assert!(mean.abs() < 4.0 * se, "mean {mean} exceeds 4·SE {se}");

        // Projection variance recovers λ_k within 10%.
        for (idx, &(k1, k2)) in check_modes.iter().enumerate() {
            let lambda = (PI * PI * ((k1 * k1 + k2 * k2) as f64) + c).powi(-2);
            let var = proj_sq[idx] / draws as f64;
            assert!(
                (var - lambda).abs() < 0.1 * lambda,
                "mode ({k1},{k2}): projected variance {var} vs λ {lambda}"
            );
        }
    }

    #[test]
    fn same_seed_same_function_across_resolutions() {
        // Nodes of the 9-grid coincide with every second node of the
        // 17-grid; the drawn function must agree there bitwise.
        let coarse = sample_grf(9, 20.0, 32, 77).unwrap();
        let fine = sample_grf(17, 20.0, 32, 77).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                assert_eq!(coarse.get(i, j), fine.get(2 * i, 2 * j));
            }
        }
    }

    #[test]
    fn two_phase_thresholds_with_zero_to_a_min() {
        let field = GridField::from_values(2, vec![1.5, -0.2, 0.0, 1e-300]).unwrap();
        let phased = two_phase(&field, 12.0, 3.0).unwrap();
        assert_eq!(phased.values(), &[12.0, 3.0, 3.0, 12.0]);
        let all_pos = GridField::constant(3, 0.5).unwrap();
        assert!(two_phase(&all_pos, 12.0, 3.0)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 12.0));
        let all_neg = GridField::constant(3, -0.5).unwrap();
        assert!(two_phase(&all_neg, 12.0, 2.0)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 2.0));
        assert!(two_phase(&field, 12.0, -1.0).is_err());
    }

    #[test]
    fn rejects_bad_truncation_and_shift() {
        assert!(sample_grf(8, 9.0, 0, 1).is_err());
        assert!(sample_grf(8, 0.0, 4, 1).is_err());
        assert!(sample_grf(8, -3.0, 4, 1).is_err());
    }
}
