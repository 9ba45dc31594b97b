//! Unitary 2-D discrete Fourier analysis, relative L²/H¹ losses, and
//! per-frequency error spectra.
//!
//! The transform convention is unitary on an `n × n` grid:
//!
//! ```text
//! F(f)(ξ) = (1/n) Σ_{i,j} f[i,j] · exp(−2πi (i·ξ₁ + j·ξ₂)/n)
//! ```
//!
//! with integer frequencies `ξ_d ∈ (−n/2, n/2]` (coefficient index `k` maps
//! to `ξ = k` for `k ≤ n/2` and `ξ = k − n` otherwise). Under this scaling
//! Parseval holds exactly: `Σ|f|² = Σ|F(f)|²`.
//!
//! The weighted H¹ quantity used as a training loss is the seminorm
//! `‖v‖_h = √(Σ_ξ |ξ|²·|F(v)(ξ)|²)`; the `ξ = 0` term vanishes, which makes
//! the relative H¹ distance invariant under shifting both fields by a
//! constant. A full-norm variant with weights `1 + |ξ|²` is provided
//! separately for callers that want the L² term included.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::GridField;

/// CSV header for spectrum reports.
pub const SPECTRUM_CSV_HEADER: &str = "epoch,split,xi1,xi2,mean_abs_err";

/// Complex Fourier coefficients of an `n × n` real field, row-major over
/// coefficient indices `(k₁, k₂) ∈ [0, n)²`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    n: usize,
    coeffs: Vec<Complex64>,
}

impl Spectrum {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    #[inline]
    pub fn coeff(&self, k1: usize, k2: usize) -> Complex64 {
        self.coeffs[k1 * self.n + k2]
    }

    /// Coefficient at integer frequency `(ξ₁, ξ₂)`, each in `(−n/2, n/2]`.
    pub fn at_freq(&self, xi1: i64, xi2: i64) -> Result<Complex64> {
        let k1 = index_of_frequency(self.n, xi1)?;
        let k2 = index_of_frequency(self.n, xi2)?;
        Ok(self.coeff(k1, k2))
    }

    /// Total spectral energy `Σ|F|²`.
    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Signed frequency of coefficient index `k` on an `n`-point grid.
#[inline]
pub fn frequency_of_index(n: usize, k: usize) -> i64 {
    debug_assert!(k < n);
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Coefficient index of a signed frequency; errors outside `(−n/2, n/2]`.
pub fn index_of_frequency(n: usize, xi: i64) -> Result<usize> {
    let half = (n / 2) as i64;
    let lo = half - n as i64 + 1; // −n/2 + 1
    if xi < lo || xi > half {
        return Err(Error::invalid(format!(
            "frequency {xi} outside ({}, {half}] for n = {n}",
            lo - 1
        )));
    }
    Ok(if xi >= 0 { xi as usize } else { (xi + n as i64) as usize })
}

/// In-place radix-2 Cooley–Tukey on a power-of-two buffer. `table` holds
/// `exp(sign·2πi·j/n)` for `j < n/2`; stages index it with stride `n/len`.
fn fft_pow2(buf: &mut [Complex64], table: &[Complex64]) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let stride = n / len;
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = table[k * stride];
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn twiddle_table(n: usize, sign: f64) -> Vec<Complex64> {
    (0..n / 2)
        .map(|j| Complex64::from_polar(1.0, sign * 2.0 * std::f64::consts::PI * j as f64 / n as f64))
        .collect()
}

/// Direct 1-D DFT (any length) of `src` into `dst`, sign −1 for forward.
fn dft1_direct(src: &[Complex64], dst: &mut [Complex64], sign: f64) {
    let n = src.len();
    for (k, out) in dst.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, &v) in src.iter().enumerate() {
            let angle = sign * 2.0 * std::f64::consts::PI * (i * k % n) as f64 / n as f64;
            acc += v * Complex64::from_polar(1.0, angle);
        }
        *out = acc;
    }
}

/// Row-column 2-D transform with overall scale `1/n`; uses the radix-2 fast
/// path when `n` is a power of two and direct summation otherwise.
fn transform2(values: &[Complex64], n: usize, sign: f64) -> Vec<Complex64> {
    let mut work: Vec<Complex64> = values.to_vec();
    let pow2 = n.is_power_of_two();
    let table = if pow2 { twiddle_table(n, sign) } else { Vec::new() };
    let mut scratch = vec![Complex64::new(0.0, 0.0); n];
    // Rows.
    for r in 0..n {
        let row = &mut work[r * n..(r + 1) * n];
        if pow2 {
            fft_pow2(row, &table);
        } else {
            dft1_direct(row, &mut scratch, sign);
            row.copy_from_slice(&scratch);
        }
    }
    // Columns.
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..n {
        for r in 0..n {
            col[r] = work[r * n + c];
        }
        if pow2 {
            fft_pow2(&mut col, &table);
        } else {
            dft1_direct(&col, &mut scratch, sign);
            col.copy_from_slice(&scratch);
        }
        for r in 0..n {
            work[r * n + c] = col[r];
        }
    }
    let scale = 1.0 / n as f64;
    for v in &mut work {
        *v *= scale;
    }
    work
}

/// Unitary 2-D DFT of a real field.
pub fn dft2(field: &GridField) -> Spectrum {
    let n = field.n();
    let values: Vec<Complex64> = field
        .values()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    Spectrum {
        n,
        coeffs: transform2(&values, n, -1.0),
    }
}

/// Unitary inverse 2-D DFT; returns complex node values.
fn idft2(spec: &Spectrum) -> Vec<Complex64> {
    transform2(&spec.coeffs, spec.n, 1.0)
}

/// Literal direct-summation DFT: a quadruple loop over grid points and
/// signed frequencies, scaled by `1/n`. Independent oracle for [`dft2`];
/// quadratically slower, intended for small `n`.
pub fn dft2_direct(field: &GridField) -> Spectrum {
    let n = field.n();
    let nf = n as f64;
    let values = field.values();
    let mut coeffs = vec![Complex64::new(0.0, 0.0); n * n];
    for k1 in 0..n {
        let xi1 = frequency_of_index(n, k1) as f64;
        for k2 in 0..n {
            let xi2 = frequency_of_index(n, k2) as f64;
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let phase = -2.0 * std::f64::consts::PI
                        * (i as f64 * xi1 + j as f64 * xi2)
                        / nf;
                    acc += values[i * n + j] * Complex64::from_polar(1.0, phase);
                }
            }
            coeffs[k1 * n + k2] = acc / nf;
        }
    }
    Spectrum { n, coeffs }
}

fn h1_weight(n: usize, k1: usize, k2: usize, include_l2: bool) -> f64 {
    let xi1 = frequency_of_index(n, k1) as f64;
    let xi2 = frequency_of_index(n, k2) as f64;
    let w = xi1 * xi1 + xi2 * xi2;
    if include_l2 {
        1.0 + w
    } else {
        w
    }
}

fn weighted_energy(spec: &Spectrum, include_l2: bool) -> f64 {
    let n = spec.n;
    let mut acc = 0.0;
    for k1 in 0..n {
        for k2 in 0..n {
            acc += h1_weight(n, k1, k2, include_l2) * spec.coeff(k1, k2).norm_sqr();
        }
    }
    acc
}

/// Frequency-weighted H¹ seminorm `√(Σ |ξ|²|F(f)(ξ)|²)`.
pub fn h1_seminorm(field: &GridField) -> f64 {
    weighted_energy(&dft2(field), false).sqrt()
}

/// Relative L² distance `‖target − pred‖ / ‖target‖` of the node values.
pub fn rel_l2(pred: &GridField, target: &GridField) -> Result<f64> {
    let diff = target.sub(pred)?;
    let tn = target.norm();
    if tn == 0.0 {
        return Err(Error::numerical(
            "relative L2 undefined: target field is identically zero",
        ));
    }
    Ok(diff.norm() / tn)
}

/// [`rel_l2`] together with its gradient with respect to `pred`.
///
/// The distance is non-differentiable at `pred == target`; there the gradient
/// is defined as zero.
pub fn rel_l2_grad(pred: &GridField, target: &GridField) -> Result<(f64, GridField)> {
    let diff = target.sub(pred)?; // t − p
    let tn = target.norm();
    if tn == 0.0 {
        return Err(Error::numerical(
            "relative L2 undefined: target field is identically zero",
        ));
    }
    let dn = diff.norm();
    let value = dn / tn;
    let mut grad = GridField::zeros(pred.n())?;
    if dn > 0.0 {
        let scale = 1.0 / (dn * tn);
        for (g, d) in grad.values_mut().iter_mut().zip(diff.values()) {
            // ∂‖t−p‖/∂p = (p − t)/‖t−p‖.
            *g = -d * scale;
        }
    }
    Ok((value, grad))
}

fn rel_h1_impl(
    pred: &GridField,
    target: &GridField,
    include_l2: bool,
    with_grad: bool,
) -> Result<(f64, Option<GridField>)> {
    let diff = target.sub(pred)?;
    let n = diff.n();
    let denom_sq = weighted_energy(&dft2(target), include_l2);
    if denom_sq == 0.0 {
        return Err(Error::numerical(
            "relative H1 undefined: target has zero weighted norm",
        ));
    }
    let denom = denom_sq.sqrt();
    let diff_spec = dft2(&diff);
    let num_sq = weighted_energy(&diff_spec, include_l2);
    let num = num_sq.sqrt();
    let value = num / denom;
    if !with_grad {
        return Ok((value, None));
    }
    let mut grad = GridField::zeros(n)?;
    if num > 0.0 {
        // ∂‖d‖_h²/∂d = 2·Re idft2(w ∘ F(d)); with d = t − p the chain rule
        // brings a −1, giving ∂(‖d‖_h/‖t‖_h)/∂p = −Re idft2(w∘F(d)) / (‖d‖_h‖t‖_h).
        let mut weighted = diff_spec.clone();
        for k1 in 0..n {
            for k2 in 0..n {
                weighted.coeffs[k1 * n + k2] *= h1_weight(n, k1, k2, include_l2);
            }
        }
        let back = idft2(&weighted);
        let scale = -1.0 / (num * denom);
        for (g, b) in grad.values_mut().iter_mut().zip(&back) {
            *g = scale * b.re;
        }
    }
    Ok((value, Some(grad)))
}

/// Relative weighted-H¹ seminorm distance `‖target − pred‖_h / ‖target‖_h`.
///
/// Errors if the target has zero seminorm (e.g. a constant field).
pub fn rel_h1(pred: &GridField, target: &GridField) -> Result<f64> {
    rel_h1_impl(pred, target, false, false).map(|(v, _)| v)
}

/// [`rel_h1`] together with its gradient with respect to `pred`. At
/// `pred == target` the gradient is defined as zero.
pub fn rel_h1_grad(pred: &GridField, target: &GridField) -> Result<(f64, GridField)> {
    rel_h1_impl(pred, target, false, true).map(|(v, g)| (v, g.expect("gradient requested")))
}

/// Full-norm variant of [`rel_h1`] with weights `1 + |ξ|²` (includes the
/// `ξ = 0` / L² term).
pub fn rel_h1_full(pred: &GridField, target: &GridField) -> Result<f64> {
    rel_h1_impl(pred, target, true, false).map(|(v, _)| v)
}

/// One frequency's entry in an error spectrum, ranked by how much target
/// energy the frequency carries.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumRow {
    pub xi1: i64,
    pub xi2: i64,
    /// Mean over samples of `|F(target − pred)(ξ)|`.
    pub mean_abs_err: f64,
    /// Mean over samples of `|F(target)(ξ)|` (the ranking key).
    pub mean_target_mag: f64,
}

/// Format one CSV line (matching [`SPECTRUM_CSV_HEADER`]).
pub fn spectrum_csv_row(epoch: usize, split: &str, row: &SpectrumRow) -> String {
    format!(
        "{epoch},{split},{},{},{}",
        row.xi1, row.xi2, row.mean_abs_err
    )
}

/// Error spectrum at the `k` dominating frequencies.
///
/// Frequencies are ranked by the mean target coefficient magnitude over the
/// sample set (descending), ties broken lexicographically by `(ξ₁, ξ₂)`;
/// for each of the top `k` the mean absolute error coefficient is reported.
pub fn freq_error_spectrum(
    preds: &[GridField],
    targets: &[GridField],
    k: usize,
) -> Result<Vec<SpectrumRow>> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::invalid(format!(
            "need equal non-empty sample lists, got {} predictions and {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let n = targets[0].n();
    for (p, t) in preds.iter().zip(targets) {
        if p.n() != n || t.n() != n {
            return Err(Error::shape(
                "all fields in a spectrum report must share one resolution".to_string(),
            ));
        }
    }
    if k == 0 || k > n * n {
        return Err(Error::invalid(format!(
            "spectrum size k = {k} must be in 1..={}",
            n * n
        )));
    }
    let count = preds.len() as f64;
    let mut target_mag = vec![0.0f64; n * n];
    let mut err_mag = vec![0.0f64; n * n];
    for (p, t) in preds.iter().zip(targets) {
        let ts = dft2(t);
        let es = dft2(&t.sub(p)?);
        for idx in 0..n * n {
            target_mag[idx] += ts.coeffs[idx].norm() / count;
            err_mag[idx] += es.coeffs[idx].norm() / count;
        }
    }
    let mut order: Vec<usize> = (0..n * n).collect();
    order.sort_by(|&a, &b| {
        target_mag[b]
            .partial_cmp(&target_mag[a])
            .expect("finite magnitudes")
            .then_with(|| {
                let fa = (frequency_of_index(n, a / n), frequency_of_index(n, a % n));
                let fb = (frequency_of_index(n, b / n), frequency_of_index(n, b % n));
                fa.cmp(&fb)
            })
    });
    Ok(order[..k]
        .iter()
        .map(|&idx| SpectrumRow {
            xi1: frequency_of_index(n, idx / n),
            xi2: frequency_of_index(n, idx % n),
            mean_abs_err: err_mag[idx],
            mean_target_mag: target_mag[idx],
        })
        .collect())
}
