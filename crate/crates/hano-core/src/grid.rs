//! Scalar fields sampled on square uniform grids.
//!
//! Throughout the crate a field of resolution `n` holds `n × n` values at the
//! nodes of a uniform lattice that *includes* the domain boundary: on a square
//! of side `L` the node `(i, j)` sits at `origin + (i·h, j·h)` with
//! `h = L/(n−1)`, i.e. the row index walks the first coordinate. Values are
//! stored row-major.

use crate::error::{Error, Result};

/// A real-valued field on an `n × n` uniform grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    n: usize,
    values: Vec<f64>,
}

impl GridField {
    /// Zero field of resolution `n` (`n ≥ 2`).
    pub fn zeros(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!(
                "grid resolution must be at least 2, got {n}"
            )));
        }
        Ok(GridField {
            n,
            values: vec![0.0; n * n],
        })
    }

    /// Constant field of resolution `n`.
    pub fn constant(n: usize, value: f64) -> Result<Self> {
        let mut field = Self::zeros(n)?;
        field.values.fill(value);
        Ok(field)
    }

    /// Wrap existing row-major values; `values.len()` must equal `n²`.
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!(
                "grid resolution must be at least 2, got {n}"
            )));
        }
        if values.len() != n * n {
            return Err(Error::shape(format!(
                "expected {} values for a {n}x{n} grid, got {}",
                n * n,
                values.len()
            )));
        }
        Ok(GridField { n, values })
    }

    /// Grid resolution (nodes per side).
    pub fn n(&self) -> usize {
        self.n
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.n + col] = value;
    }

    /// Euclidean norm of the value vector.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self − other`, requiring equal resolutions.
    pub fn sub(&self, other: &GridField) -> Result<GridField> {
        if self.n != other.n {
            return Err(Error::shape(format!(
                "cannot subtract grids of resolution {} and {}",
                self.n, other.n
            )));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(GridField { n: self.n, values })
    }

    /// True if every value is finite.
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
