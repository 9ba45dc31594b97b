//! Hierarchical attention for multiscale operator learning.
//!
//! The crate implements a quadtree-structured attention model for learning
//! solution operators of elliptic PDEs with rough, multiscale coefficients,
//! together with everything needed to certify and exercise it end to end:
//!
//! * [`hierarchy`] — the quadtree index tree over token grids (levels,
//!   children, clipped attention windows).
//! * [`diffcore`] — a small f64 reverse-mode core: tensors, parameter store,
//!   the handful of differentiable primitives the model needs, and a
//!   central-difference gradient checker.
//! * [`hattn`] — the hierarchically nested attention V-cycle (reduce → local
//!   attention per level → decompose & mix) plus dense attention for
//!   reference, with operation counting.
//! * [`hmatrix`] — an independent oracle that materializes the V-cycle as an
//!   explicit hierarchical matrix, certifies the low-rank block structure,
//!   and provides the closed-form cost model.
//! * [`spectral`] — unitary 2-D DFT (radix-2 fast path + direct summation),
//!   relative L² / frequency-weighted H¹ losses with gradients, and
//!   per-frequency error spectra.
//! * [`data`] — Gaussian random field and multiscale trigonometric
//!   coefficient samplers, a flux-form finite-difference Darcy solver,
//!   bilinear resampling, and a checksummed binary dataset format.
//! * [`model`] — patch embedding, the full attention operator network, and
//!   checkpoint serialization.
//! * [`trainer`] — Adam with decoupled weight decay, one-cycle learning-rate
//!   schedule, the training loop, and CSV reporting.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod grid;
pub mod hattn;
pub mod hierarchy;
pub mod hmatrix;
pub mod model;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::GridField;
