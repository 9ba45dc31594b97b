//! Minimal f64 reverse-mode differentiation core.
//!
//! There is no tape: every primitive exposes an explicit forward function and
//! a matching backward function that *accumulates* input/parameter gradients.
//! Higher-level modules compose these by storing whatever intermediate values
//! their backward passes need. All arithmetic is f64 with fixed evaluation
//! order, so results are bitwise reproducible.

mod gradcheck;
mod ops;
mod store;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{
    affine, affine_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, softmax_rows,
    softmax_rows_backward, softmax_slice, softmax_slice_backward, LayerNormCache, LN_EPS,
};
pub use store::{ParamId, ParamStore};
pub use tensor::Tensor;
