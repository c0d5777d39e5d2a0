//! Dense numerical primitives, parameter storage and gradient checking.
//!
//! All arithmetic is `f64`. Gradients are derived by hand for each layer;
//! [`grad_check`] is the safety net every loss in the crate is tested with.

mod gradcheck;
mod matrix;
mod ops;
mod params;
pub mod rng;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, GroupError};
pub use matrix::{dot, Matrix};
pub use ops::{
    activation, affine, gelu, gelu_grad, layer_norm, layer_norm_backward, softmax,
    softmax_backward, softmax_in_place, LayerNormCache,
};
pub(crate) use ops::affine_into;
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
