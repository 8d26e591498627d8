//! Network layers: pseudo-3D convolution, spatial / temporal / cross
//! attention and the supporting linear, normalization and timestep layers.
//!
//! Layers hold only [`ParamId`](crate::ParamId)s and hyperparameters; the
//! weights live in a [`ParamStore`](crate::ParamStore) passed at call time,
//! so one layer definition serves both `f32` training and `f64` checks.

mod attention;
mod conv;
mod embedding;
mod linear;
mod norm;

pub use attention::{Attention, CrossAttention, SpatialAttention, TemporalAttention};
pub use conv::{Conv1d, Conv2d, Pseudo3dConv};
pub use embedding::{sinusoidal_embedding, TimestepEmbedding};
pub use linear::Linear;
pub use norm::GroupNorm;

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Var};

/// Split a `(b, c, f, h, w)` shape, rejecting other ranks.
pub(crate) fn video_dims<S: Scalar>(v: &Var<'_, S>) -> Result<[usize; 5]> {
    match *v.shape() {
        [b, c, f, h, w] => Ok([b, c, f, h, w]),
        ref s => Err(shape_err!("expected a (b, c, f, h, w) video latent, got {:?}", s)),
    }
}
