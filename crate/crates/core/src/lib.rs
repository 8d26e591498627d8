//! Image-to-video latent diffusion on a from-scratch tensor engine.
//!
//! The crate is organised bottom-up: [`tensor`] (dense arrays and the
//! reverse-mode tape), [`nn`] (pseudo-3D convolution and attention layers),
//! [`unet`] (the denoiser), [`diffusion`] (noise schedule, corruption and
//! sampling), [`conditioning`] (VAE, embedder and adapter), [`metrics`]
//! (Fréchet distance and Inception Score), [`data`] (synthetic videos and
//! the VTEN file format) and [`training`] (AdamW and the training loop).

mod error;

pub mod conditioning;
pub mod data;
pub mod diffusion;
pub mod metrics;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
pub use params::{Init, ParamId, ParamStore, Scope};
pub use tensor::{Scalar, Tape, Tensor, Var};
