//! Two-pathway GAN for identity-preserving multi-view image synthesis.
//!
//! A shared generator is trained through a generation path (random latent
//! codes, WGAN-GP critic with an auxiliary view classifier) and a
//! reconstruction path (an encoder inverting the generator via cross-view
//! reconstruction), with an optional self-supervised stage that consumes
//! unlabeled images through pseudo-view labels.
//!
//! All numeric code is generic over [`scalar::Scalar`]; training uses
//! [`Real`] (`f32`), gradient checks instantiate `f64`.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod domain;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod render;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

/// Scalar type used by the training pipeline and CLI.
pub type Real = f32;

pub use rng::RngStream;
pub use scalar::Scalar;
pub use tensor::Tensor;
