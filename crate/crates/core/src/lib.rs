//! Unsupervised domain adaptation through a shared latent space, trained with
//! classification, reconstruction, latent-adversarial, translation-adversarial,
//! cycle and translated-classification objectives.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Float, ParamId, Tensor};
