//! Privacy-enhancing synthesis of anonymous chest radiograph datasets.
//!
//! The crate trains class-conditional generators (a latent diffusion model
//! on top of a vector-quantized autoencoder, and a progressively growing
//! GAN), filters their samples through a patient retrieval + verification
//! matcher so that no synthetic image re-identifies a training patient, and
//! measures how well a multi-label abnormality classifier trained on the
//! synthetic data performs on real test images.

pub mod classes;
pub mod classifier;
pub mod curation;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod matcher;
pub mod nn;
pub mod pipeline;
pub mod pggan;
pub mod privacy;
pub mod seeds;
pub mod toy;
pub mod vae;

pub use error::{Error, Result};
