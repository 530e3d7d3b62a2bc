//! Self-supervised GAN for unsupervised few-shot recognition.
//!
//! The discriminator of a spectrally normalized hinge GAN gains an encoding
//! head, trained to reconstruct the generator's latent code and, in a second
//! stage, to rank corner-masked copies of an image closer than center-masked
//! ones. The learned encodings are evaluated with nearest-prototype N-way
//! K-shot episodes.

pub mod data;
pub mod error;
pub mod fewshot;
pub mod gradsuite;
pub mod masking;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
