//! End-to-end audio-to-sheet-music matching on procedurally generated data.
//!
//! A staff image and a short log-filterbank spectrogram excerpt are fed to a
//! two-branch convolutional network that predicts which horizontal bucket of
//! the staff image contains the note head of the excerpt's most recent
//! onset. Everything needed is in this crate: tensor math with hand-chained
//! backward passes, an additive synthesizer and spectrogram front end, a
//! procedural staff renderer, dataset generation, SGD training, evaluation
//! and guided-backprop saliency.

pub mod audio;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod score;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
