//! Image captioning with a time-dependent guided LSTM whose guidance is an image
//! feature masked by what the caption has said so far.
//!
//! Modules, bottom-up:
//!
//! * [`numerics`]: vectors, matrices, transfer functions, seeded init
//! * [`vocab`] and [`data`]: tokenizer, vocabulary, dataset files, synthetic corpus
//! * [`model`]: guidance construction, the recurrent cell, forward and backward passes
//! * [`training`]: loss, Adam, gradient checking, the staged schedule, checkpoints
//! * [`decode`], [`metrics`], [`analysis`]: caption generation, BLEU/CIDEr-D, mask neighbours

pub mod analysis;
pub mod data;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
