//! Cross-device adaptation toolkit for ultra-widefield fundus imaging.
//!
//! The library covers the full workflow: artifact removal, style transfer
//! from a source device to a target device with a consistency-regularized
//! generator pool, pseudo-labeling of the generated samples, semi-supervised
//! training of the downstream task models, and evaluation.

pub mod data;
pub mod error;
pub mod eval;
pub mod gan;
pub mod imgio;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod pseudo;
pub mod seeding;
pub mod ssl;

pub use error::{Error, Result};
