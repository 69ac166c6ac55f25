//! Multi-task token transformer for face-based affect recognition.
//!
//! An image is encoded into a grid of patch vectors; three learned task
//! tokens (valence/arousal, action units, emotion) attend to each other and
//! to the patches, and each token feeds its own dense head. Training uses a
//! temperature- and variance-weighted loss that masks missing labels. The
//! crate also covers synthetic data, MixUp, temporal smoothing of per-frame
//! predictions, and the evaluation metrics, all on top of a small
//! reverse-mode differentiation tape in `f64`.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod predlog;
pub mod smoothing;
pub mod taskhead;
pub mod train;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
