//! Datasets, the JSON-lines manifest format, synthetic data, and augmentation.

mod augment;
mod manifest;
mod mixup;
mod synthetic;

pub use augment::{affine_augment, apply_affine, AffineParams};
pub use manifest::{load_image, save_image, Dataset, DatasetExample, ImageSource};
pub use mixup::{mix_pair, mixup_batch};
pub use synthetic::{generate_synthetic, render_synthetic, sub_seed, Latent, SyntheticSpec};

use crate::loss::MultiTaskTarget;
use crate::tensor::Tensor;

/// An image in memory with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub target: MultiTaskTarget,
}
