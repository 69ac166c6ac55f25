use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::Sample;
use crate::error::{contract, Result};
use crate::loss::{ExprLabel, MultiTaskTarget};

/// `λ·a + (1 − λ)·b` for the image and every task labelled in both.
///
/// A task labelled in only one example keeps that label unmixed, provided
/// the example carries nonzero weight. So `λ = 1` returns `a` and `λ = 0`
/// returns `b` exactly.
pub fn mix_pair(a: &Sample, b: &Sample, lambda: f64) -> Result<Sample> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(contract(format!("mixing weight {lambda} outside [0, 1]")));
    }
    if a.image.shape() != b.image.shape() {
        return Err(contract("mixup images differ in shape"));
    }
    if lambda == 1.0 {
        return Ok(a.clone());
    }
    if lambda == 0.0 {
        return Ok(b.clone());
    }
    let mu = 1.0 - lambda;
    let data = a
        .image
        .data()
        .iter()
        .zip(b.image.data())
        .map(|(x, y)| (lambda * x + mu * y).clamp(0.0, 1.0))
        .collect();
    let image = crate::tensor::Tensor::new(a.image.shape().to_vec(), data)?;

    fn combine<T>(x: Option<T>, y: Option<T>, mix: impl FnOnce(T, T) -> T) -> Option<T> {
        match (x, y) {
            (Some(x), Some(y)) => Some(mix(x, y)),
            (x, y) => x.or(y),
        }
    }
    let (ta, tb) = (&a.target, &b.target);
    let expr = match (ta.expr, tb.expr) {
        (Some(x), Some(y)) => {
            let (p, q) = (x.distribution()?, y.distribution()?);
            Some(ExprLabel::Soft(std::array::from_fn(|k| lambda * p[k] + mu * q[k])))
        }
        (x, y) => x.or(y),
    };
    let target = MultiTaskTarget {
        va: combine(ta.va, tb.va, |x, y| std::array::from_fn(|k| lambda * x[k] + mu * y[k])),
        au: combine(ta.au, tb.au, |x, y| {
            std::array::from_fn(|k| (lambda * x[k] + mu * y[k]).clamp(0.0, 1.0))
        }),
        expr,
    };
    Ok(Sample { image, target })
}

/// Mixes each example with a partner from a random permutation, drawing
/// `λ ~ Beta(alpha, alpha)` per pair.
pub fn mixup_batch(batch: &[Sample], alpha: f64, rng: &mut impl Rng) -> Result<Vec<Sample>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(contract(format!("mixup alpha must be positive, got {alpha}")));
    }
    if batch.len() < 2 {
        return Err(contract("mixup needs a batch of at least 2"));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| contract(format!("mixup alpha {alpha}: {e}")))?;
    let mut partner: Vec<usize> = (0..batch.len()).collect();
    partner.shuffle(rng);
    batch
        .iter()
        .zip(&partner)
        .map(|(a, &j)| mix_pair(a, &batch[j], beta.sample(rng)))
        .collect()
}
