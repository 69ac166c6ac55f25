//! Finite-difference gradient oracle and the model-level gradient suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{EncoderConfig, HeadConfig, LossConfig, ModelConfig};
use crate::error::Result;
use crate::loss::{total_loss, ExprLabel, MultiTaskTarget};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Gradients whose magnitude stays below this floor are compared in absolute
/// terms instead of relative ones.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Central differences `(f(x + eps·e_i) − f(x − eps·e_i)) / 2eps` for every
/// coordinate of `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite_diff_grad needs eps > 0");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// `max |a − b| / max(max |a|, max |b|, RELATIVE_FLOOR)` over a whole tensor.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shapes");
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a
        .data()
        .iter()
        .chain(b.data())
        .map(|v| v.abs())
        .fold(RELATIVE_FLOOR, f64::max);
    diff / scale
}

/// Maximum relative error for one named parameter tensor.
#[derive(Debug, Clone)]
pub struct GroupError {
    pub name: String,
    pub numel: usize,
    pub max_relative_error: f64,
}

/// Result of the full-model gradient suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub groups: Vec<GroupError>,
}

impl SuiteReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_relative_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst() < tolerance
    }
}

/// Smallest configuration that still exercises every model component:
/// 8x8x3 images, two stride-2 stages to a 2x2 patch grid, d=8, 2 heads,
/// one encoder block, one token module, two dense layers per task.
pub fn suite_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input: (8, 8, 3),
            backbone: vec![(4, 2), (8, 2)],
            d: 8,
            n_x: 1,
            heads: 2,
        },
        head: HeadConfig {
            n_t: 1,
            n_d: 2,
            heads: 2,
            ..HeadConfig::default()
        },
    }
}

/// Three examples covering full, partial, and single-task presence.
pub fn suite_batch(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<(Tensor, MultiTaskTarget)> {
    let (h, w, c) = config.encoder.input;
    let image = |rng: &mut ChaCha8Rng| Tensor::uniform([h, w, c], 0.0, 1.0, rng);
    let au = |bits: u16| std::array::from_fn(|k| f64::from((bits >> k) & 1));
    vec![
        (
            image(rng),
            MultiTaskTarget {
                va: Some([0.3, -0.6]),
                au: Some(au(0b1010_0110_0101)),
                expr: Some(ExprLabel::Class(3)),
            },
        ),
        (
            image(rng),
            MultiTaskTarget {
                va: None,
                au: None,
                expr: Some(ExprLabel::Class(6)),
            },
        ),
        (
            image(rng),
            MultiTaskTarget {
                va: Some([-0.2, 0.9]),
                au: Some(au(0b0111_0000_1100)),
                expr: None,
            },
        ),
    ]
}

/// Compares backward against central differences for every parameter tensor
/// of a freshly initialized model.
pub fn run_suite(config: &ModelConfig, loss: &LossConfig, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::init(config.clone(), &mut rng)?;
    let batch = suite_batch(config, &mut rng);

    let eval = |params: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape)?;
        let mut outs = Vec::with_capacity(batch.len());
        for (image, target) in &batch {
            outs.push((model.forward(&mut tape, &bound, image)?, target));
        }
        let l = total_loss(&mut tape, &outs, loss)?;
        Ok(tape.value(l).item())
    };

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape)?;
    let mut outs = Vec::with_capacity(batch.len());
    for (image, target) in &batch {
        outs.push((model.forward(&mut tape, &bound, image)?, target));
    }
    let l = total_loss(&mut tape, &outs, loss)?;
    let grads = tape.backward(l)?;
    let analytic = model.params.gradients(&bound, &grads);

    let mut groups = Vec::with_capacity(model.params.len());
    let mut probe = model.params.clone();
    for (id, name, value) in model.params.iter() {
        let numeric = finite_diff_grad(
            |x| {
                *probe.get_mut(id) = x.clone();
                eval(&probe).expect("forward pass failed during finite differences")
            },
            value,
            DEFAULT_EPS,
        );
        *probe.get_mut(id) = value.clone();
        groups.push(GroupError {
            name: name.to_string(),
            numel: value.numel(),
            max_relative_error: relative_error(&analytic[id.index()], &numeric),
        });
    }
    Ok(SuiteReport { groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, DEFAULT_EPS);
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let g = finite_diff_grad(|_| 42.0, &x, DEFAULT_EPS);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn agrees_with_backward_on_sigmoid_of_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::uniform([3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform([4, 2], -1.0, 1.0, &mut rng);
        let f = |a: &Tensor| {
            let mut t = Tape::new();
            let (va, vb) = (t.leaf(a.clone()).unwrap(), t.leaf(b.clone()).unwrap());
            let p = t.matmul(va, vb).unwrap();
            let s = t.sigmoid(p).unwrap();
            let l = t.sum(s).unwrap();
            (t.value(l).item(), t.backward(l).unwrap().get(va).unwrap().clone())
        };
        let (_, analytic) = f(&a);
        let numeric = finite_diff_grad(|x| f(x).0, &a, DEFAULT_EPS);
        assert!(relative_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn relative_error_floor() {
        let a = Tensor::vector(vec![0.0, 0.0]);
        let b = Tensor::vector(vec![1e-12, 0.0]);
        assert!(relative_error(&a, &b) < 1e-5);
        let c = Tensor::vector(vec![1.0, 2.0]);
        let d = Tensor::vector(vec![1.0, 2.2]);
        assert!((relative_error(&c, &d) - 0.2 / 2.2).abs() < 1e-12);
    }

    #[test]
    fn full_model_suite() {
        let report = run_suite(&suite_config(), &LossConfig::default(), 7).unwrap();
        for g in &report.groups {
            eprintln!("{:40} {:6} {:.3e}", g.name, g.numel, g.max_relative_error);
        }
        assert!(report.passes(1e-4), "worst {}", report.worst());
    }
}
