//! Optimizers, the training step, and the seeded training loop.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{LossConfig, OptimizerConfig, OptimizerKind, TrainConfig};
use crate::data::{affine_augment, mixup_batch, Dataset, Sample};
use crate::error::{contract, Result};
use crate::loss::total_loss;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// SGD or Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads` follows the parameter order of `params`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(contract("one gradient per parameter tensor expected"));
        }
        self.step += 1;
        let c = &self.config;
        let lr = c.lr;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.tensors_mut().iter_mut().zip(grads) {
                    for (x, dx) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * dx;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
                for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
                    for (((x, &dx), m), v) in it {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * dx;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * dx * dx;
                        let (mh, vh) = (*m / bc1, *v / bc2);
                        *x -= lr * mh / (vh.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Loss and per-parameter gradients for one batch.
pub fn loss_and_grads(model: &Model, batch: &[Sample], loss: &LossConfig) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape)?;
    let mut outs = Vec::with_capacity(batch.len());
    for s in batch {
        outs.push((model.forward(&mut tape, &bound, &s.image)?, &s.target));
    }
    let l = total_loss(&mut tape, &outs, loss)?;
    let value = tape.value(l).item();
    let grads = tape.backward(l)?;
    Ok((value, model.params.gradients(&bound, &grads)))
}

/// Loss over `samples` without building a gradient.
pub fn batch_loss(model: &Model, samples: &[Sample], loss: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape)?;
    let mut outs = Vec::with_capacity(samples.len());
    for s in samples {
        outs.push((model.forward(&mut tape, &bound, &s.image)?, &s.target));
    }
    let l = total_loss(&mut tape, &outs, loss)?;
    Ok(tape.value(l).item())
}

/// Forward, backward and one optimizer update. Returns the pre-update loss,
/// or `None` when the batch has no labels at all and the step is skipped.
pub fn train_step(model: &mut Model, batch: &[Sample], opt: &mut Optimizer, loss: &LossConfig) -> Result<Option<f64>> {
    if batch.iter().all(|s| s.target.n_present() == 0) {
        warn!("skipping a batch of {} examples without any labels", batch.len());
        return Ok(None);
    }
    let (value, grads) = loss_and_grads(model, batch, loss)?;
    opt.update(&mut model.params, &grads)?;
    Ok(Some(value))
}

/// Loads or renders every image of `dataset` at the model's input size.
pub fn load_samples(dataset: &Dataset, dims: (usize, usize, usize)) -> Result<Vec<Sample>> {
    dataset
        .examples
        .iter()
        .map(|ex| {
            Ok(Sample {
                image: dataset.image(ex, dims)?,
                target: ex.target,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final model, rounded to checkpoint precision.
    pub model: Model,
    /// Batch loss of every step that ran, in order.
    pub losses: Vec<f64>,
    pub skipped_steps: usize,
}

/// Runs `config.steps` steps over shuffled passes of `dataset`.
///
/// Initialization, batching, augmentation and MixUp all draw from generators
/// seeded by `config.seed`, so equal inputs give bit-identical models.
pub fn train_loop(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(contract("cannot train on an empty dataset"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
    data_rng.set_stream(1);

    let mut model = Model::init(config.model.clone(), &mut init_rng)?;
    let samples = load_samples(dataset, config.model.encoder.input)?;
    let loss = config.loss();
    let mut opt = Optimizer::new(config.optimizer.clone(), &model.params);
    let batch_size = config.batch_size.min(samples.len());

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(config.steps);
    let mut skipped_steps = 0;
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut data_rng);
                cursor = 0;
            }
            batch.push(samples[order[cursor]].clone());
            cursor += 1;
        }
        if config.augment {
            for s in &mut batch {
                s.image = affine_augment(&s.image, &mut data_rng);
            }
        }
        if let Some(alpha) = config.mixup {
            if batch.len() >= 2 {
                batch = mixup_batch(&batch, alpha, &mut data_rng)?;
            }
        }
        match train_step(&mut model, &batch, &mut opt, &loss)? {
            Some(l) => {
                losses.push(l);
                if step == 1 || step % config.log_every.max(1) == 0 || step == config.steps {
                    info!("step {step}: loss {l:.6}");
                }
            }
            None => skipped_steps += 1,
        }
    }
    model.round_to_f32();
    Ok(TrainOutcome {
        model,
        losses,
        skipped_steps,
    })
}
