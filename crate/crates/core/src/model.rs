use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::encoder::Encoder;
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::taskhead::{RawOutputVars, RawOutputs, TaskHead};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Encoder plus task head, with all parameters in one store.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub head: TaskHead,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let encoder = Encoder::init(&mut params, &config.encoder, rng)?;
        let head = TaskHead::init(&mut params, &config.head, config.encoder.d, rng)?;
        Ok(Self {
            config,
            params,
            encoder,
            head,
        })
    }

    /// Parameter layout for `config` with placeholder values, to be filled
    /// from a checkpoint.
    pub fn skeleton(config: ModelConfig) -> Result<Self> {
        Self::init(config, &mut ChaCha8Rng::seed_from_u64(0))
    }

    /// Records one example's forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: &Tensor) -> Result<RawOutputVars> {
        let patches = self.encoder.encode(tape, p, image)?;
        self.head.forward(tape, p, patches)
    }

    /// Inference on one image.
    pub fn predict(&self, image: &Tensor) -> Result<RawOutputs> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape)?;
        let out = self.forward(&mut tape, &p, image)?;
        Ok(out.values(&tape))
    }

    /// Inference over many images in parallel; output order follows input.
    pub fn predict_many(&self, images: &[Tensor]) -> Result<Vec<RawOutputs>> {
        images.par_iter().map(|img| self.predict(img)).collect()
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in self.params.tensors_mut() {
            for v in t.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EncoderConfig, HeadConfig};

    fn tiny() -> ModelConfig {
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

    #[test]
    fn forward_dims_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::init(tiny(), &mut rng).unwrap();
        let image = Tensor::uniform([8, 8, 3], 0.0, 1.0, &mut rng);
        let a = model.predict(&image).unwrap();
        let b = model.predict(&image).unwrap();
        assert_eq!((a.va.len(), a.au.len(), a.expr.len()), (2, 12, 8));
        assert_eq!(a, b);
        let many = model.predict_many(&[image.clone(), image]).unwrap();
        assert_eq!(many, vec![a, a]);
    }

    #[test]
    fn skeleton_has_same_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::init(tiny(), &mut rng).unwrap();
        let skel = Model::skeleton(tiny()).unwrap();
        let names = |m: &Model| m.params.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>();
        assert_eq!(names(&model), names(&skel));
    }
}
