//! Image encoder: conv backbone, pointwise projection to width `d`,
//! sinusoidal positions, and a stack of encoder blocks.

use rand::Rng;

use crate::attention::{sincos_positional_encoding, EncoderBlock};
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
const PAD: usize = 1;

#[derive(Debug, Clone)]
pub struct ConvStage {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stages: Vec<ConvStage>,
    pub proj: ParamId,
    pub blocks: Vec<EncoderBlock>,
    positions: Tensor,
}

impl Encoder {
    pub fn init(store: &mut ParamStore, config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut c_in = config.input.2;
        let mut stages = Vec::with_capacity(config.backbone.len());
        for (i, &(c_out, stride)) in config.backbone.iter().enumerate() {
            let fan_in = (KERNEL * KERNEL * c_in) as f64;
            stages.push(ConvStage {
                weight: store.add_uniform(
                    format!("encoder.backbone.{i}.weight"),
                    &[KERNEL, KERNEL, c_in, c_out],
                    1.0 / fan_in.sqrt(),
                    rng,
                ),
                bias: store.add(format!("encoder.backbone.{i}.bias"), Tensor::zeros([c_out])),
                stride,
            });
            c_in = c_out;
        }
        let proj = store.add_uniform("encoder.proj", &[c_in, config.d], 1.0 / (c_in as f64).sqrt(), rng);
        let blocks = (0..config.n_x)
            .map(|i| EncoderBlock::init(store, &format!("encoder.block.{i}"), config.d, config.heads, rng))
            .collect::<Result<_>>()?;
        let (h, w) = config.patch_grid();
        Ok(Self {
            config: config.clone(),
            stages,
            proj,
            blocks,
            positions: sincos_positional_encoding(h, w, config.d)?,
        })
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let (h, w, c) = self.config.input;
        if image.shape() != [h, w, c] {
            return Err(Error::Shape {
                op: "encode_image",
                lhs: image.shape().to_vec(),
                rhs: vec![h, w, c],
            });
        }
        Ok(())
    }

    /// Stride-`s` 3x3 conv + relu per stage; `[h, w, c] → [h', w', c_out]`.
    pub fn conv_backbone(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<Var> {
        self.stages.iter().try_fold(image, |x, stage| {
            let y = tape.conv2d(x, p.var(stage.weight), p.var(stage.bias), stage.stride, PAD)?;
            tape.relu(y)
        })
    }

    /// Patch representation, flattened row-major to `[h'·w', d]`.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, image: &Tensor) -> Result<Var> {
        self.check_image(image)?;
        let x = tape.leaf(image.clone())?;
        let features = self.conv_backbone(tape, p, x)?;
        let patches = project_patches(tape, features, p.var(self.proj))?;
        let pe = tape.leaf(self.positions.clone())?;
        let mut x = tape.add(patches, pe)?;
        for block in &self.blocks {
            x = block.forward(tape, p, x)?;
        }
        Ok(x)
    }

    /// Evaluates the encoder and returns the `[h', w', d]` patch grid.
    pub fn encode_image(&self, params: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape)?;
        let x = self.encode(&mut tape, &p, image)?;
        let (h, w) = self.config.patch_grid();
        tape.value(x).reshape([h, w, self.config.d])
    }
}

/// Pointwise (1x1) projection of every patch: `[h', w', c] · [c, d] → [h'·w', d]`.
pub fn project_patches(tape: &mut Tape, features: Var, proj: Var) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "project_patches",
            lhs: s,
            rhs: tape.shape(proj).to_vec(),
        });
    }
    let flat = tape.reshape(features, [s[0] * s[1], s[2]])?;
    tape.matmul(flat, proj)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{finite_diff_grad, relative_error};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn desk_backbone_reaches_four_by_four() {
        let config = EncoderConfig::desk();
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &config, &mut rng(0)).unwrap();
        let image = Tensor::uniform([32, 32, 3], 0.0, 1.0, &mut rng(1));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let x = tape.leaf(image.clone()).unwrap();
        let f = enc.conv_backbone(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(f), &[4, 4, 32]);
        assert_eq!(enc.encode_image(&store, &image).unwrap().shape(), &[4, 4, 32]);
    }

    #[test]
    fn zero_backbone_gives_zero_features() {
        let config = EncoderConfig::desk();
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &config, &mut rng(0)).unwrap();
        for s in &enc.stages {
            let shape = store.get(s.weight).shape().to_vec();
            store.set(s.weight, Tensor::zeros(shape)).unwrap();
        }
        let image = Tensor::uniform([32, 32, 3], 0.0, 1.0, &mut rng(1));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let x = tape.leaf(image).unwrap();
        let f = enc.conv_backbone(&mut tape, &p, x).unwrap();
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_only_flattens() {
        let mut tape = Tape::new();
        let feats = Tensor::uniform([2, 3, 4], -1.0, 1.0, &mut rng(2));
        let f = tape.leaf(feats.clone()).unwrap();
        let i = tape.leaf(Tensor::eye(4)).unwrap();
        let out = project_patches(&mut tape, f, i).unwrap();
        assert_eq!(tape.shape(out), &[6, 4]);
        assert_eq!(tape.value(out).data(), feats.data());
    }

    #[test]
    fn equal_patches_project_equally() {
        let mut tape = Tape::new();
        let mut feats = Tensor::uniform([1, 2, 3], -1.0, 1.0, &mut rng(3));
        let first: Vec<f64> = feats.data()[..3].to_vec();
        feats.data_mut()[3..].copy_from_slice(&first);
        let f = tape.leaf(feats).unwrap();
        let w = tape.leaf(Tensor::uniform([3, 5], -1.0, 1.0, &mut rng(4))).unwrap();
        let out = project_patches(&mut tape, f, w).unwrap();
        let v = tape.value(out);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn paper_projection_shape() {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::zeros([7, 7, 2048])).unwrap();
        let w = tape.leaf(Tensor::zeros([2048, 768])).unwrap();
        let out = project_patches(&mut tape, f, w).unwrap();
        assert_eq!(tape.shape(out), &[49, 768]);
    }

    #[test]
    fn without_blocks_output_is_features_plus_positions() {
        let config = EncoderConfig {
            input: (8, 8, 4),
            backbone: vec![(4, 2)],
            d: 4,
            n_x: 0,
            heads: 2,
        };
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &config, &mut rng(5)).unwrap();
        store.set(enc.proj, Tensor::eye(4)).unwrap();
        let image = Tensor::uniform([8, 8, 4], 0.0, 1.0, &mut rng(6));
        let grid = enc.encode_image(&store, &image).unwrap();

        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let x = tape.leaf(image).unwrap();
        let f = enc.conv_backbone(&mut tape, &p, x).unwrap();
        let pe = sincos_positional_encoding(4, 4, 4).unwrap();
        for (i, (g, (fv, pv))) in grid
            .data()
            .iter()
            .zip(tape.value(f).data().iter().zip(pe.data()))
            .enumerate()
        {
            assert_eq!(*g, fv + pv, "element {i}");
        }
    }

    #[test]
    fn rejects_wrong_image_shape() {
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &EncoderConfig::desk(), &mut rng(0)).unwrap();
        assert!(enc.encode_image(&store, &Tensor::zeros([16, 16, 3])).is_err());
    }

    #[test]
    fn rejects_indivisible_input() {
        let config = EncoderConfig {
            input: (30, 32, 3),
            ..EncoderConfig::desk()
        };
        assert!(Encoder::init(&mut ParamStore::new(), &config, &mut rng(0)).is_err());
    }

    #[test]
    fn one_stage_backbone_gradient_check() {
        let config = EncoderConfig {
            input: (8, 8, 1),
            backbone: vec![(3, 2)],
            d: 4,
            n_x: 0,
            heads: 1,
        };
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &config, &mut rng(7)).unwrap();
        // Shift biases off zero so no relu input sits on its kink.
        store.set(enc.stages[0].bias, Tensor::vector(vec![0.05, -0.1, 0.2])).unwrap();
        let image = Tensor::uniform([8, 8, 1], 0.0, 1.0, &mut rng(8));
        let weights = Tensor::uniform([4, 4, 3], -1.0, 1.0, &mut rng(9));
        let f = |store: &ParamStore| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape).unwrap();
            let x = tape.leaf(image.clone()).unwrap();
            let y = enc.conv_backbone(&mut tape, &p, x).unwrap();
            let w = tape.leaf(weights.clone()).unwrap();
            let l = tape.dot(y, w).unwrap();
            let g = store.gradients(&p, &tape.backward(l).unwrap());
            (tape.value(l).item(), g)
        };
        let (_, grads) = f(&store);
        for stage_param in [enc.stages[0].weight, enc.stages[0].bias] {
            let mut probe = store.clone();
            let numeric = finite_diff_grad(
                |v| {
                    probe.set(stage_param, v.clone()).unwrap();
                    f(&probe).0
                },
                store.get(stage_param),
                1e-5,
            );
            assert!(relative_error(&grads[stage_param.index()], &numeric) < 1e-4);
        }
    }
}
