//! Synthetic videos whose labels are rendered into the pixels.
//!
//! Each frame draws latent factors (valence, arousal, 12 AU bits, one emotion
//! class) from its own seed, `sub_seed(master, video, frame)`. The image
//! draws three layers from those factors:
//!
//! * AU layer: a 4x4 grid of blocks whose first 12 (row-major) are bright
//!   where the matching AU is on; the bottom row stays mid-gray.
//! * VA layer: top-left quadrant brightness encodes valence, bottom-right
//!   encodes arousal.
//! * Emotion layer: a 2x4 grid of blocks with the class's block bright.
//!
//! Layer `l` goes to channel `l mod C` (layers sharing a channel are
//! averaged), then small uniform noise is added.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{Dataset, DatasetExample, ImageSource};
use crate::config::{num, parse_input, parse_pairs};
use crate::error::{contract, Error, Result};
use crate::loss::{ExprLabel, MultiTaskTarget};
use crate::taskhead::{N_AU, N_EXPR};
use crate::tensor::Tensor;

const NOISE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    /// Frame slots per video before dropping.
    pub frames_per_video: usize,
    pub image: (usize, usize, usize),
    /// Probability that each task's label is missing, `[va, au, expr]`.
    pub missing: [f64; 3],
    /// Probability that a frame slot is absent from its video.
    pub frame_drop: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_videos: 4,
            frames_per_video: 8,
            image: (32, 32, 3),
            missing: [0.0; 3],
            frame_drop: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0 || self.frames_per_video == 0 {
            return Err(contract("synthetic spec needs at least one video and one frame"));
        }
        let (h, w, c) = self.image;
        if h == 0 || w == 0 || c == 0 {
            return Err(contract("synthetic image dimensions must be positive"));
        }
        for r in self.missing.iter().chain([&self.frame_drop]) {
            if !(0.0..=1.0).contains(r) {
                return Err(contract(format!("rate {r} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines: `videos`, `frames_per_video`, `image`
    /// (`HxWxC`), `missing.va`, `missing.au`, `missing.expr`, `frame_drop`,
    /// `seed`.
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (line, key, value) in parse_pairs(text, origin)? {
            let res = match key.as_str() {
                "videos" => num(&key, &value).map(|v| spec.n_videos = v),
                "frames_per_video" => num(&key, &value).map(|v| spec.frames_per_video = v),
                "image" => parse_input(&value).map(|v| spec.image = v),
                "missing.va" => num(&key, &value).map(|v| spec.missing[0] = v),
                "missing.au" => num(&key, &value).map(|v| spec.missing[1] = v),
                "missing.expr" => num(&key, &value).map(|v| spec.missing[2] = v),
                "frame_drop" => num(&key, &value).map(|v| spec.frame_drop = v),
                "seed" => num(&key, &value).map(|v| spec.seed = v),
                _ => Err(contract(format!("unknown key {key:?}"))),
            };
            res.map_err(|e| Error::Parse {
                path: origin.to_string(),
                line,
                msg: e.to_string(),
            })?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-frame seed: `mix(mix(mix(master) ^ video) ^ frame)`.
pub fn sub_seed(master: u64, video: u64, frame: u64) -> u64 {
    mix64(mix64(mix64(master) ^ video) ^ frame)
}

/// Ground-truth factors behind one synthetic frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latent {
    pub va: [f64; 2],
    pub au: [bool; N_AU],
    pub expr: usize,
}

impl Latent {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let va = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        let au = std::array::from_fn(|_| rng.random_bool(0.5));
        let expr = rng.random_range(0..N_EXPR);
        Self { va, au, expr }
    }

    pub fn from_seed(sub_seed: u64) -> Self {
        Self::draw(&mut ChaCha8Rng::seed_from_u64(sub_seed))
    }

    pub fn target(&self) -> MultiTaskTarget {
        MultiTaskTarget {
            va: Some(self.va),
            au: Some(self.au.map(|b| f64::from(u8::from(b)))),
            expr: Some(ExprLabel::Class(self.expr)),
        }
    }

    fn layer(&self, layer: usize, y: usize, x: usize, h: usize, w: usize) -> f64 {
        match layer {
            0 => {
                let block = (y * 4 / h) * 4 + x * 4 / w;
                match self.au.get(block) {
                    Some(true) => 0.85,
                    Some(false) => 0.15,
                    None => 0.5,
                }
            }
            1 => match (y < h / 2, x < w / 2) {
                (true, true) => (self.va[0] + 1.0) / 2.0,
                (false, false) => (self.va[1] + 1.0) / 2.0,
                _ => 0.5,
            },
            _ => {
                let block = (y * 2 / h) * 4 + x * 4 / w;
                if block == self.expr {
                    0.9
                } else {
                    0.1
                }
            }
        }
    }
}

/// Renders the frame for `sub_seed` at `(h, w, c)`, values in `[0, 1]`.
pub fn render_synthetic(sub_seed: u64, (h, w, c): (usize, usize, usize)) -> Tensor {
    let latent = Latent::from_seed(sub_seed);
    let mut noise = ChaCha8Rng::seed_from_u64(mix64(sub_seed ^ 0x006e_6f69_7365));
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let (sum, n) = (0..3)
                    .filter(|l| l % c == ch)
                    .fold((0.0, 0), |(s, n), l| (s + latent.layer(l, y, x, h, w), n + 1));
                let base = if n == 0 { 0.5 } else { sum / n as f64 };
                let v = base + noise.random_range(-NOISE..NOISE);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new([h, w, c], data).expect("positive image dimensions")
}

/// Deterministic dataset for `spec`, with images referenced by seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut examples = Vec::new();
    for video in 0..spec.n_videos {
        for frame in 0..spec.frames_per_video {
            let seed = sub_seed(spec.seed, video as u64, frame as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let latent = Latent::draw(&mut rng);
            if rng.random::<f64>() < spec.frame_drop {
                continue;
            }
            let mut target = latent.target();
            if rng.random::<f64>() < spec.missing[0] {
                target.va = None;
            }
            if rng.random::<f64>() < spec.missing[1] {
                target.au = None;
            }
            if rng.random::<f64>() < spec.missing[2] {
                target.expr = None;
            }
            examples.push(DatasetExample {
                video_id: format!("v{video:03}"),
                frame_index: frame as u64,
                image: ImageSource::Synthetic(seed),
                target,
            });
        }
    }
    if examples.is_empty() {
        return Err(contract("every frame was dropped"));
    }
    Dataset::new(examples)
}
