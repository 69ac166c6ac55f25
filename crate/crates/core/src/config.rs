//! Model and training configuration, presets, and the `key = value` file
//! format.
//!
//! Files are line oriented: `# comment`, blank lines, and `dotted.key = value`
//! pairs. A `preset` line, wherever it appears, selects the base values; all
//! other keys then override it in file order.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Input image `(height, width, channels)`.
    pub input: (usize, usize, usize),
    /// `(output channels, stride)` for each 3x3 conv + relu stage.
    pub backbone: Vec<(usize, usize)>,
    pub d: usize,
    pub n_x: usize,
    pub heads: usize,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            input: (32, 32, 3),
            backbone: vec![(8, 2), (16, 2), (32, 2)],
            d: 32,
            n_x: 2,
            heads: 4,
        }
    }

    /// ResNet-scale geometry: 224x224x3 down to a 7x7x2048 grid, d = 768.
    pub fn paper() -> Self {
        Self {
            input: (224, 224, 3),
            backbone: vec![(64, 2), (256, 2), (512, 2), (1024, 2), (2048, 2)],
            d: 768,
            n_x: 2,
            heads: 12,
        }
    }

    pub fn total_stride(&self) -> usize {
        self.backbone.iter().map(|&(_, s)| s).product()
    }

    /// `(h', w')` of the patch grid.
    pub fn patch_grid(&self) -> (usize, usize) {
        let (h, w, _) = self.input;
        self.backbone
            .iter()
            .fold((h, w), |(h, w), &(_, s)| (conv_out(h, s), conv_out(w, s)))
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.last().map_or(self.input.2, |&(c, _)| c)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(contract("encoder input dimensions must be positive"));
        }
        if self.backbone.is_empty() || self.backbone.iter().any(|&(c, s)| c == 0 || s == 0) {
            return Err(contract("backbone needs at least one stage with positive width and stride"));
        }
        let s = self.total_stride();
        if h % s != 0 || w % s != 0 {
            return Err(contract(format!(
                "input {h}x{w} is not divisible by the backbone stride {s}"
            )));
        }
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return Err(contract(format!("encoder width d = {} must be even", self.d)));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(contract(format!(
                "encoder width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

fn conv_out(size: usize, stride: usize) -> usize {
    // 3x3 kernel, padding 1.
    (size - 1) / stride + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub n_t: usize,
    pub n_d: usize,
    pub heads: usize,
    pub t_au: f64,
    pub t_expr: f64,
    pub sigma2_va: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl HeadConfig {
    pub fn desk() -> Self {
        Self {
            n_t: 2,
            n_d: 2,
            heads: 4,
            t_au: 1.0,
            t_expr: 5.0,
            sigma2_va: 1.0,
        }
    }

    pub fn paper() -> Self {
        Self {
            n_d: 4,
            heads: 12,
            ..Self::desk()
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n_d == 0 {
            return Err(contract("each task needs at least one dense layer"));
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(contract(format!(
                "token width {d} is not divisible by {} heads",
                self.heads
            )));
        }
        for (name, v) in [("t_au", self.t_au), ("t_expr", self.t_expr), ("sigma2_va", self.sigma2_va)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(contract(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            head: HeadConfig::desk(),
        }
    }

    pub fn paper() -> Self {
        Self {
            encoder: EncoderConfig::paper(),
            head: HeadConfig::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate(self.encoder.d)
    }
}

/// How per-task losses are normalized across a batch with missing labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reweight {
    /// Each example's present task losses are averaged, then examples are
    /// averaged.
    #[default]
    PerExample,
    /// Each task is averaged over the examples that carry it, then tasks are
    /// summed.
    PerTask,
}

impl FromStr for Reweight {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_example" => Ok(Self::PerExample),
            "per_task" => Ok(Self::PerTask),
            _ => Err(contract(format!("unknown reweight mode {s:?}"))),
        }
    }
}

impl Reweight {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PerExample => "per_example",
            Self::PerTask => "per_task",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub sigma2_va: f64,
    pub t_au: f64,
    pub t_expr: f64,
    pub reweight: Reweight,
}

impl Default for LossConfig {
    fn default() -> Self {
        HeadConfig::desk().loss(Reweight::PerExample)
    }
}

impl HeadConfig {
    pub fn loss(&self, reweight: Reweight) -> LossConfig {
        LossConfig {
            sigma2_va: self.sigma2_va,
            t_au: self.t_au,
            t_expr: self.t_expr,
            reweight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            _ => Err(contract(format!("unknown preset {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub steps: usize,
    /// Beta(alpha, alpha) MixUp when set.
    pub mixup: Option<f64>,
    pub augment: bool,
    pub reweight: Reweight,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let model = match preset {
            Preset::Desk => ModelConfig::desk(),
            Preset::Paper => ModelConfig::paper(),
        };
        Self {
            preset,
            model,
            optimizer: OptimizerConfig::default(),
            batch_size: 8,
            steps: 2000,
            mixup: None,
            augment: false,
            reweight: Reweight::PerExample,
            seed: 0,
            log_every: 100,
        }
    }

    pub fn loss(&self) -> LossConfig {
        self.model.head.loss(self.reweight)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return Err(contract("learning rate must be finite and non-negative"));
        }
        if self.steps == 0 {
            return Err(contract("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(contract("batch size must be at least 1"));
        }
        if let Some(alpha) = self.mixup {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(contract("mixup alpha must be positive"));
            }
        }
        Ok(())
    }

    /// Parses a config file body. `origin` names the source in errors.
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let pairs = parse_pairs(text, origin)?;
        let preset = pairs
            .iter()
            .find(|(_, k, _)| k == "preset")
            .map(|(line, _, v)| v.parse().map_err(|e: Error| at(origin, *line, e)))
            .transpose()?
            .unwrap_or(Preset::Desk);
        let mut config = Self::preset(preset);
        for (line, key, value) in &pairs {
            if key != "preset" {
                config.set(key, value).map_err(|e| at(origin, *line, e))?;
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let enc = &mut self.model.encoder;
        let head = &mut self.model.head;
        let opt = &mut self.optimizer;
        match key {
            "preset" => *self = Self::preset(value.parse()?),
            "seed" => self.seed = num(key, value)?,
            "encoder.input" => enc.input = parse_input(value)?,
            "encoder.backbone" => enc.backbone = parse_backbone(value)?,
            "encoder.d" => enc.d = num(key, value)?,
            "encoder.n_x" => enc.n_x = num(key, value)?,
            "encoder.heads" => enc.heads = num(key, value)?,
            "head.n_t" => head.n_t = num(key, value)?,
            "head.n_d" => head.n_d = num(key, value)?,
            "head.heads" => head.heads = num(key, value)?,
            "head.t_au" => head.t_au = num(key, value)?,
            "head.t_expr" => head.t_expr = num(key, value)?,
            "head.sigma2_va" => head.sigma2_va = num(key, value)?,
            "optim.kind" => {
                opt.kind = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(contract(format!("unknown optimizer {value:?}"))),
                }
            }
            "optim.lr" => opt.lr = num(key, value)?,
            "optim.beta1" => opt.beta1 = num(key, value)?,
            "optim.beta2" => opt.beta2 = num(key, value)?,
            "optim.eps" => opt.eps = num(key, value)?,
            "train.batch_size" => self.batch_size = num(key, value)?,
            "train.steps" => self.steps = num(key, value)?,
            "train.mixup" => {
                self.mixup = match value {
                    "off" => None,
                    v => Some(num(key, v)?),
                }
            }
            "train.augment" => self.augment = parse_switch(key, value)?,
            "train.log_every" => self.log_every = num(key, value)?,
            "loss.reweight" => self.reweight = value.parse()?,
            _ => return Err(contract(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Canonical rendering; `from_text(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let enc = &self.model.encoder;
        let head = &self.model.head;
        let opt = &self.optimizer;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv(
            "preset",
            match self.preset {
                Preset::Desk => "desk",
                Preset::Paper => "paper",
            }
            .into(),
        );
        kv("seed", self.seed.to_string());
        kv("encoder.input", format!("{}x{}x{}", enc.input.0, enc.input.1, enc.input.2));
        kv(
            "encoder.backbone",
            enc.backbone
                .iter()
                .map(|(c, s)| format!("{c}:{s}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("encoder.d", enc.d.to_string());
        kv("encoder.n_x", enc.n_x.to_string());
        kv("encoder.heads", enc.heads.to_string());
        kv("head.n_t", head.n_t.to_string());
        kv("head.n_d", head.n_d.to_string());
        kv("head.heads", head.heads.to_string());
        kv("head.t_au", head.t_au.to_string());
        kv("head.t_expr", head.t_expr.to_string());
        kv("head.sigma2_va", head.sigma2_va.to_string());
        kv(
            "optim.kind",
            match opt.kind {
                OptimizerKind::Adam => "adam",
                OptimizerKind::Sgd => "sgd",
            }
            .into(),
        );
        kv("optim.lr", opt.lr.to_string());
        kv("optim.beta1", opt.beta1.to_string());
        kv("optim.beta2", opt.beta2.to_string());
        kv("optim.eps", opt.eps.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.steps", self.steps.to_string());
        kv("train.mixup", self.mixup.map_or("off".into(), |a| a.to_string()));
        kv("train.augment", if self.augment { "on" } else { "off" }.into());
        kv("train.log_every", self.log_every.to_string());
        kv("loss.reweight", self.reweight.as_str().into());
        s
    }
}

/// `(line number, key, value)` for every assignment line.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg: format!("expected `key = value`, got {line:?}"),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn at(origin: &str, line: usize, e: Error) -> Error {
    Error::Parse {
        path: origin.to_string(),
        line,
        msg: e.to_string(),
    }
}

pub(crate) fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| contract(format!("{key}: cannot parse {value:?}")))
}

pub(crate) fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(contract(format!("{key}: expected on/off, got {value:?}"))),
    }
}

/// `HxWxC`.
pub(crate) fn parse_input(value: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = value
        .split('x')
        .map(|p| num("input", p.trim()))
        .collect::<Result<_>>()?;
    match parts[..] {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(contract(format!("expected HxWxC, got {value:?}"))),
    }
}

/// `channels:stride,channels:stride,...`.
fn parse_backbone(value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(|stage| {
            let (c, s) = stage
                .split_once(':')
                .ok_or_else(|| contract(format!("backbone stage {stage:?} is not channels:stride")))?;
            Ok((num("backbone", c.trim())?, num("backbone", s.trim())?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_geometry() {
        let c = EncoderConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.patch_grid(), (4, 4));
        assert_eq!(c.feature_channels(), 32);
    }

    #[test]
    fn paper_geometry() {
        let c = ModelConfig::paper();
        c.validate().unwrap();
        assert_eq!(c.encoder.patch_grid(), (7, 7));
        assert_eq!(c.encoder.feature_channels(), 2048);
        assert_eq!(c.encoder.d, 768);
        assert_eq!((c.encoder.n_x, c.encoder.heads), (2, 12));
        assert_eq!((c.head.n_t, c.head.n_d, c.head.heads), (2, 4, 12));
        assert_eq!((c.head.t_au, c.head.t_expr, c.head.sigma2_va), (1.0, 5.0, 1.0));
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.mixup = Some(0.4);
        c.optimizer.lr = 3e-4;
        c.reweight = Reweight::PerTask;
        let parsed = TrainConfig::from_text(&c.to_text(), "mem").unwrap();
        assert_eq!(parsed, c);
        assert_eq!(parsed.to_text(), c.to_text());
    }

    #[test]
    fn preset_applies_before_other_keys() {
        let c = TrainConfig::from_text("head.t_expr = 2\npreset = paper\n", "mem").unwrap();
        assert_eq!(c.model.encoder.d, 768);
        assert_eq!(c.model.head.t_expr, 2.0);
    }

    #[test]
    fn errors_name_the_line() {
        let err = TrainConfig::from_text("seed = 1\nbogus.key = 3\n", "cfg.txt").unwrap_err();
        assert!(err.to_string().starts_with("cfg.txt:2:"), "{err}");
        assert!(TrainConfig::from_text("no equals sign", "x").is_err());
        assert!(TrainConfig::from_text("train.steps = 0", "x").is_err());
        assert!(TrainConfig::from_text("head.t_au = -1", "x").is_err());
        assert!(TrainConfig::from_text("encoder.heads = 3", "x").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = TrainConfig::from_text("# hi\n\nhead.t_expr = 5 # paper value\ntrain.mixup = 0.2\n", "x").unwrap();
        assert_eq!(c.mixup, Some(0.2));
    }
}
