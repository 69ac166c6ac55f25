//! Binary checkpoints: the training config plus every named parameter as
//! little-endian `f32`.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MTTK" | u32 version | u32 len, config text (UTF-8)
//! u32 parameter count, then per parameter:
//!   u32 len, name (UTF-8) | u32 ndim | u64 dims... | f32 values...
//! ```

use std::fs;
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MTTK";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Config text exactly as stored, so a reload saves the same bytes.
    pub config_text: String,
    pub config: TrainConfig,
    pub model: Model,
}

impl Checkpoint {
    /// Parameters are stored at `f32` precision; the in-memory model is
    /// rounded to match.
    pub fn new(config: TrainConfig, mut model: Model) -> Self {
        model.round_to_f32();
        Self {
            config_text: config.to_text(),
            config,
            model,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put_u32 = |out: &mut Vec<u8>, v: usize| {
            out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes())
        };
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.config_text.len());
        out.extend_from_slice(self.config_text.as_bytes());
        put_u32(&mut out, self.model.params.len());
        for (_, name, t) in self.model.params.iter() {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.ndim());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let config_text = r.string()?;
        let config = TrainConfig::from_text(&config_text, "checkpoint config")?;
        let mut model = Model::skeleton(config.model.clone())?;
        let n = r.u32()? as usize;
        if n != model.params.len() {
            return Err(bad(format!("{n} parameters stored, model has {}", model.params.len())));
        }
        let mut filled = vec![false; n];
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| bad(format!("unknown parameter {name:?}")))?;
            if std::mem::replace(&mut filled[id.index()], true) {
                return Err(bad(format!("parameter {name:?} stored twice")));
            }
            model.params.set(id, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after the last parameter"));
        }
        Ok(Self {
            config_text,
            config,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::suite_config;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let config = TrainConfig {
            model: suite_config(),
            seed: 11,
            ..TrainConfig::default()
        };
        let model = Model::init(config.model.clone(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        Checkpoint::new(config, model)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.model.params.tensors(), ck.model.params.tensors());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }

    #[test]
    fn predictions_survive_a_reload() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let image = Tensor::uniform([8, 8, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(ck.model.predict(&image).unwrap(), back.model.predict(&image).unwrap());
    }
}
