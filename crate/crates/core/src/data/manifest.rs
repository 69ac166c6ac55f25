use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synthetic::render_synthetic;
use crate::error::{contract, Error, Result};
use crate::loss::{ExprLabel, MultiTaskTarget};
use crate::taskhead::{N_AU, N_EXPR, N_VA};
use crate::tensor::Tensor;

const SYNTHETIC_PREFIX: &str = "synthetic:";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageSource {
    /// Regenerated on demand from a per-example seed.
    Synthetic(u64),
    /// An image file, relative paths resolved against the manifest directory.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetExample {
    pub video_id: String,
    pub frame_index: u64,
    pub image: ImageSource,
    pub target: MultiTaskTarget,
}

/// Examples keyed uniquely by `(video_id, frame_index)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub examples: Vec<DatasetExample>,
    /// Directory that relative image paths are resolved against.
    pub base_dir: PathBuf,
}

/// One manifest line.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    video_id: String,
    frame_index: u64,
    image: String,
    va: Option<[f64; N_VA]>,
    au: Option<[u8; N_AU]>,
    expr: Option<u8>,
}

impl Dataset {
    pub fn new(examples: Vec<DatasetExample>) -> Result<Self> {
        let ds = Self {
            examples,
            base_dir: PathBuf::new(),
        };
        ds.check_unique()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for ex in &self.examples {
            if !seen.insert((ex.video_id.as_str(), ex.frame_index)) {
                return Err(contract(format!(
                    "duplicate frame {} of video {:?}",
                    ex.frame_index, ex.video_id
                )));
            }
        }
        Ok(())
    }

    /// Serializes to JSON lines.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(&to_record(ex)?)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, origin: &str) -> Result<Self> {
        let mut examples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let rec: Record = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            examples.push(from_record(rec).map_err(|e| parse_err(e.to_string()))?);
        }
        Self::new(examples)
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn read_manifest(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut ds = Self::from_jsonl(&text, &path.display().to_string())?;
        ds.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(ds)
    }

    /// Loads or renders the image of `ex` at `(h, w, c)`.
    pub fn image(&self, ex: &DatasetExample, dims: (usize, usize, usize)) -> Result<Tensor> {
        match &ex.image {
            ImageSource::Synthetic(seed) => Ok(render_synthetic(*seed, dims)),
            ImageSource::File(p) => load_image(&self.base_dir.join(p), dims),
        }
    }
}

fn to_record(ex: &DatasetExample) -> Result<Record> {
    let image = match &ex.image {
        ImageSource::Synthetic(seed) => format!("{SYNTHETIC_PREFIX}{seed}"),
        ImageSource::File(p) => p.to_string_lossy().into_owned(),
    };
    let au = ex
        .target
        .au
        .map(|au| {
            au.iter()
                .map(|&v| match v {
                    0.0 => Ok(0u8),
                    1.0 => Ok(1u8),
                    _ => Err(contract("manifest AU labels must be 0 or 1")),
                })
                .collect::<Result<Vec<u8>>>()
                .map(|v| v.try_into().expect("12 AUs"))
        })
        .transpose()?;
    let expr = match ex.target.expr {
        None => None,
        Some(ExprLabel::Class(c)) if c < N_EXPR => Some(c as u8),
        Some(_) => return Err(contract("manifest emotion labels must be class indices 0..7")),
    };
    Ok(Record {
        video_id: ex.video_id.clone(),
        frame_index: ex.frame_index,
        image,
        va: ex.target.va,
        au,
        expr,
    })
}

fn from_record(rec: Record) -> Result<DatasetExample> {
    let image = match rec.image.strip_prefix(SYNTHETIC_PREFIX) {
        Some(seed) => ImageSource::Synthetic(
            seed.parse()
                .map_err(|_| contract(format!("bad synthetic seed {seed:?}")))?,
        ),
        None => ImageSource::File(PathBuf::from(rec.image)),
    };
    if let Some(au) = &rec.au {
        if au.iter().any(|&v| v > 1) {
            return Err(contract("AU labels must be 0 or 1"));
        }
    }
    if let Some(va) = &rec.va {
        if va.iter().any(|v| !v.is_finite()) {
            return Err(contract("VA labels must be finite"));
        }
    }
    let expr = match rec.expr {
        Some(c) if usize::from(c) < N_EXPR => Some(ExprLabel::Class(c.into())),
        Some(c) => return Err(contract(format!("emotion class {c} out of range 0..7"))),
        None => None,
    };
    Ok(DatasetExample {
        video_id: rec.video_id,
        frame_index: rec.frame_index,
        image,
        target: MultiTaskTarget {
            va: rec.va,
            au: rec.au.map(|a| a.map(f64::from)),
            expr,
        },
    })
}

/// Reads a PNG or PNM file as `[h, w, c]` floats in `[0, 1]`; `c` is 1 (gray)
/// or 3 (RGB). The file must already have the requested size.
pub fn load_image(path: &Path, (h, w, c): (usize, usize, usize)) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    if (img.height() as usize, img.width() as usize) != (h, w) {
        return Err(Error::Shape {
            op: "load_image",
            lhs: vec![img.height() as usize, img.width() as usize],
            rhs: vec![h, w],
        });
    }
    let bytes = match c {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        _ => return Err(contract(format!("images must have 1 or 3 channels, not {c}"))),
    };
    Tensor::new([h, w, c], bytes.into_iter().map(|b| f64::from(b) / 255.0).collect())
}

/// Writes an `[h, w, 1]` or `[h, w, 3]` image in `[0, 1]` as 8-bit PNG.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let [h, w, c] = image.shape()[..] else {
        return Err(contract(format!("expected an [h, w, c] image, got {:?}", image.shape())));
    };
    let color = match c {
        1 => image::ColorType::L8,
        3 => image::ColorType::Rgb8,
        _ => return Err(contract(format!("images must have 1 or 3 channels, not {c}"))),
    };
    let bytes: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, w as u32, h as u32, color).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(video: &str, frame: u64) -> DatasetExample {
        DatasetExample {
            video_id: video.into(),
            frame_index: frame,
            image: ImageSource::Synthetic(17),
            target: MultiTaskTarget {
                va: Some([0.25, -0.5]),
                au: Some(std::array::from_fn(|i| (i % 2) as f64)),
                expr: Some(ExprLabel::Class(7)),
            },
        }
    }

    #[test]
    fn manifest_round_trip() {
        let mut partial = example("b", 4);
        partial.target.au = None;
        partial.image = ImageSource::File("img/b_4.png".into());
        let ds = Dataset::new(vec![example("a", 0), partial]).unwrap();
        let text = ds.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"image\":\"synthetic:17\""));
        assert!(text.contains("\"au\":null"));
        assert_eq!(Dataset::from_jsonl(&text, "m").unwrap(), ds);
    }

    #[test]
    fn duplicate_frames_rejected() {
        assert!(Dataset::new(vec![example("a", 1), example("a", 1)]).is_err());
        assert!(Dataset::new(vec![example("a", 1), example("b", 1)]).is_ok());
    }

    #[test]
    fn bad_records_report_line() {
        let good = Dataset::new(vec![example("a", 0)]).unwrap().to_jsonl().unwrap();
        let bad = format!("{good}{}", good.replace("\"expr\":7", "\"expr\":9").replace("\"a\"", "\"z\""));
        let err = Dataset::from_jsonl(&bad, "m.jsonl").unwrap_err().to_string();
        assert!(err.starts_with("m.jsonl:2:"), "{err}");
        assert!(Dataset::from_jsonl("{not json", "m").is_err());
    }

    #[test]
    fn soft_labels_cannot_be_written() {
        let mut ex = example("a", 0);
        ex.target.expr = Some(ExprLabel::Soft([0.125; 8]));
        assert!(Dataset::new(vec![ex]).unwrap().to_jsonl().is_err());
    }

    #[test]
    fn loads_png_images() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = image::RgbImage::from_fn(4, 2, |x, y| image::Rgb([(x * 60) as u8, (y * 255) as u8, 0]));
        img.save(&path).unwrap();
        let t = load_image(&path, (2, 4, 3)).unwrap();
        assert_eq!(t.at(&[1, 3, 0]), 180.0 / 255.0);
        assert_eq!(t.at(&[1, 0, 1]), 1.0);
        assert!(load_image(&path, (4, 4, 3)).is_err());
        let gray = load_image(&path, (2, 4, 1)).unwrap();
        assert_eq!(gray.shape(), &[2, 4, 1]);
        let out = dir.path().join("y.png");
        save_image(&out, &t).unwrap();
        assert_eq!(load_image(&out, (2, 4, 3)).unwrap(), t);
    }
}
