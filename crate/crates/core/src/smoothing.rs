//! Windowed temporal means of per-frame raw outputs within each video.
//!
//! VA outputs and AU/emotion logits are averaged over the frames present in
//! the window, then activated. Missing frame indices simply contribute
//! nothing.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{contract, Error, Result};
use crate::predlog::{PredictionRow, Probabilities};
use crate::taskhead::{activate, Predictions, RawOutputs, N_AU, N_EXPR, N_VA};

const WIDTH: usize = N_VA + N_AU + N_EXPR;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub video_id: String,
    pub frame_index: u64,
    pub raw: RawOutputs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedRecord {
    pub video_id: String,
    pub frame_index: u64,
    /// Window means of the raw outputs.
    pub raw: RawOutputs,
    pub predictions: Predictions,
}

impl From<&SmoothedRecord> for PredictionRow {
    fn from(r: &SmoothedRecord) -> Self {
        PredictionRow {
            video_id: r.video_id.clone(),
            frame_index: r.frame_index,
            raw: r.raw,
            probs: Some(Probabilities {
                au: r.predictions.au,
                expr: r.predictions.expr,
            }),
        }
    }
}

impl From<&PredictionRow> for FrameRecord {
    fn from(r: &PredictionRow) -> Self {
        FrameRecord {
            video_id: r.video_id.clone(),
            frame_index: r.frame_index,
            raw: r.raw,
        }
    }
}

/// Where the window sits relative to the frame being smoothed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Align {
    /// `[t − ⌊S/2⌋, t + ⌊S/2⌋]` for odd `S`, `[t − S/2, t + S/2 − 1]` for even.
    #[default]
    Centered,
    /// `[t − S + 1, t]`, using past frames only.
    Trailing,
}

impl FromStr for Align {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centered" => Ok(Self::Centered),
            "trailing" => Ok(Self::Trailing),
            _ => Err(contract(format!("alignment must be centered or trailing, got {s:?}"))),
        }
    }
}

impl fmt::Display for Align {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Centered => "centered",
            Self::Trailing => "trailing",
        })
    }
}

/// Inclusive frame-index range of the window around `t`, in signed indices.
pub fn window_bounds(t: u64, window: usize, align: Align) -> (i128, i128) {
    let (t, s) = (i128::from(t), window as i128);
    match align {
        Align::Centered => (t - s / 2, t + (s - 1) / 2),
        Align::Trailing => (t - s + 1, t),
    }
}

fn flatten(r: &RawOutputs) -> [f64; WIDTH] {
    let mut out = [0.0; WIDTH];
    for (o, v) in out.iter_mut().zip(r.va.iter().chain(&r.au).chain(&r.expr)) {
        *o = *v;
    }
    out
}

fn unflatten(v: &[f64; WIDTH]) -> RawOutputs {
    RawOutputs {
        va: v[..N_VA].try_into().expect("va width"),
        au: v[N_VA..N_VA + N_AU].try_into().expect("au width"),
        expr: v[N_VA + N_AU..].try_into().expect("expr width"),
    }
}

/// Smooths every video independently. Output order matches input order.
pub fn smooth_stream(
    frames: &[FrameRecord],
    window: usize,
    align: Align,
    t_au: f64,
    t_expr: f64,
) -> Result<Vec<SmoothedRecord>> {
    if window < 1 {
        return Err(contract("smoothing window must be at least 1"));
    }
    let mut videos: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut seen = HashSet::new();
    for (i, f) in frames.iter().enumerate() {
        if !seen.insert((f.video_id.as_str(), f.frame_index)) {
            return Err(contract(format!(
                "duplicate frame {} of video {:?}",
                f.frame_index, f.video_id
            )));
        }
        videos.entry(&f.video_id).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = videos.into_values().collect();

    let smoothed: Vec<Vec<(usize, RawOutputs)>> = groups
        .into_par_iter()
        .map(|mut idx| {
            idx.sort_by_key(|&i| frames[i].frame_index);
            let keys: Vec<i128> = idx.iter().map(|&i| i128::from(frames[i].frame_index)).collect();
            let rows: Vec<[f64; WIDTH]> = idx.iter().map(|&i| flatten(&frames[i].raw)).collect();
            idx.iter()
                .map(|&i| {
                    let (lo, hi) = window_bounds(frames[i].frame_index, window, align);
                    let start = keys.partition_point(|&k| k < lo);
                    let end = keys.partition_point(|&k| k <= hi);
                    let mut sum = [0.0; WIDTH];
                    for r in &rows[start..end] {
                        for (s, v) in sum.iter_mut().zip(r) {
                            *s += v;
                        }
                    }
                    let n = (end - start) as f64;
                    (i, unflatten(&sum.map(|s| s / n)))
                })
                .collect()
        })
        .collect();

    let mut out: Vec<Option<SmoothedRecord>> = vec![None; frames.len()];
    for (i, raw) in smoothed.into_iter().flatten() {
        let f = &frames[i];
        out[i] = Some(SmoothedRecord {
            video_id: f.video_id.clone(),
            frame_index: f.frame_index,
            raw,
            predictions: activate(&raw, t_au, t_expr)?,
        });
    }
    Ok(out.into_iter().map(|r| r.expect("every frame smoothed")).collect())
}
