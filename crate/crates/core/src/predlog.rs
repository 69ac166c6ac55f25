//! Prediction logs: one CSV row per frame with raw outputs and, after
//! smoothing, the activated probabilities.
//!
//! Columns are `video_id, frame_index, v, a, u_au_1..u_au_12,
//! u_expr_1..u_expr_8`, optionally followed by `a_hat_1..a_hat_12,
//! e_hat_1..e_hat_8`. Floats carry 9 significant digits.

use std::fs;
use std::path::Path;

use crate::error::{contract, Error, Result};
use crate::taskhead::{RawOutputs, N_AU, N_EXPR, N_VA};

const RAW_COLUMNS: usize = N_VA + N_AU + N_EXPR;
const PROB_COLUMNS: usize = N_AU + N_EXPR;

/// Activated AU and emotion probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probabilities {
    pub au: [f64; N_AU],
    pub expr: [f64; N_EXPR],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub video_id: String,
    pub frame_index: u64,
    pub raw: RawOutputs,
    pub probs: Option<Probabilities>,
}

pub fn header(with_probs: bool) -> Vec<String> {
    let mut h = vec!["video_id".to_string(), "frame_index".into(), "v".into(), "a".into()];
    h.extend((1..=N_AU).map(|k| format!("u_au_{k}")));
    h.extend((1..=N_EXPR).map(|k| format!("u_expr_{k}")));
    if with_probs {
        h.extend((1..=N_AU).map(|k| format!("a_hat_{k}")));
        h.extend((1..=N_EXPR).map(|k| format!("e_hat_{k}")));
    }
    h
}

/// Formats `v` with 9 significant digits, in the style of C's `%.9g`.
pub fn format_float(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let exp = v.abs().log10().floor() as i32;
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-5..9).contains(&exp) {
        trim(format!("{:.*}", (8 - exp) as usize, v))
    } else {
        let s = format!("{v:.8e}");
        let (mantissa, e) = s.split_once('e').expect("exponent form");
        format!("{}e{e}", trim(mantissa.to_string()))
    }
}

/// Writes `rows` as CSV. Either every row carries probabilities or none does.
pub fn to_csv(rows: &[PredictionRow]) -> Result<String> {
    let with_probs = rows.first().is_some_and(|r| r.probs.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(with_probs))?;
    for r in rows {
        if r.probs.is_some() != with_probs {
            return Err(contract("prediction log mixes rows with and without probabilities"));
        }
        let mut rec = vec![r.video_id.clone(), r.frame_index.to_string()];
        let mut floats: Vec<f64> = r.raw.va.iter().chain(&r.raw.au).chain(&r.raw.expr).copied().collect();
        if let Some(p) = &r.probs {
            floats.extend(p.au.iter().chain(&p.expr));
        }
        rec.extend(floats.into_iter().map(format_float));
        w.write_record(rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("CSV of UTF-8 fields"))
}

pub fn from_csv(text: &str, origin: &str) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let head: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let with_probs = if head == header(false) {
        false
    } else if head == header(true) {
        true
    } else {
        return Err(Error::Parse {
            path: origin.into(),
            line: 1,
            msg: "unrecognised prediction-log header".into(),
        });
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |msg: String| Error::Parse {
            path: origin.into(),
            line,
            msg,
        };
        let frame_index = rec[1]
            .parse()
            .map_err(|_| bad(format!("bad frame index {:?}", &rec[1])))?;
        let floats = rec
            .iter()
            .skip(2)
            .map(|f| f.trim().parse::<f64>().map_err(|_| bad(format!("bad number {f:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        let want = RAW_COLUMNS + if with_probs { PROB_COLUMNS } else { 0 };
        if floats.len() != want {
            return Err(bad(format!("expected {want} numbers, got {}", floats.len())));
        }
        let take = |range: std::ops::Range<usize>| floats[range].to_vec();
        let raw = RawOutputs {
            va: take(0..N_VA).try_into().expect("va width"),
            au: take(N_VA..N_VA + N_AU).try_into().expect("au width"),
            expr: take(N_VA + N_AU..RAW_COLUMNS).try_into().expect("expr width"),
        };
        let probs = with_probs.then(|| Probabilities {
            au: take(RAW_COLUMNS..RAW_COLUMNS + N_AU).try_into().expect("au width"),
            expr: take(RAW_COLUMNS + N_AU..want).try_into().expect("expr width"),
        });
        rows.push(PredictionRow {
            video_id: rec[0].to_string(),
            frame_index,
            raw,
            probs,
        });
    }
    Ok(rows)
}

pub fn write(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    fs::write(path, to_csv(rows)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<PredictionRow>> {
    from_csv(&fs::read_to_string(path)?, &path.display().to_string())
}
