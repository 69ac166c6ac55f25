//! CCC for valence/arousal, F1 for AUs and emotions, and the composite score.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{contract, Error, Result};
use crate::loss::ExprLabel;
use crate::predlog::PredictionRow;
use crate::taskhead::{activate, N_AU, N_EXPR};

/// Concordance correlation coefficient with population moments.
///
/// Two identical constant series score 1; any other pair with zero
/// denominator scores 0.
pub fn ccc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(contract(format!(
            "ccc: {} predictions against {} targets",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 2 {
        return Err(contract("ccc needs at least 2 values"));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let vp = pred.iter().map(|p| (p - mp).powi(2)).sum::<f64>() / n;
    let vt = truth.iter().map(|t| (t - mt).powi(2)).sum::<f64>() / n;
    let cov = pred.iter().zip(truth).map(|(p, t)| (p - mp) * (t - mt)).sum::<f64>() / n;
    let denom = vp + vt + (mp - mt).powi(2);
    if denom == 0.0 {
        return Ok(if pred == truth { 1.0 } else { 0.0 });
    }
    Ok(2.0 * cov / denom)
}

/// How per-class F1 scores are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum F1Average {
    /// Unweighted mean over classes.
    #[default]
    Macro,
    /// F1 of the pooled confusion counts.
    Micro,
    /// Mean weighted by each class's number of positive targets.
    Weighted,
}

impl FromStr for F1Average {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Self::Macro),
            "micro" => Ok(Self::Micro),
            "weighted" => Ok(Self::Weighted),
            _ => Err(contract(format!("F1 averaging must be macro, micro or weighted, got {s:?}"))),
        }
    }
}

impl fmt::Display for F1Average {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Macro => "macro",
            Self::Micro => "micro",
            Self::Weighted => "weighted",
        })
    }
}

/// Confusion counts for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => {}
        }
    }

    /// `2TP / (2TP + FP + FN)`, or 1 when the class never occurs on either side.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

fn combine<const N: usize>(counts: &[Counts; N], average: F1Average) -> (f64, [f64; N]) {
    let per = counts.map(|c| c.f1());
    let score = match average {
        F1Average::Macro => per.iter().sum::<f64>() / N as f64,
        F1Average::Micro => {
            let pooled = counts.iter().fold(Counts::default(), |a, c| Counts {
                tp: a.tp + c.tp,
                fp: a.fp + c.fp,
                fn_: a.fn_ + c.fn_,
            });
            pooled.f1()
        }
        F1Average::Weighted => {
            let support: Vec<usize> = counts.iter().map(|c| c.tp + c.fn_).collect();
            let total: usize = support.iter().sum();
            if total == 0 {
                per.iter().sum::<f64>() / N as f64
            } else {
                per.iter().zip(&support).map(|(f, &s)| f * s as f64).sum::<f64>() / total as f64
            }
        }
    };
    (score, per)
}

/// Macro F1 over AUs binarized at `threshold`, plus per-AU scores.
pub fn au_f1(probs: &[[f64; N_AU]], truth: &[[f64; N_AU]], threshold: f64) -> Result<(f64, [f64; N_AU])> {
    au_f1_with(probs, truth, threshold, F1Average::Macro)
}

pub fn au_f1_with(
    probs: &[[f64; N_AU]],
    truth: &[[f64; N_AU]],
    threshold: f64,
    average: F1Average,
) -> Result<(f64, [f64; N_AU])> {
    if probs.len() != truth.len() {
        return Err(contract("au_f1: prediction and target counts differ"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(contract(format!("AU threshold {threshold} outside (0, 1)")));
    }
    let mut counts = [Counts::default(); N_AU];
    for (p, t) in probs.iter().zip(truth) {
        for k in 0..N_AU {
            counts[k].add(p[k] > threshold, t[k] >= 0.5);
        }
    }
    Ok(combine(&counts, average))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Macro F1 over emotion classes with argmax decisions, plus per-class scores.
pub fn expr_f1(probs: &[[f64; N_EXPR]], truth: &[usize]) -> Result<(f64, [f64; N_EXPR])> {
    expr_f1_with(probs, truth, F1Average::Macro)
}

pub fn expr_f1_with(probs: &[[f64; N_EXPR]], truth: &[usize], average: F1Average) -> Result<(f64, [f64; N_EXPR])> {
    if probs.len() != truth.len() {
        return Err(contract("expr_f1: prediction and target counts differ"));
    }
    let mut counts = [Counts::default(); N_EXPR];
    for (p, &t) in probs.iter().zip(truth) {
        if t >= N_EXPR {
            return Err(contract(format!("emotion class {t} out of range")));
        }
        let guess = argmax(p);
        for (k, c) in counts.iter_mut().enumerate() {
            c.add(guess == k, t == k);
        }
    }
    Ok(combine(&counts, average))
}

/// Sum of the three task metrics.
pub fn abaw4_score(au_f1: f64, expr_f1: f64, va_ccc: f64) -> f64 {
    au_f1 + expr_f1 + va_ccc
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub au_f1: f64,
    pub expr_f1: f64,
    /// Mean of valence and arousal CCC.
    pub va_ccc: f64,
    pub abaw4_score: f64,
    pub au_f1_per_au: [f64; N_AU],
    pub expr_f1_per_class: [f64; N_EXPR],
    pub valence_ccc: f64,
    pub arousal_ccc: f64,
    /// Labelled frames used for each task.
    pub n_va: usize,
    pub n_au: usize,
    pub n_expr: usize,
}

impl MetricReport {
    pub fn new(
        (au_f1, au_f1_per_au): (f64, [f64; N_AU]),
        (expr_f1, expr_f1_per_class): (f64, [f64; N_EXPR]),
        valence_ccc: f64,
        arousal_ccc: f64,
        [n_va, n_au, n_expr]: [usize; 3],
    ) -> Self {
        let va_ccc = (valence_ccc + arousal_ccc) / 2.0;
        Self {
            au_f1,
            expr_f1,
            va_ccc,
            abaw4_score: abaw4_score(au_f1, expr_f1, va_ccc),
            au_f1_per_au,
            expr_f1_per_class,
            valence_ccc,
            arousal_ccc,
            n_va,
            n_au,
            n_expr,
        }
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k}: {v}\n"));
        kv("au_f1", self.au_f1.to_string());
        kv("expr_f1", self.expr_f1.to_string());
        kv("va_ccc", self.va_ccc.to_string());
        kv("abaw4_score", self.abaw4_score.to_string());
        kv("valence_ccc", self.valence_ccc.to_string());
        kv("arousal_ccc", self.arousal_ccc.to_string());
        for (k, f) in self.au_f1_per_au.iter().enumerate() {
            kv(&format!("au_f1.{}", k + 1), f.to_string());
        }
        for (k, f) in self.expr_f1_per_class.iter().enumerate() {
            kv(&format!("expr_f1.{k}"), f.to_string());
        }
        kv("n_va", self.n_va.to_string());
        kv("n_au", self.n_au.to_string());
        kv("n_expr", self.n_expr.to_string());
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub threshold: f64,
    pub average: F1Average,
    /// Temperatures for rows that carry no probability columns.
    pub t_au: f64,
    pub t_expr: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            average: F1Average::Macro,
            t_au: 1.0,
            t_expr: 5.0,
        }
    }
}

/// Scores a prediction log against a manifest. Every labelled frame of the
/// manifest needs a prediction; each task uses only frames labelled for it.
pub fn evaluate(rows: &[PredictionRow], truth: &Dataset, opts: &EvalOptions) -> Result<MetricReport> {
    let index: HashMap<(&str, u64), &PredictionRow> =
        rows.iter().map(|r| ((r.video_id.as_str(), r.frame_index), r)).collect();
    let (mut v_pred, mut v_true, mut a_pred, mut a_true) = (vec![], vec![], vec![], vec![]);
    let (mut au_pred, mut au_true, mut ex_pred, mut ex_true) = (vec![], vec![], vec![], vec![]);
    for ex in &truth.examples {
        if ex.target.n_present() == 0 {
            continue;
        }
        let row = index.get(&(ex.video_id.as_str(), ex.frame_index)).ok_or_else(|| {
            contract(format!("no prediction for frame {} of video {:?}", ex.frame_index, ex.video_id))
        })?;
        let (au, expr) = match &row.probs {
            Some(p) => (p.au, p.expr),
            None => {
                let p = activate(&row.raw, opts.t_au, opts.t_expr)?;
                (p.au, p.expr)
            }
        };
        if let Some(va) = ex.target.va {
            v_pred.push(row.raw.va[0]);
            a_pred.push(row.raw.va[1]);
            v_true.push(va[0]);
            a_true.push(va[1]);
        }
        if let Some(t) = ex.target.au {
            au_pred.push(au);
            au_true.push(t);
        }
        match ex.target.expr {
            Some(ExprLabel::Class(c)) => {
                ex_pred.push(expr);
                ex_true.push(c);
            }
            Some(ExprLabel::Soft(_)) => return Err(contract("evaluation needs class emotion labels")),
            None => {}
        }
    }
    if au_true.is_empty() || ex_true.is_empty() {
        return Err(contract("evaluation needs at least one AU and one emotion label"));
    }
    Ok(MetricReport::new(
        au_f1_with(&au_pred, &au_true, opts.threshold, opts.average)?,
        expr_f1_with(&ex_pred, &ex_true, opts.average)?,
        ccc(&v_pred, &v_true)?,
        ccc(&a_pred, &a_true)?,
        [v_true.len(), au_true.len(), ex_true.len()],
    ))
}
