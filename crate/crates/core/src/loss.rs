//! Uncertainty-weighted multi-task loss with missing-label masking.
//!
//! ```text
//! L_va   = MSE(v̂, va) / (2 σ²_va)
//! L_au   = BCE(σ(u_au / T_au), au) / (2 T_au)
//! L_expr = CCE(softmax(u_expr / T_expr), expr) / T_expr
//! ```
//!
//! MSE averages the two VA components and BCE averages the 12 AUs. Both
//! classification losses are evaluated on temperature-scaled logits, in
//! log-space.

use serde::{Deserialize, Serialize};

use crate::config::{LossConfig, Reweight};
use crate::error::{contract, Result};
use crate::taskhead::{RawOutputVars, N_AU, N_EXPR, N_VA};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Emotion supervision: a class index, or a distribution after MixUp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ExprLabel {
    Class(usize),
    Soft([f64; N_EXPR]),
}

impl ExprLabel {
    pub fn distribution(&self) -> Result<[f64; N_EXPR]> {
        match *self {
            Self::Class(c) if c < N_EXPR => {
                let mut q = [0.0; N_EXPR];
                q[c] = 1.0;
                Ok(q)
            }
            Self::Class(c) => Err(contract(format!("emotion class {c} out of range 0..{N_EXPR}"))),
            Self::Soft(q) => {
                if q.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(contract("soft emotion label outside [0, 1]"));
                }
                Ok(q)
            }
        }
    }
}

/// Per-example labels; `None` marks a missing annotation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MultiTaskTarget {
    pub va: Option<[f64; N_VA]>,
    /// Binary for real annotations, in `[0, 1]` after MixUp.
    pub au: Option<[f64; N_AU]>,
    pub expr: Option<ExprLabel>,
}

impl MultiTaskTarget {
    /// `[va, au, expr]` presence.
    pub fn presence(&self) -> [bool; 3] {
        [self.va.is_some(), self.au.is_some(), self.expr.is_some()]
    }

    pub fn n_present(&self) -> usize {
        self.presence().iter().filter(|&&p| p).count()
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(contract(format!("{name} must be positive, got {v}")))
    }
}

pub fn va_loss_var(tape: &mut Tape, v_hat: Var, va: &[f64; N_VA], sigma2_va: f64) -> Result<Var> {
    check_positive("sigma2_va", sigma2_va)?;
    let target = tape.leaf(Tensor::vector(va.to_vec()))?;
    let diff = tape.sub(v_hat, target)?;
    let sq = tape.mul(diff, diff)?;
    let mse = tape.mean(sq)?;
    tape.scale(mse, 1.0 / (2.0 * sigma2_va))
}

/// Stable logit-form BCE: `softplus(z) − z·y` with `z = u / T_au`.
pub fn au_loss_var(tape: &mut Tape, u_au: Var, au: &[f64; N_AU], t_au: f64) -> Result<Var> {
    check_positive("T_au", t_au)?;
    let z = tape.scale(u_au, 1.0 / t_au)?;
    let sp = tape.softplus(z)?;
    let y = tape.leaf(Tensor::vector(au.to_vec()))?;
    let zy = tape.mul(z, y)?;
    let bce = tape.sub(sp, zy)?;
    let bce = tape.mean(bce)?;
    tape.scale(bce, 1.0 / (2.0 * t_au))
}

/// `−Σ_c q_c · log softmax(u / T)[c] / T`.
pub fn expr_loss_var(tape: &mut Tape, u_expr: Var, expr: &ExprLabel, t_expr: f64) -> Result<Var> {
    check_positive("T_expr", t_expr)?;
    let q = expr.distribution()?;
    let z = tape.scale(u_expr, 1.0 / t_expr)?;
    let log_p = tape.log_softmax(z, 0)?;
    let q = tape.leaf(Tensor::vector(q.to_vec()))?;
    let ce = tape.dot(log_p, q)?;
    tape.scale(ce, -1.0 / t_expr)
}

fn eval(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    Ok(tape.value(out).item())
}

pub fn va_loss(v_hat: &[f64; N_VA], va: &[f64; N_VA], sigma2_va: f64) -> Result<f64> {
    eval(|t| {
        let v = t.leaf(Tensor::vector(v_hat.to_vec()))?;
        va_loss_var(t, v, va, sigma2_va)
    })
}

pub fn au_loss(u_au: &[f64; N_AU], au: &[f64; N_AU], t_au: f64) -> Result<f64> {
    eval(|t| {
        let u = t.leaf(Tensor::vector(u_au.to_vec()))?;
        au_loss_var(t, u, au, t_au)
    })
}

pub fn expr_loss(u_expr: &[f64; N_EXPR], expr: &ExprLabel, t_expr: f64) -> Result<f64> {
    eval(|t| {
        let u = t.leaf(Tensor::vector(u_expr.to_vec()))?;
        expr_loss_var(t, u, expr, t_expr)
    })
}

/// Loss terms of the tasks present in `target`, in `[va, au, expr]` order.
fn task_terms(
    tape: &mut Tape,
    out: &RawOutputVars,
    target: &MultiTaskTarget,
    cfg: &LossConfig,
) -> Result<[Option<Var>; 3]> {
    Ok([
        target.va.as_ref().map(|va| va_loss_var(tape, out.va, va, cfg.sigma2_va)).transpose()?,
        target.au.as_ref().map(|au| au_loss_var(tape, out.au, au, cfg.t_au)).transpose()?,
        target.expr.as_ref().map(|e| expr_loss_var(tape, out.expr, e, cfg.t_expr)).transpose()?,
    ])
}

fn sum_in_order(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms.split_first().ok_or_else(|| contract("sum of no terms"))?;
    rest.iter().try_fold(first, |acc, &t| tape.add(acc, t))
}

/// Batch loss with missing tasks masked out.
///
/// `PerExample`: each example with at least one label contributes the mean of
/// its present task losses; the batch loss is the mean over those examples.
/// `PerTask`: each task's loss is averaged over the examples carrying it and
/// the task means are summed. Examples without labels never contribute.
pub fn total_loss(
    tape: &mut Tape,
    batch: &[(RawOutputVars, &MultiTaskTarget)],
    cfg: &LossConfig,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(contract("total_loss of an empty batch"));
    }
    if batch.iter().all(|(_, t)| t.n_present() == 0) {
        return Err(contract("batch carries no labels"));
    }
    match cfg.reweight {
        Reweight::PerExample => {
            let mut per_example = Vec::new();
            for (out, target) in batch {
                let terms: Vec<Var> = task_terms(tape, out, target, cfg)?.into_iter().flatten().collect();
                if terms.is_empty() {
                    continue;
                }
                let k = terms.len() as f64;
                let s = sum_in_order(tape, &terms)?;
                per_example.push(tape.scale(s, 1.0 / k)?);
            }
            let n = per_example.len() as f64;
            let s = sum_in_order(tape, &per_example)?;
            tape.scale(s, 1.0 / n)
        }
        Reweight::PerTask => {
            let mut by_task: [Vec<Var>; 3] = Default::default();
            for (out, target) in batch {
                for (slot, term) in by_task.iter_mut().zip(task_terms(tape, out, target, cfg)?) {
                    slot.extend(term);
                }
            }
            let mut task_means = Vec::new();
            for terms in by_task.iter().filter(|t| !t.is_empty()) {
                let s = sum_in_order(tape, terms)?;
                task_means.push(tape.scale(s, 1.0 / terms.len() as f64)?);
            }
            sum_in_order(tape, &task_means)
        }
    }
}
