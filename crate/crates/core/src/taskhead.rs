//! Task tokens, token modules, per-task dense heads, and temperature-scaled
//! activations.
//!
//! Three learned tokens (VA, AU, EXPR, in that row order) are refined by a
//! sequence of token modules. Each module lets the tokens attend to each
//! other and then to the image patches; both steps are pre-norm residual
//! attention. Each refined token then goes through its own dense stack.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{LayerNorm, MultiHeadAttention};
use crate::config::HeadConfig;
use crate::error::{contract, Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{stable_sigmoid, Tape, Var};
use crate::tensor::Tensor;

pub const N_VA: usize = 2;
pub const N_AU: usize = 12;
pub const N_EXPR: usize = 8;

/// Token rows, in order.
pub const TASKS: [&str; 3] = ["va", "au", "expr"];

/// Model outputs before activation: VA regression, AU and emotion logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawOutputs {
    pub va: [f64; N_VA],
    pub au: [f64; N_AU],
    pub expr: [f64; N_EXPR],
}

/// Activated outputs: VA unchanged, AU probabilities, emotion distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub va: [f64; N_VA],
    pub au: [f64; N_AU],
    pub expr: [f64; N_EXPR],
}

/// Tape handles for one example's raw outputs, each a 1-D vector.
#[derive(Debug, Clone, Copy)]
pub struct RawOutputVars {
    pub va: Var,
    pub au: Var,
    pub expr: Var,
}

impl RawOutputVars {
    pub fn values(&self, tape: &Tape) -> RawOutputs {
        let grab = |v: Var| tape.value(v).data().to_vec();
        RawOutputs {
            va: grab(self.va).try_into().expect("va width"),
            au: grab(self.au).try_into().expect("au width"),
            expr: grab(self.expr).try_into().expect("expr width"),
        }
    }
}

/// `sigmoid(u_au / T_au)` and `softmax(u_expr / T_expr)`; VA passes through.
pub fn activate(raw: &RawOutputs, t_au: f64, t_expr: f64) -> Result<Predictions> {
    if !(t_au > 0.0 && t_expr > 0.0) {
        return Err(contract(format!(
            "temperatures must be positive, got T_au = {t_au}, T_expr = {t_expr}"
        )));
    }
    Ok(Predictions {
        va: raw.va,
        au: raw.au.map(|u| stable_sigmoid(u / t_au)),
        expr: softmax(&raw.expr.map(|u| u / t_expr)),
    })
}

pub(crate) fn softmax<const N: usize>(x: &[f64; N]) -> [f64; N] {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = x.map(|v| (v - max).exp());
    let z: f64 = e.iter().sum();
    e.map(|v| v / z)
}

#[derive(Debug, Clone)]
pub struct TokenModule {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
}

impl TokenModule {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNorm::init(store, &format!("{prefix}.ln_self"), d),
            self_attn: MultiHeadAttention::init(store, &format!("{prefix}.self_attn"), d, heads, rng)?,
            ln_cross: LayerNorm::init(store, &format!("{prefix}.ln_cross"), d),
            cross_attn: MultiHeadAttention::init(store, &format!("{prefix}.cross_attn"), d, heads, rng)?,
        })
    }

    /// `tokens: [3, d]`, `patches: [n, d]` → refined `[3, d]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, tokens: Var, patches: Var) -> Result<Var> {
        let h = self.ln_self.forward(tape, p, tokens)?;
        let h = self.self_attn.self_attention(tape, p, h)?;
        let t = tape.add(tokens, h)?;
        let h = self.ln_cross.forward(tape, p, t)?;
        let h = self.cross_attn.cross_attention(tape, p, h, patches)?;
        tape.add(t, h)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// `n_d` dense layers; relu between them, linear at the end.
#[derive(Debug, Clone)]
pub struct TaskMlp {
    pub layers: Vec<Dense>,
}

impl TaskMlp {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        n_d: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_d == 0 {
            return Err(contract("task MLP needs at least one layer"));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let layers = (0..n_d)
            .map(|i| {
                let out = if i + 1 == n_d { out_dim } else { d };
                Dense {
                    weight: store.add_uniform(format!("{prefix}.{i}.weight"), &[d, out], bound, rng),
                    bias: store.add(format!("{prefix}.{i}.bias"), Tensor::zeros([out])),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// `token: [1, d]` → `[1, out_dim]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, token: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        self.layers.iter().enumerate().try_fold(token, |x, (i, layer)| {
            let y = tape.linear(x, p.var(layer.weight), Some(p.var(layer.bias)))?;
            if i < last {
                tape.relu(y)
            } else {
                Ok(y)
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct TaskHead {
    pub tokens: ParamId,
    pub modules: Vec<TokenModule>,
    pub va: TaskMlp,
    pub au: TaskMlp,
    pub expr: TaskMlp,
    d: usize,
}

impl TaskHead {
    pub fn init(store: &mut ParamStore, config: &HeadConfig, d: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate(d)?;
        let tokens = store.add_uniform("head.tokens", &[3, d], 1.0 / (d as f64).sqrt(), rng);
        let modules = (0..config.n_t)
            .map(|i| TokenModule::init(store, &format!("head.module.{i}"), d, config.heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            tokens,
            modules,
            va: TaskMlp::init(store, "head.va", d, config.n_d, N_VA, rng)?,
            au: TaskMlp::init(store, "head.au", d, config.n_d, N_AU, rng)?,
            expr: TaskMlp::init(store, "head.expr", d, config.n_d, N_EXPR, rng)?,
            d,
        })
    }

    /// Refined task tokens after every token module.
    pub fn refine(&self, tape: &mut Tape, p: &Bound, patches: Var) -> Result<Var> {
        let s = tape.shape(patches);
        if s.len() != 2 || s[1] != self.d {
            return Err(Error::Shape {
                op: "task_head",
                lhs: s.to_vec(),
                rhs: vec![3, self.d],
            });
        }
        self.modules
            .iter()
            .try_fold(p.var(self.tokens), |t, m| m.forward(tape, p, t, patches))
    }

    /// Raw outputs from the patch sequence `[n, d]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, patches: Var) -> Result<RawOutputVars> {
        let tokens = self.refine(tape, p, patches)?;
        let mut run = |row: usize, mlp: &TaskMlp| -> Result<Var> {
            let token = tape.slice(tokens, 0, row, row + 1)?;
            let out = mlp.forward(tape, p, token)?;
            let width = tape.shape(out)[1];
            tape.reshape(out, [width])
        };
        Ok(RawOutputVars {
            va: run(0, &self.va)?,
            au: run(1, &self.au)?,
            expr: run(2, &self.expr)?,
        })
    }
}
