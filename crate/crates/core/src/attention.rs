//! Multi-head attention, pre-norm encoder blocks, and sinusoidal positions.

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Query/key/value/output projections for `heads` heads over width `d`.
///
/// Each projection is stored as one `d × d` matrix; head `h` uses columns
/// `h·d_h .. (h+1)·d_h`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub d: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(contract(format!("width {d} is not divisible by {heads} heads")));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let mut proj = |name: &str| store.add_uniform(format!("{prefix}.{name}"), &[d, d], bound, rng);
        Ok(Self {
            wq: proj("wq"),
            wk: proj("wk"),
            wv: proj("wv"),
            wo: proj("wo"),
            d,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// `x` attends to itself.
    pub fn self_attention(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.cross_attention(tape, p, x, x)
    }

    /// Rows of `queries` attend over rows of `context`; one output row per query.
    pub fn cross_attention(&self, tape: &mut Tape, p: &Bound, queries: Var, context: Var) -> Result<Var> {
        self.attend(tape, p, queries, context).map(|(out, _)| out)
    }

    /// Attention output plus each head's `[t, n]` weight matrix.
    pub fn attend(
        &self,
        tape: &mut Tape,
        p: &Bound,
        queries: Var,
        context: Var,
    ) -> Result<(Var, Vec<Var>)> {
        for v in [queries, context] {
            let s = tape.shape(v);
            if s.len() != 2 || s[1] != self.d {
                return Err(Error::Shape {
                    op: "attention",
                    lhs: s.to_vec(),
                    rhs: vec![self.d, self.d],
                });
            }
        }
        let q = tape.matmul(queries, p.var(self.wq))?;
        let k = tape.matmul(context, p.var(self.wk))?;
        let v = tape.matmul(context, p.var(self.wv))?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = tape.slice(q, 1, cols.start, cols.end)?;
            let kh = tape.slice(k, 1, cols.start, cols.end)?;
            let vh = tape.slice(v, 1, cols.start, cols.end)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, scale)?;
            let w = tape.softmax(logits, 1)?;
            outs.push(tape.matmul(w, vh)?);
            weights.push(w);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        let out = tape.matmul(merged, p.var(self.wo))?;
        Ok((out, weights))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones([d])),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros([d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Two-layer relu MLP `d → d_ff → d`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: store.add_uniform(format!("{prefix}.w1"), &[d, d_ff], 1.0 / (d as f64).sqrt(), rng),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros([d_ff])),
            w2: store.add_uniform(format!("{prefix}.w2"), &[d_ff, d], 1.0 / (d_ff as f64).sqrt(), rng),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros([d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.linear(x, p.var(self.w1), Some(p.var(self.b1)))?;
        let h = tape.relu(h)?;
        tape.linear(h, p.var(self.w2), Some(p.var(self.b2)))
    }
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: FeedForward,
}

/// Hidden width of block MLPs relative to the model width.
pub const FF_MULTIPLIER: usize = 4;

impl EncoderBlock {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::init(store, &format!("{prefix}.ln1"), d),
            attn: MultiHeadAttention::init(store, &format!("{prefix}.attn"), d, heads, rng)?,
            ln2: LayerNorm::init(store, &format!("{prefix}.ln2"), d),
            mlp: FeedForward::init(store, &format!("{prefix}.mlp"), d, FF_MULTIPLIER * d, rng),
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let h = self.attn.self_attention(tape, p, h)?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.mlp.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// `pe[pos][2i] = sin(pos / 10000^(2i/d))`, `pe[pos][2i+1] = cos(·)` for
/// row-major flattened patch positions.
pub fn sincos_positional_encoding(h_patches: usize, w_patches: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(contract(format!("positional encoding width {d} must be even and positive")));
    }
    let n = h_patches * w_patches;
    if n == 0 {
        return Err(contract("positional encoding over an empty grid"));
    }
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new([n, d], data)
}
