//! Record-then-replay reverse-mode differentiation.
//!
//! Every operation on a [`Tape`] evaluates eagerly, stores its output, and
//! records which inputs produced it. [`Tape::backward`] walks the records in
//! reverse, accumulating vector-Jacobian products. Inputs are always recorded
//! before their consumers, so reverse insertion order is a valid reverse
//! topological order.
//!
//! A tape is single-threaded. Build one per forward pass; parameters are
//! copied in as leaves, so many tapes can read the same parameter set
//! concurrently.

use crate::error::{contract, Error, Result};
use crate::tensor::{split_axis, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Reshape(Var),
    Broadcast { src: Var, map: Vec<usize> },
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that rejects any non-finite value at every op boundary.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// A tape that skips the per-op finiteness scan.
    pub fn unchecked() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.check_same_shape(vb, name)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(name, out, op)
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(name, out, op)
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Logistic function; exact at saturation for |x| far beyond 700.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, f64::ln, Op::Log(a))
    }

    /// `ln(1 + e^x)` without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map("softplus", a, stable_softplus, Op::Softplus(a))
    }

    /// Product of two matrices `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let data = mm(va.data(), vb.data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.ndim() != 2 {
            return Err(contract(format!("transpose needs a matrix, got {:?}", va.shape())));
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let data = transpose(va.data(), m, n);
        self.push("transpose", Tensor::from_parts(vec![n, m], data), Op::Transpose(a))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        check_axis("sum_axis", va, axis)?;
        let (outer, len, inner) = split_axis(va.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &va.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = va.shape().to_vec();
        shape.remove(axis);
        self.push("sum_axis", Tensor::from_parts(shape, data), Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = self.value(a).shape().get(axis).copied().unwrap_or(1) as f64;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len)
    }

    /// Normalized exponentials along `axis`, computed after subtracting the
    /// per-slice maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        check_axis("softmax", va, axis)?;
        let data = softmax_along(va.data(), va.shape(), axis, false);
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push("softmax", out, Op::Softmax(a, axis))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        check_axis("log_softmax", va, axis)?;
        let data = softmax_along(va.data(), va.shape(), axis, true);
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push("log_softmax", out, Op::LogSoftmax(a, axis))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a))
    }

    /// Numpy-style broadcast: dimensions are aligned from the right and each
    /// source dimension must equal the target or be 1.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let map = broadcast_map(va.shape(), shape).ok_or_else(|| Error::Shape {
            op: "broadcast_to",
            lhs: va.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        let data = map.iter().map(|&i| va.data()[i]).collect();
        let out = Tensor::from_parts(shape.to_vec(), data);
        self.push("broadcast_to", out, Op::Broadcast { src: a, map })
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract("concat of zero tensors"))?;
        let base = self.value(first).shape().to_vec();
        check_axis("concat", self.value(first), axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push("concat", Tensor::from_parts(shape, data), Op::Concat(parts.to_vec(), axis))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        check_axis("slice", va, axis)?;
        if start >= end || end > va.shape()[axis] {
            return Err(contract(format!(
                "slice {start}..{end} out of range for axis {axis} of {:?}",
                va.shape()
            )));
        }
        let (outer, len, inner) = split_axis(va.shape(), axis);
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&va.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = va.shape().to_vec();
        shape[axis] = width;
        let out = Tensor::from_parts(shape, data);
        self.push("slice", out, Op::Slice { src: a, axis, start })
    }

    /// Normalizes over the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx.shape().last().ok_or_else(|| contract("layer_norm of a scalar"))?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: vx.shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = vx.numel() / d;
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), out);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// 2-D convolution of an `[h, w, c_in]` image with a `[k, k, c_in, c_out]`
    /// kernel and `[c_out]` bias, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let shape_err = || Error::Shape {
            op: "conv2d",
            lhs: vx.shape().to_vec(),
            rhs: vw.shape().to_vec(),
        };
        if vx.ndim() != 3 || vw.ndim() != 4 || vw.shape()[0] != vw.shape()[1] {
            return Err(shape_err());
        }
        let (h, wd, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (k, c_out) = (vw.shape()[0], vw.shape()[3]);
        if vw.shape()[2] != c || vb.shape() != [c_out] || stride == 0 {
            return Err(shape_err());
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err());
        }
        let geom = ConvGeometry {
            h,
            w: wd,
            c,
            k,
            c_out,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = geom.im2col(vx.data());
        let mut data = mm(&cols, vw.data(), geom.patches(), geom.patch_len(), c_out);
        for row in data.chunks_mut(c_out) {
            for (v, bias) in row.iter_mut().zip(vb.data()) {
                *v += bias;
            }
        }
        let out = Tensor::from_parts(vec![geom.h_out, geom.w_out, c_out], data);
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom })
    }

    // Composites.

    /// `a + b` with both sides broadcast to their common shape.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b)?;
        self.add(a, b)
    }

    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b)?;
        self.mul(a, b)
    }

    fn broadcast_pair(&mut self, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return Ok((a, b));
        }
        let target = broadcast_shape(&sa, &sb).ok_or(Error::Shape {
            op: "broadcast",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let a = if sa == target { a } else { self.broadcast_to(a, &target)? };
        let b = if sb == target { b } else { self.broadcast_to(b, &target)? };
        Ok((a, b))
    }

    /// `x · w + bias` for a row-major batch `x` of shape `[n, d_in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_bcast(y, b),
            None => Ok(y),
        }
    }

    /// Sum of elementwise products.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Computes gradients of the scalar `loss` with respect to every node it
    /// depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::from_parts(node.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, *a, zip(g, vb, |g, y| g * y));
                accumulate(grads, *b, zip(g, va, |g, x| g * x));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                // dA = G · Bᵀ, dB = Aᵀ · G
                let bt = transpose(vb.data(), k, n);
                accumulate(grads, *a, mm(g, &bt, m, n, k));
                let at = transpose(va.data(), m, k);
                accumulate(grads, *b, mm(&at, g, k, m, n));
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                accumulate(grads, *a, transpose(g, s[0], s[1]));
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                accumulate(grads, *a, zip(g, va, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Sigmoid(a) => accumulate(grads, *a, zip(g, out, |g, s| g * s * (1.0 - s))),
            Op::Exp(a) => accumulate(grads, *a, zip(g, out, |g, e| g * e)),
            Op::Log(a) => {
                let va = self.value(*a).data();
                accumulate(grads, *a, zip(g, va, |g, x| g / x));
            }
            Op::Softplus(a) => {
                let va = self.value(*a).data();
                accumulate(grads, *a, zip(g, va, |g, x| g * stable_sigmoid(x)));
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = split_axis(self.value(*a).shape(), *axis);
                let mut ga = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        ga.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Softmax(a, axis) => {
                // dx = s ⊙ (g − Σ g⊙s)
                let mut ga = vec![0.0; g.len()];
                for_each_lane(node.value.shape(), *axis, |idx| {
                    let dot: f64 = idx.clone().map(|j| g[j] * out[j]).sum();
                    for j in idx {
                        ga[j] = out[j] * (g[j] - dot);
                    }
                });
                accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a, axis) => {
                // dx = g − softmax ⊙ Σ g
                let mut ga = vec![0.0; g.len()];
                for_each_lane(node.value.shape(), *axis, |idx| {
                    let total: f64 = idx.clone().map(|j| g[j]).sum();
                    for j in idx {
                        ga[j] = g[j] - out[j].exp() * total;
                    }
                });
                accumulate(grads, *a, ga);
            }
            Op::Broadcast { src, map } => {
                let mut ga = vec![0.0; self.value(*src).numel()];
                for (gv, &j) in g.iter().zip(map) {
                    ga[j] += gv;
                }
                accumulate(grads, *src, ga);
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.value(p).shape()[*axis] * inner;
                    let mut gp = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * total + offset;
                        gp.extend_from_slice(&g[base..base + chunk]);
                    }
                    accumulate(grads, p, gp);
                    offset += chunk;
                }
            }
            Op::Slice { src, axis, start } => {
                let vs = self.value(*src);
                let (outer, len, inner) = split_axis(vs.shape(), *axis);
                let width = node.value.shape()[*axis];
                let mut ga = vec![0.0; vs.numel()];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    let from = o * width * inner;
                    ga[dst..dst + width * inner].copy_from_slice(&g[from..from + width * inner]);
                }
                accumulate(grads, *src, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gamma).data();
                let d = gm.len();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for (r, is) in inv_std.iter().enumerate() {
                    let lane = r * d..(r + 1) * d;
                    let (gr, hr) = (&g[lane.clone()], &xhat[lane.clone()]);
                    let mut mean_gh = 0.0;
                    let mut mean_ghh = 0.0;
                    for j in 0..d {
                        gb[j] += gr[j];
                        gg[j] += gr[j] * hr[j];
                        let gh = gr[j] * gm[j];
                        mean_gh += gh;
                        mean_ghh += gh * hr[j];
                    }
                    mean_gh /= d as f64;
                    mean_ghh /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = is * (gr[j] * gm[j] - mean_gh - hr[j] * mean_ghh);
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gamma, gg);
                accumulate(grads, *beta, gb);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (p, l, co) = (geom.patches(), geom.patch_len(), geom.c_out);
                let cols = geom.im2col(vx.data());
                let cols_t = transpose(&cols, p, l);
                accumulate(grads, *w, mm(&cols_t, g, l, p, co));
                let wt = transpose(vw.data(), l, co);
                let gcols = mm(g, &wt, p, co, l);
                accumulate(grads, *x, geom.col2im(&gcols));
                let mut gb = vec![0.0; co];
                for row in g.chunks(co) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, *b, gb);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// The gradient of the loss with respect to `v`, or `None` when the loss
    /// does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns zeros shaped like `like` for
    /// unreachable nodes.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    c_out: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeometry {
    fn patches(&self) -> usize {
        self.h_out * self.w_out
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`, if it
    /// falls inside the unpadded image.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col(&self, img: &[f64]) -> Vec<f64> {
        let l = self.patch_len();
        let mut cols = vec![0.0; self.patches() * l];
        for oy in 0..self.h_out {
            for ox in 0..self.w_out {
                let row = &mut cols[(oy * self.w_out + ox) * l..][..l];
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                            let dst = (ky * self.k + kx) * self.c;
                            let src = (y * self.w + x) * self.c;
                            row[dst..dst + self.c].copy_from_slice(&img[src..src + self.c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let l = self.patch_len();
        let mut img = vec![0.0; self.h * self.w * self.c];
        for oy in 0..self.h_out {
            for ox in 0..self.w_out {
                let row = &cols[(oy * self.w_out + ox) * l..][..l];
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                            let src = (ky * self.k + kx) * self.c;
                            let dst = (y * self.w + x) * self.c;
                            for ch in 0..self.c {
                                img[dst + ch] += row[src + ch];
                            }
                        }
                    }
                }
            }
        }
        img
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.ndim() {
        return Err(contract(format!("{op}: axis {axis} invalid for shape {:?}", t.shape())));
    }
    Ok(())
}

/// Row-major `[m, k] x [k, n]`.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Calls `f` with the flat indices of every 1-D lane along `axis`.
fn for_each_lane(
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    let (outer, len, inner) = split_axis(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let start = o * len * inner + i;
            f((start..start + len * inner).step_by(inner));
        }
    }
}

fn softmax_along(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for_each_lane(shape, axis, |idx| {
        let max = idx.clone().map(|j| x[j]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = idx.clone().map(|j| (x[j] - max).exp()).sum();
        let log_total = total.ln();
        for j in idx {
            out[j] = if log {
                x[j] - max - log_total
            } else {
                (x[j] - max).exp() / total
            };
        }
    });
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        let off = n - s.len();
        if i < off {
            1
        } else {
            s[i - off]
        }
    };
    (0..n)
        .map(|i| match (dim(a, i), dim(b, i)) {
            (x, y) if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For each flat index of `target`, the flat index of the broadcast source.
fn broadcast_map(src: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if src.len() > target.len() {
        return None;
    }
    let off = target.len() - src.len();
    // Source strides, zeroed on broadcast dimensions.
    let mut strides = vec![0usize; target.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let (s, t) = (src[i], target[i + off]);
        if s == t {
            strides[i + off] = acc;
        } else if s != 1 {
            return None;
        }
        acc *= s;
    }
    let numel: usize = target.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut index = vec![0usize; target.len()];
    for _ in 0..numel {
        map.push(index.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..target.len()).rev() {
            index[d] += 1;
            if index[d] < target[d] {
                break;
            }
            index[d] = 0;
        }
    }
    Some(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, relative_error};

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::new();
        let a = t.leaf(mat(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let i = t.leaf(Tensor::eye(2)).unwrap();
        let b = t.leaf(mat(&[&[5.0], &[6.0]])).unwrap();
        let ai = t.matmul(a, i).unwrap();
        assert_eq!(t.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = t.matmul(a, b).unwrap();
        assert_eq!(t.value(ab).shape(), &[2, 1]);
        assert_eq!(t.value(ab).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros([2, 3])).unwrap();
        let b = t.leaf(Tensor::zeros([2, 3])).unwrap();
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let s = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);

        let x = t.leaf(Tensor::vector(vec![2f64.ln(), 0.0])).unwrap();
        let s = t.softmax(x, 0).unwrap();
        let d = t.value(s).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15 && (d[1] - 1.0 / 3.0).abs() < 1e-15);

        let x = t.leaf(Tensor::vector(vec![0.3, -1.2, 2.5])).unwrap();
        let shifted = t.add_scalar(x, 123.0).unwrap();
        let (a, b) = (t.softmax(x, 0).unwrap(), t.softmax(shifted, 0).unwrap());
        for (p, q) in t.value(a).data().iter().zip(t.value(b).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut t = Tape::new();
        let x = t.leaf(mat(&[&[1.0, 5.0], &[2.0, -3.0]])).unwrap();
        let s = t.softmax(x, 0).unwrap();
        let v = t.value(s);
        assert!((v.at(&[0, 0]) + v.at(&[1, 0]) - 1.0).abs() < 1e-15);
        assert!((v.at(&[0, 1]) + v.at(&[1, 1]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 100.0, -700.0, 700.0, -3.0, 3.0])).unwrap();
        let s = t.sigmoid(x).unwrap();
        let d = t.value(s).data();
        assert_eq!(d[0], 0.5);
        assert!((d[1] - 1.0).abs() < 1e-12);
        assert!(d[2] >= 0.0 && d[2] < 1e-300);
        assert_eq!(d[3], 1.0);
        assert!((d[4] + d[5] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new([2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap()).unwrap();
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones([2, 3]));
    }

    #[test]
    fn backward_of_dot_is_other_operand() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let y = t.leaf(Tensor::vector(vec![-4.0, 0.5, 9.0])).unwrap();
        let d = t.dot(x, y).unwrap();
        let g = t.backward(d).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-4.0, 0.5, 9.0]);
        assert_eq!(g.get(y).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn fan_out_gradients_sum() {
        // x² built as x·x: both paths contribute x each.
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.5, -2.0])).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_nodes_have_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0])).unwrap();
        let y = t.leaf(Tensor::vector(vec![2.0])).unwrap();
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(y).is_none());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut t = Tape::new();
        assert!(t.leaf(Tensor::vector(vec![f64::NAN])).is_err());
        let x = t.leaf(Tensor::vector(vec![-1.0])).unwrap();
        assert!(matches!(t.log(x), Err(Error::NonFinite { op: "log" })));
        let mut unchecked = Tape::unchecked();
        let x = unchecked.leaf(Tensor::vector(vec![-1.0])).unwrap();
        assert!(unchecked.log(x).is_ok());
    }

    #[test]
    fn broadcast_row_over_matrix() {
        let mut t = Tape::new();
        let m = t.leaf(Tensor::zeros([2, 3])).unwrap();
        let r = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let s = t.add_bcast(m, r).unwrap();
        assert_eq!(t.value(s).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let total = t.sum(s).unwrap();
        let g = t.backward(total).unwrap();
        assert_eq!(g.get(r).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast_incompatible_shapes_fail() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros([2, 3])).unwrap();
        let b = t.leaf(Tensor::zeros([2])).unwrap();
        assert!(t.add_bcast(a, b).is_err());
        assert!(t.broadcast_to(a, &[3, 3]).is_err());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut t = Tape::new();
        let a = t.leaf(mat(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let b = t.leaf(mat(&[&[5.0], &[6.0]])).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = t.slice(c, 1, 2, 3).unwrap();
        assert_eq!(t.value(back), t.value(b));
        assert!(t.slice(c, 1, 2, 4).is_err());
    }

    #[test]
    fn conv2d_stride_arithmetic() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::ones([8, 8, 1])).unwrap();
        let w = t.leaf(Tensor::ones([3, 3, 1, 2])).unwrap();
        let b = t.leaf(Tensor::zeros([2])).unwrap();
        let y = t.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(t.value(y).shape(), &[4, 4, 2]);
        // Top-left output sees a 2x2 corner of ones; interior sees 3x3.
        assert_eq!(t.value(y).at(&[0, 0, 0]), 4.0);
        assert_eq!(t.value(y).at(&[1, 1, 1]), 9.0);
    }

    /// Finite-difference check of `f` over every listed input.
    fn check(
        inputs: &[Tensor],
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone()).unwrap()).collect();
        let loss = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (k, x) in inputs.iter().enumerate() {
            let numeric = finite_diff_grad(
                |probe| {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| tape.leaf(if j == k { probe.clone() } else { t.clone() }).unwrap())
                        .collect();
                    let loss = build(&mut tape, &vars).unwrap();
                    tape.value(loss).item()
                },
                x,
                1e-5,
            );
            let analytic = grads.get_or_zeros(vars[k], x);
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "input {k}: relative error {err}");
        }
    }

    fn sample(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng)
    }

    // Weighted sums keep the gradient of the reduction non-trivial.
    fn weighted(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        let w = tape.leaf(sample(&tape.shape(y).to_vec(), seed))?;
        tape.dot(y, w)
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let a = sample(&[3, 4], 1);
        let b = sample(&[3, 4], 2);
        let c = sample(&[4, 2], 3);
        let pos = a.map(|v| v.abs() + 0.5);

        check(&[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1])?;
            weighted(t, s, 9)
        });
        check(&[a.clone(), b.clone()], |t, v| {
            let s = t.sub(v[0], v[1])?;
            weighted(t, s, 9)
        });
        check(&[a.clone(), b.clone()], |t, v| {
            let s = t.mul(v[0], v[1])?;
            weighted(t, s, 9)
        });
        check(&[a.clone(), c.clone()], |t, v| {
            let s = t.matmul(v[0], v[1])?;
            weighted(t, s, 9)
        });
        check(&[a.clone()], |t, v| {
            let s = t.transpose(v[0])?;
            weighted(t, s, 9)
        });
        check(&[a.clone()], |t, v| {
            let s = t.scale(v[0], -2.5)?;
            let s = t.add_scalar(s, 0.3)?;
            weighted(t, s, 9)
        });
        check(&[a.clone()], |t, v| {
            let s = t.relu(v[0])?;
            weighted(t, s, 9)
        });
        check(&[a.clone()], |t, v| {
            let s = t.sigmoid(v[0])?;
            weighted(t, s, 9)
        });
        check(&[a.clone()], |t, v| {
            let s = t.exp(v[0])?;
            weighted(t, s, 9)
        });
        check(&[pos], |t, v| {
            let s = t.log(v[0])?;
            weighted(t, s, 9)
        });
        check(&[a.clone()], |t, v| {
            let s = t.softplus(v[0])?;
            weighted(t, s, 9)
        });
        for axis in 0..2 {
            check(&[a.clone()], |t, v| {
                let s = t.softmax(v[0], axis)?;
                weighted(t, s, 9)
            });
            check(&[a.clone()], |t, v| {
                let s = t.log_softmax(v[0], axis)?;
                weighted(t, s, 9)
            });
            check(&[a.clone()], |t, v| {
                let s = t.sum_axis(v[0], axis)?;
                weighted(t, s, 9)
            });
            check(&[a.clone()], |t, v| {
                let s = t.mean_axis(v[0], axis)?;
                weighted(t, s, 9)
            });
            check(&[a.clone(), b.clone()], |t, v| {
                let s = t.concat(&[v[0], v[1]], axis)?;
                weighted(t, s, 9)
            });
            check(&[a.clone()], |t, v| {
                let s = t.slice(v[0], axis, 1, 3)?;
                weighted(t, s, 9)
            });
        }
        check(&[a.clone()], |t, v| t.mean(v[0]));
        check(&[a.clone()], |t, v| {
            let s = t.reshape(v[0], [2, 6])?;
            weighted(t, s, 9)
        });
        check(&[sample(&[4], 4), a.clone()], |t, v| {
            let s = t.broadcast_to(v[0], &[3, 4])?;
            let s = t.mul(s, v[1])?;
            weighted(t, s, 9)
        });
        check(&[sample(&[3, 1], 5)], |t, v| {
            let s = t.broadcast_to(v[0], &[2, 3, 4])?;
            weighted(t, s, 9)
        });
        check(&[a.clone(), sample(&[4], 6), sample(&[4], 7)], |t, v| {
            let s = t.layer_norm(v[0], v[1], v[2])?;
            weighted(t, s, 9)
        });
        check(&[sample(&[5, 6, 2], 8), sample(&[3, 3, 2, 3], 10), sample(&[3], 11)], |t, v| {
            let s = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            weighted(t, s, 9)
        });
        check(&[sample(&[4, 4, 1], 12), sample(&[3, 3, 1, 2], 13), sample(&[2], 14)], |t, v| {
            let s = t.conv2d(v[0], v[1], v[2], 1, 0)?;
            weighted(t, s, 9)
        });
    }

    #[test]
    fn sum_of_matmul_gradient_is_ones_times_b_transposed() {
        let a = sample(&[2, 3], 20);
        let b = sample(&[3, 4], 21);
        let mut t = Tape::new();
        let (va, vb) = (t.leaf(a).unwrap(), t.leaf(b.clone()).unwrap());
        let p = t.matmul(va, vb).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        // ones[2x4] · Bᵀ: every row is the row-sums of B.
        let row_sums: Vec<f64> = (0..3).map(|i| (0..4).map(|j| b.at(&[i, j])).sum()).collect();
        for i in 0..2 {
            for k in 0..3 {
                assert!((g.get(va).unwrap().at(&[i, k]) - row_sums[k]).abs() < 1e-12);
            }
        }
    }
}
