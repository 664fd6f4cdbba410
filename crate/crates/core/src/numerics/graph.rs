//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order. Node ids
//! are therefore a topological order, and [`Graph::backward`] is a single
//! reverse sweep. The op set is deliberately small: it covers the encoders,
//! the pose gate, temporal saliency, aggregation and the contrastive loss.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Unary and binary elementwise operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Mul,
    Sigmoid,
    Exp,
    Log,
    Scale(f64),
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: Axis,
    },
    LogSoftmax {
        x: Var,
        axis: Axis,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GroupMean {
        x: Var,
        group: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
}

/// Decomposition of a shape around one axis.
#[derive(Clone, Copy, Debug)]
struct Axis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Axis {
    fn of(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    /// Calls `f` with the flat indices of every lane along the axis.
    fn for_each_lane(&self, mut f: impl FnMut(&[usize])) {
        let mut idx = vec![0; self.len];
        for o in 0..self.outer {
            for i in 0..self.inner {
                for (k, slot) in idx.iter_mut().enumerate() {
                    *slot = (o * self.len + k) * self.inner + i;
                }
                f(&idx);
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let ax = Axis::of(x.shape(), axis)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), softmax_lanes(x.data(), ax)))
}

fn softmax_lanes(x: &[f64], ax: Axis) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    ax.for_each_lane(|idx| {
        let m = idx.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &i in idx {
            let e = (x[i] - m).exp();
            out[i] = e;
            z += e;
        }
        for &i in idx {
            out[i] /= z;
        }
    });
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that accumulates a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = |b: Option<Var>| {
            b.ok_or_else(|| Error::InvalidArgument(format!("{op:?} needs two operands")))
        };
        match op {
            Elementwise::Add => self.add(a, need_b(b)?),
            Elementwise::Mul => self.mul(a, need_b(b)?),
            Elementwise::Sigmoid => self.sigmoid(a),
            Elementwise::Exp => self.exp(a),
            Elementwise::Log => self.log(a),
            Elementwise::Scale(c) => self.scale(a, c),
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::checked(name, ta.shape().to_vec(), data)
    }

    fn unary(&self, a: Var, name: &str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = self.value(a);
        Tensor::checked(name, t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.unary(a, "scale", |x| x * c)?;
        let rg = self.tracked(&[a]);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, "sigmoid", sigmoid)?;
        let rg = self.tracked(&[a]);
        Ok(self.push(out, Op::Sigmoid(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, "exp", f64::exp)?;
        let rg = self.tracked(&[a]);
        Ok(self.push(out, Op::Exp(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, "log", f64::ln)?;
        let rg = self.tracked(&[a]);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, "gelu", gelu)?;
        let rg = self.tracked(&[a]);
        Ok(self.push(out, Op::Gelu(a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.tracked(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// Adds the rank-1 `bias` to every row of the matrix `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (r, c) = tx.dims2()?;
        if tb.shape() != [c] {
            return Err(mismatch("add_row_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::checked("add_row_bias", vec![r, c], data)?;
        let rg = self.tracked(&[x, bias]);
        Ok(self.push(out, Op::AddRowBias(x, bias), rg))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row_bias(h, b)
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::checked("layer_norm", vec![r, c], out)?;
        let rg = self.tracked(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Softmax along `axis`, stabilized by subtracting the lane maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let ax = Axis::of(tx.shape(), axis)?;
        let out = Tensor::checked("softmax", tx.shape().to_vec(), softmax_lanes(tx.data(), ax))?;
        let rg = self.tracked(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis: ax }, rg))
    }

    /// Log-softmax along `axis` (log-sum-exp with max subtraction).
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let ax = Axis::of(tx.shape(), axis)?;
        let d = tx.data();
        let mut out = vec![0.0; d.len()];
        ax.for_each_lane(|idx| {
            let m = idx.iter().map(|&i| d[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + idx.iter().map(|&i| (d[i] - m).exp()).sum::<f64>().ln();
            for &i in idx {
                out[i] = d[i] - lse;
            }
        });
        let probs = out.iter().map(|v| v.exp()).collect();
        let out = Tensor::checked("log_softmax", tx.shape().to_vec(), out)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(out, Op::LogSoftmax { x, axis: ax, probs }, rg))
    }

    /// Multi-head scaled dot-product attention applied independently to each
    /// block of `group` consecutive rows. `q`, `k`, `v` are `(G*group) x width`
    /// and `width` splits evenly into `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, group: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(mismatch("attention", tq, tk));
        }
        let (rows, width) = tq.dims2()?;
        if group == 0 || rows % group != 0 || heads == 0 || width % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention: {rows}x{width} does not split into groups of {group} with {heads} heads"
            )));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let groups = rows / group;
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; groups * heads * group * group];
        let mut out = vec![0.0; rows * width];
        let mut logits = vec![0.0; group];
        for g in 0..groups {
            for h in 0..heads {
                let col = h * dh;
                let pbase = (g * heads + h) * group * group;
                for i in 0..group {
                    let qi = &qd[(g * group + i) * width + col..][..dh];
                    for (j, l) in logits.iter_mut().enumerate() {
                        let kj = &kd[(g * group + j) * width + col..][..dh];
                        *l = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for l in logits.iter_mut() {
                        *l = (*l - m).exp();
                        z += *l;
                    }
                    let p = &mut probs[pbase + i * group..][..group];
                    for (pj, l) in p.iter_mut().zip(&logits) {
                        *pj = l / z;
                    }
                    let oi = &mut out[(g * group + i) * width + col..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vd[(g * group + j) * width + col..][..dh];
                        for (o, vv) in oi.iter_mut().zip(vj) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::checked("attention", vec![rows, width], out)?;
        let rg = self.tracked(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean of each block of `group` consecutive rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        if group == 0 || r % group != 0 {
            return Err(Error::InvalidArgument(format!("{r} rows do not split into groups of {group}")));
        }
        let mut out = vec![0.0; (r / group) * c];
        for i in 0..r {
            let o = &mut out[(i / group) * c..][..c];
            for (a, b) in o.iter_mut().zip(tx.row(i)) {
                *a += b / group as f64;
            }
        }
        let out = Tensor::checked("group_mean", vec![r / group, c], out)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(out, Op::GroupMean { x, group }, rg))
    }

    /// Scales every row of a matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = tx.row(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNorm("l2_normalize_rows"));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let out = Tensor::checked("l2_normalize_rows", vec![r, c], out)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(out, Op::L2Normalize { x, norms }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::checked("sum", vec![1], vec![self.value(x).sum()])?;
        let rg = self.tracked(&[x]);
        Ok(self.push(out, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::checked("mean", vec![1], vec![t.sum() / t.len() as f64])?;
        let rg = self.tracked(&[x]);
        Ok(self.push(out, Op::Mean(x), rg))
    }

    /// Gathers rows of a matrix; indices may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        if rows.is_empty() {
            return Err(Error::InvalidArgument("select_rows: no rows".into()));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::InvalidArgument(format!("row {i} out of range 0..{r}")));
            }
            out.extend_from_slice(tx.row(i));
        }
        let out = Tensor::from_parts(vec![rows.len(), c], out);
        let rg = self.tracked(&[x]);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..end).collect();
        self.select_rows(x, &rows)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        for t in &tensors {
            t.dims2()?;
        }
        let out = Tensor::stack_leading(&tensors)?;
        let rg = self.tracked(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reverse sweep from the scalar `output`, seeded with gradient 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::InvalidShape {
                shape: out.shape().to_vec(),
                reason: "backward needs a scalar output".into(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(Tensor::ones(out.shape()));
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("backward".into()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, Tensor::from_parts(g.shape().to_vec(), zip(gd, tb.data(), |x, y| x * y)));
                acc(*b, Tensor::from_parts(g.shape().to_vec(), zip(gd, ta.data(), |x, y| x * y)));
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
            Op::Sigmoid(a) => acc(
                *a,
                Tensor::from_parts(g.shape().to_vec(), zip(gd, y.data(), |g, s| g * s * (1.0 - s))),
            ),
            Op::Exp(a) => acc(*a, Tensor::from_parts(g.shape().to_vec(), zip(gd, y.data(), |g, e| g * e))),
            Op::Log(a) => acc(
                *a,
                Tensor::from_parts(g.shape().to_vec(), zip(gd, self.value(*a).data(), |g, x| g / x)),
            ),
            Op::Gelu(a) => acc(
                *a,
                Tensor::from_parts(
                    g.shape().to_vec(),
                    zip(gd, self.value(*a).data(), |g, x| g * gelu_grad(x)),
                ),
            ),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(false, true, m, n, k, gd, tb.data(), &mut ga, 0.0);
                    acc(*a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm(true, false, k, m, n, ta.data(), gd, &mut gb, 0.0);
                    acc(*b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose().expect("rank-2 gradient")),
            Op::AddRowBias(x, b) => {
                let c = g.shape()[1];
                let mut gb = vec![0.0; c];
                for row in gd.chunks(c) {
                    for (s, v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                acc(*x, g.clone());
                acc(*b, Tensor::from_parts(vec![c], gb));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = g.shape()[1];
                let gam = self.value(*gamma).data();
                let mut gx = vec![0.0; gd.len()];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for (i, is) in inv_std.iter().enumerate() {
                    let grow = &gd[i * c..][..c];
                    let hrow = &xhat[i * c..][..c];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        ggamma[j] += grow[j] * hrow[j];
                        gbeta[j] += grow[j];
                        dxhat[j] = grow[j] * gam[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * hrow[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        gx[i * c + j] = is * (dxhat[j] - m1 - hrow[j] * m2);
                    }
                }
                acc(*x, Tensor::from_parts(g.shape().to_vec(), gx));
                acc(*gamma, Tensor::from_parts(vec![c], ggamma));
                acc(*beta, Tensor::from_parts(vec![c], gbeta));
            }
            Op::Softmax { x, axis } => {
                let yd = y.data();
                let mut gx = vec![0.0; gd.len()];
                axis.for_each_lane(|idx| {
                    let dot: f64 = idx.iter().map(|&i| gd[i] * yd[i]).sum();
                    for &i in idx {
                        gx[i] = yd[i] * (gd[i] - dot);
                    }
                });
                acc(*x, Tensor::from_parts(g.shape().to_vec(), gx));
            }
            Op::LogSoftmax { x, axis, probs } => {
                let mut gx = vec![0.0; gd.len()];
                axis.for_each_lane(|idx| {
                    let total: f64 = idx.iter().map(|&i| gd[i]).sum();
                    for &i in idx {
                        gx[i] = gd[i] - probs[i] * total;
                    }
                });
                acc(*x, Tensor::from_parts(g.shape().to_vec(), gx));
            }
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                probs,
            } => {
                let (gq, gk, gv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    gd,
                    probs,
                    g.shape()[1],
                    *group,
                    *heads,
                );
                let shape = g.shape().to_vec();
                acc(*q, Tensor::from_parts(shape.clone(), gq));
                acc(*k, Tensor::from_parts(shape.clone(), gk));
                acc(*v, Tensor::from_parts(shape, gv));
            }
            Op::GroupMean { x, group } => {
                let shape = self.value(*x).shape().to_vec();
                let c = shape[1];
                let mut gx = vec![0.0; shape[0] * c];
                for (i, row) in gx.chunks_mut(c).enumerate() {
                    let src = &gd[(i / group) * c..][..c];
                    for (a, b) in row.iter_mut().zip(src) {
                        *a = b / *group as f64;
                    }
                }
                acc(*x, Tensor::from_parts(shape, gx));
            }
            Op::L2Normalize { x, norms } => {
                let c = g.shape()[1];
                let yd = y.data();
                let mut gx = vec![0.0; gd.len()];
                for (i, n) in norms.iter().enumerate() {
                    let (gr, yr) = (&gd[i * c..][..c], &yd[i * c..][..c]);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                acc(*x, Tensor::from_parts(g.shape().to_vec(), gx));
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.value(*x).shape(), gd[0])),
            Op::Mean(x) => {
                let t = self.value(*x);
                acc(*x, Tensor::full(t.shape(), gd[0] / t.len() as f64));
            }
            Op::SelectRows { x, rows } => {
                let shape = self.value(*x).shape().to_vec();
                let c = shape[1];
                let mut gx = vec![0.0; shape[0] * c];
                for (k, &r) in rows.iter().enumerate() {
                    for (a, b) in gx[r * c..][..c].iter_mut().zip(&gd[k * c..][..c]) {
                        *a += b;
                    }
                }
                acc(*x, Tensor::from_parts(shape, gx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let n = shape.iter().product::<usize>();
                    acc(*p, Tensor::from_parts(shape, gd[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::Reshape(x) => acc(
                *x,
                Tensor::from_parts(self.value(*x).shape().to_vec(), gd.to_vec()),
            ),
        }
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    qd: &[f64],
    kd: &[f64],
    vd: &[f64],
    gd: &[f64],
    probs: &[f64],
    width: usize,
    group: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = qd.len() / width;
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];
    let mut dp = vec![0.0; group];
    for g in 0..rows / group {
        for h in 0..heads {
            let col = h * dh;
            let pbase = (g * heads + h) * group * group;
            for i in 0..group {
                let ri = (g * group + i) * width + col;
                let p = &probs[pbase + i * group..][..group];
                let go = &gd[ri..][..dh];
                for (j, d) in dp.iter_mut().enumerate() {
                    let rj = (g * group + j) * width + col;
                    let vj = &vd[rj..][..dh];
                    *d = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    for (gvv, o) in gv[rj..][..dh].iter_mut().zip(go) {
                        *gvv += p[j] * o;
                    }
                }
                let dot: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
                for j in 0..group {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let rj = (g * group + j) * width + col;
                    for c in 0..dh {
                        gq[ri + c] += ds * kd[rj + c];
                        gk[rj + c] += ds * qd[ri + c];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.elementwise(Elementwise::Sigmoid, x, None).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut g = Graph::new();
        let t = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let x = g.constant(t.clone());
        let o = g.constant(Tensor::ones(&[2, 3]));
        let y = g.elementwise(Elementwise::Mul, x, Some(o)).unwrap();
        assert_eq!(g.value(y), &t);
    }

    #[test]
    fn add_backward_is_linear() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(1.5));
        let b = g.param(Tensor::scalar(-4.0));
        let y = g.add(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap().item(), 1.0);
        assert_eq!(grads.get(b).unwrap().item(), 1.0);
    }

    #[test]
    fn binary_shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(g.elementwise(Elementwise::Mul, a, None).is_err());
    }

    #[test]
    fn log_of_nonpositive_and_exp_overflow_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
        assert!(matches!(g.log(a), Err(Error::NonFinite(_))));
        let b = g.constant(Tensor::vector(vec![1000.0]).unwrap());
        assert!(matches!(g.exp(b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_handles_large_logits() {
        let t = softmax(&Tensor::vector(vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(t.data()[0], 1.0);
        assert!(t.data()[1] >= 0.0 && t.data()[1] < 1e-300);
        let t = softmax(&Tensor::vector(vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(t.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_along_leading_axis_of_3d() {
        let x = Tensor::from_fn(&[3, 2, 2], |i| (i as f64 * 0.7).cos());
        let s = softmax(&x, 0).unwrap();
        for rest in 0..4 {
            let total: f64 = (0..3).map(|k| s.data()[k * 4 + rest]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!(softmax(&x, 3).is_err());
    }

    #[test]
    fn attention_rejects_bad_grouping() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[6, 4]));
        assert!(g.attention(q, q, q, 4, 2).is_err());
        assert!(g.attention(q, q, q, 3, 3).is_err());
    }

    #[test]
    fn attention_gradient() {
        let q = Tensor::from_fn(&[6, 4], |i| ((i * 7) as f64).sin());
        let k = Tensor::from_fn(&[6, 4], |i| ((i * 3) as f64).cos());
        let v = Tensor::from_fn(&[6, 4], |i| (i as f64 * 0.37).sin());
        let err = grad_check::grad_check_many(
            |g, xs| {
                let a = g.attention(xs[0], xs[1], xs[2], 3, 2)?;
                let w = g.constant(Tensor::from_fn(&[6, 4], |i| (i as f64).sqrt()));
                let p = g.mul(a, w)?;
                g.sum(p)
            },
            &[q, k, v],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn l2_normalize_rejects_zero_row() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.l2_normalize_rows(x), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn select_rows_accumulates_repeated_indices() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[3, 2], |i| i as f64));
        let s = g.select_rows(x, &[2, 0, 2]).unwrap();
        let y = g.sum(s).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
