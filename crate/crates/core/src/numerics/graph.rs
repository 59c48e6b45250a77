//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every intermediate [`Tensor`] together with the
//! operation that produced it. [`Graph::backward`] walks the tape in reverse
//! and returns exact gradients for every node that depends on a parameter.

use std::collections::HashMap;

use super::tensor::{
    gelu, gelu_grad, gemm_raw, matmul_t, moments, sigmoid, softmax_in_place, softplus, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where an additive attention bias enters the attention computation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasTarget {
    /// Added to the scaled dot-product scores before the row softmax.
    #[default]
    Scores,
    /// Added to the attention probabilities after the row softmax.
    Probabilities,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Transpose(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv: Vec<f64>,
    },
    Gelu(Var),
    Softplus(Var),
    Exp(Var),
    Log1p(Var),
    Square(Var),
    L2Normalize {
        a: Var,
        axis: usize,
        norms: Vec<f64>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        heads: usize,
        target: BiasTarget,
        probs: Vec<Tensor>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Tensor,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The tape. Cheap to create; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (model parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Per-head attention probabilities recorded by an [`Graph::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&[Tensor]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = matmul_t(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 × C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::shape("add_row", x.shape(), r.shape()));
        }
        let mut value = x.clone();
        let c = x.cols();
        for chunk in value.data_mut().chunks_mut(c.max(1)) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies `a` by a `1 × 1` node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(
                "mul_scalar",
                self.value(a).shape(),
                self.value(s).shape(),
            ));
        }
        let value = self.value(a).scale(self.value(s).item());
        Ok(self.push(value, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// Multiplies row `i` of `a` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let x = self.value(a);
        if factors.len() != x.rows() {
            return Err(Error::shape("scale_rows", x.shape(), &[factors.len()]));
        }
        let mut value = x.clone();
        for (r, f) in factors.iter().enumerate() {
            value.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push(value, Op::ScaleRows(a, factors), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = self.value(a).row_softmax();
        self.push(value, Op::RowSoftmax(a), &[a])
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` (`1 × C`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        for p in [gamma, beta] {
            let pv = self.value(p);
            if pv.rows() != 1 || pv.cols() != c {
                return Err(Error::shape("layer_norm", xv.shape(), pv.shape()));
            }
        }
        let mut xhat = xv.clone();
        let mut inv = Vec::with_capacity(xv.rows());
        for row in xhat.data_mut().chunks_mut(c) {
            let (mean, s) = moments(row);
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv.push(s);
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut value = xhat.clone();
        for row in value.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push(value, Op::Softplus(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    /// `ln(1 + x)`; every entry must exceed −1.
    pub fn log1p(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.data().iter().find(|&&v| v <= -1.0 || v.is_nan()) {
            return Err(Error::Domain(format!(
                "log1p argument {bad} is not above -1"
            )));
        }
        let value = x.map(f64::ln_1p);
        Ok(self.push(value, Op::Log1p(a), &[a]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a), &[a])
    }

    /// Unit-normalizes columns (`axis == 0`) or rows (`axis == 1`).
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let norms: Vec<f64> = if axis == 0 {
            (0..c)
                .map(|j| (0..r).map(|i| x.get(i, j).powi(2)).sum::<f64>().sqrt())
                .collect()
        } else {
            (0..r)
                .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        };
        let value = x.l2_normalize(axis);
        self.push(value, Op::L2Normalize { a, axis, norms }, &[a])
    }

    /// Selects rows of `table` by index (embedding lookup, row slicing).
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(table);
        let c = t.cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::shape("gather_rows", t.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_rows(idx.len(), c, data)?;
        Ok(self.push(value, Op::GatherRows { table, idx }, &[table]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.gather_rows(a, (start..start + len).collect())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Data("concat_rows of nothing".into()))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(Error::shape(
                    "concat_rows",
                    self.value(*first).shape(),
                    v.shape(),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::from_rows(rows, c, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Multi-head scaled dot-product attention over one sequence.
    ///
    /// `q`, `k`, `v` are `L × D`; heads split `D` into contiguous blocks. The
    /// optional `L × L` bias is shared by every head.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        heads: usize,
        target: BiasTarget,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (l, d) = (qv.rows(), qv.cols());
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", qv.shape(), &[heads]));
        }
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.rows() != l || bv.cols() != l {
                return Err(Error::shape("attention bias", &[l, l], bv.shape()));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(l, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut s = vec![0.0; l * l];
            gemm_raw(
                l,
                dh,
                l,
                scale,
                &qv.data()[off..],
                d,
                1,
                &kv.data()[off..],
                1,
                d,
                &mut s,
                l,
                1,
            );
            if let (Some(b), BiasTarget::Scores) = (bias, target) {
                for (x, y) in s.iter_mut().zip(self.value(b).data()) {
                    *x += y;
                }
            }
            for row in s.chunks_mut(l) {
                softmax_in_place(row);
            }
            let p = Tensor::from_rows(l, l, s)?;
            let mixed = match (bias, target) {
                (Some(b), BiasTarget::Probabilities) => p.add(self.value(b))?,
                _ => p.clone(),
            };
            gemm_raw(
                l,
                l,
                dh,
                1.0,
                mixed.data(),
                l,
                1,
                &vv.data()[off..],
                d,
                1,
                &mut out.data_mut()[off..],
                d,
                1,
            );
            probs.push(p);
        }
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                target,
                probs,
            },
            &inputs,
        ))
    }

    /// Mean (optionally class-weighted) negative log-softmax of `targets`.
    ///
    /// With weights, the result is `Σ w[t_i]·nll_i / Σ w[t_i]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let x = self.value(logits);
        let (m, c) = (x.rows(), x.cols());
        if targets.len() != m || m == 0 {
            return Err(Error::shape("cross_entropy", x.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("cross_entropy target", x.shape(), &[bad]));
        }
        let weights: Vec<f64> = match class_weights {
            Some(w) if w.len() != c => {
                return Err(Error::shape("cross_entropy weights", x.shape(), &[w.len()]))
            }
            Some(w) => targets.iter().map(|&t| w[t]).collect(),
            None => vec![1.0; m],
        };
        let probs = x.row_softmax();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = x.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += weights[i] * (lse - row[t]);
        }
        let denom: f64 = weights.iter().sum();
        let value = Tensor::scalar(total / denom);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::scalar(x.sum() / x.len() as f64);
        self.push(value, Op::Mean(a), &[a])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", lv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        let mut acc = Accumulator {
            nodes: &self.nodes,
            grads: &mut grads,
        };
        for i in (0..=loss.0).rev() {
            let Some(dy) = acc.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &dy, &mut acc)?;
            acc.grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, dy: &Tensor, acc: &mut Accumulator<'_>) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if acc.wants(*a) {
                    // dA = dY · op(B)^T (transposed back when A was transposed)
                    let g = if *ta {
                        matmul_t(bv, *tb, dy, true)?
                    } else {
                        matmul_t(dy, false, bv, !*tb)?
                    };
                    acc.add(*a, g);
                }
                if acc.wants(*b) {
                    let g = if *tb {
                        matmul_t(dy, true, av, *ta)?
                    } else {
                        matmul_t(av, !*ta, dy, false)?
                    };
                    acc.add(*b, g);
                }
            }
            Op::Add(a, b) => {
                acc.add_ref(*a, dy);
                acc.add_ref(*b, dy);
            }
            Op::Sub(a, b) => {
                acc.add_ref(*a, dy);
                if acc.wants(*b) {
                    acc.add(*b, dy.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if acc.wants(*a) {
                    acc.add(*a, dy.mul(self.value(*b))?);
                }
                if acc.wants(*b) {
                    acc.add(*b, dy.mul(self.value(*a))?);
                }
            }
            Op::AddRow(a, row) => {
                acc.add_ref(*a, dy);
                if acc.wants(*row) {
                    let c = dy.cols();
                    let mut g = vec![0.0; c];
                    for chunk in dy.data().chunks(c) {
                        for (s, v) in g.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    acc.add(*row, Tensor::row_vector(g));
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).item();
                if acc.wants(*a) {
                    acc.add(*a, dy.scale(sv));
                }
                if acc.wants(*s) {
                    let d: f64 = dy
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g * x)
                        .sum();
                    acc.add(*s, Tensor::new(self.value(*s).shape().to_vec(), vec![d])?);
                }
            }
            Op::Scale(a, c) => acc.add(*a, dy.scale(*c)),
            Op::ScaleRows(a, f) => {
                let mut g = dy.clone();
                for (r, fr) in f.iter().enumerate() {
                    g.row_mut(r).iter_mut().for_each(|v| *v *= fr);
                }
                acc.add(*a, g);
            }
            Op::Transpose(a) => acc.add(*a, dy.transpose()),
            Op::RowSoftmax(a) => {
                let mut g = dy.clone();
                let c = y.cols();
                for (gr, pr) in g.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (gv, pv) in gr.iter_mut().zip(pr) {
                        *gv = pv * (*gv - dot);
                    }
                }
                acc.add(*a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv,
            } => {
                let c = y.cols();
                let gv = self.value(*gamma).data();
                if acc.wants(*x) {
                    let mut dx = Tensor::zeros(y.rows(), c);
                    for r in 0..y.rows() {
                        let dyr = dy.row(r);
                        let xr = xhat.row(r);
                        let dxhat: Vec<f64> = dyr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv[r] * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                    acc.add(*x, dx);
                }
                if acc.wants(*gamma) {
                    let mut g = vec![0.0; c];
                    for r in 0..y.rows() {
                        for (j, s) in g.iter_mut().enumerate() {
                            *s += dy.get(r, j) * xhat.get(r, j);
                        }
                    }
                    acc.add(*gamma, Tensor::row_vector(g));
                }
                if acc.wants(*beta) {
                    let mut g = vec![0.0; c];
                    for chunk in dy.data().chunks(c) {
                        for (s, v) in g.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    acc.add(*beta, Tensor::row_vector(g));
                }
            }
            Op::Gelu(a) => acc.add(*a, self.elementwise(dy, *a, gelu_grad)?),
            Op::Softplus(a) => acc.add(*a, self.elementwise(dy, *a, sigmoid)?),
            Op::Exp(a) => acc.add(*a, dy.mul(y)?),
            Op::Log1p(a) => acc.add(*a, self.elementwise(dy, *a, |x| 1.0 / (1.0 + x))?),
            Op::Square(a) => acc.add(*a, self.elementwise(dy, *a, |x| 2.0 * x)?),
            Op::L2Normalize { a, axis, norms } => {
                let (r, c) = (y.rows(), y.cols());
                let mut g = Tensor::zeros(r, c);
                if *axis == 0 {
                    for j in 0..c {
                        if norms[j] == 0.0 {
                            continue;
                        }
                        let dot: f64 = (0..r).map(|i| y.get(i, j) * dy.get(i, j)).sum();
                        for i in 0..r {
                            g.set(i, j, (dy.get(i, j) - y.get(i, j) * dot) / norms[j]);
                        }
                    }
                } else {
                    for i in 0..r {
                        if norms[i] == 0.0 {
                            continue;
                        }
                        let dot: f64 = y.row(i).iter().zip(dy.row(i)).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g.set(i, j, (dy.get(i, j) - y.get(i, j) * dot) / norms[i]);
                        }
                    }
                }
                acc.add(*a, g);
            }
            Op::GatherRows { table, idx } => {
                let t = self.value(*table);
                let c = t.cols();
                let mut g = Tensor::zeros(t.rows(), c);
                for (k, &row) in idx.iter().enumerate() {
                    for (o, v) in g.row_mut(row).iter_mut().zip(dy.row(k)) {
                        *o += v;
                    }
                }
                acc.add(*table, g);
            }
            Op::ConcatRows(parts) => {
                let c = y.cols();
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if acc.wants(p) {
                        let data = dy.data()[start * c..(start + rows) * c].to_vec();
                        acc.add(p, Tensor::from_rows(rows, c, data)?);
                    }
                    start += rows;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                target,
                probs,
            } => {
                self.attention_backward(dy, (*q, *k, *v), *bias, *heads, *target, probs, acc)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let scale = dy.item() / weights.iter().sum::<f64>();
                let mut g = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let row = g.row_mut(i);
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= weights[i] * scale);
                }
                acc.add(*logits, g);
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                acc.add(
                    *a,
                    Tensor::new(x.shape().to_vec(), vec![dy.item(); x.len()])?,
                );
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let v = dy.item() / x.len() as f64;
                acc.add(*a, Tensor::new(x.shape().to_vec(), vec![v; x.len()])?);
            }
        }
        Ok(())
    }

    fn elementwise(&self, dy: &Tensor, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        dy.mul(&self.value(a).map(f))
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        dy: &Tensor,
        (q, k, v): (Var, Var, Var),
        bias: Option<Var>,
        heads: usize,
        target: BiasTarget,
        probs: &[Tensor],
        acc: &mut Accumulator<'_>,
    ) -> Result<()> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (l, d) = (qv.rows(), qv.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(l, d);
        let mut dk = Tensor::zeros(l, d);
        let mut dv = Tensor::zeros(l, d);
        let mut dbias = Tensor::zeros(l, l);
        for (h, p) in probs.iter().enumerate() {
            let off = h * dh;
            let mixed = match (bias, target) {
                (Some(b), BiasTarget::Probabilities) => p.add(self.value(b))?,
                _ => p.clone(),
            };
            // dP = dO_h · V_h^T
            let mut dp = vec![0.0; l * l];
            gemm_raw(
                l,
                dh,
                l,
                1.0,
                &dy.data()[off..],
                d,
                1,
                &vv.data()[off..],
                1,
                d,
                &mut dp,
                l,
                1,
            );
            // dV_h += P^T · dO_h
            gemm_raw(
                l,
                l,
                dh,
                1.0,
                mixed.data(),
                1,
                l,
                &dy.data()[off..],
                d,
                1,
                &mut dv.data_mut()[off..],
                d,
                1,
            );
            if bias.is_some() && target == BiasTarget::Probabilities {
                dbias
                    .data_mut()
                    .iter_mut()
                    .zip(&dp)
                    .for_each(|(a, b)| *a += b);
            }
            let mut ds = dp;
            for (dsr, pr) in ds.chunks_mut(l).zip(p.data().chunks(l)) {
                let dot: f64 = dsr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (g, pv) in dsr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot);
                }
            }
            if bias.is_some() && target == BiasTarget::Scores {
                dbias
                    .data_mut()
                    .iter_mut()
                    .zip(&ds)
                    .for_each(|(a, b)| *a += b);
            }
            // dQ_h += scale · dS · K_h ; dK_h += scale · dS^T · Q_h
            gemm_raw(
                l,
                l,
                dh,
                scale,
                &ds,
                l,
                1,
                &kv.data()[off..],
                d,
                1,
                &mut dq.data_mut()[off..],
                d,
                1,
            );
            gemm_raw(
                l,
                l,
                dh,
                scale,
                &ds,
                1,
                l,
                &qv.data()[off..],
                d,
                1,
                &mut dk.data_mut()[off..],
                d,
                1,
            );
        }
        acc.add(q, dq);
        acc.add(k, dk);
        acc.add(v, dv);
        if let Some(b) = bias {
            acc.add(b, dbias);
        }
        Ok(())
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut Vec<Option<Tensor>>,
}

impl Accumulator<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn add(&mut self, v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.axpy(1.0, &g),
            slot => *slot = Some(g),
        }
    }

    fn add_ref(&mut self, v: Var, g: &Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.axpy(1.0, g),
            slot => *slot = Some(g.clone()),
        }
    }
}

/// Named parameter leaves bound into a graph.
#[derive(Debug, Default, Clone)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
