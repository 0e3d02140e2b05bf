//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! Every operation appends a node holding its forward value. Nodes are
//! created in topological order, so [`Tape::backward`] walks them in
//! reverse and accumulates vector-Jacobian products into their inputs.
//! A tape supports one backward pass; build a new tape for the next step.
//!
//! Index-valued arguments (gathered rows, selected experts, labels) are
//! recorded as constants: no gradient flows through a discrete choice.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_t_into, t_matmul_into, Array};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    AddConst(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    SegmentSoftmax {
        x: Var,
        lens: Vec<usize>,
        temperature: f64,
    },
    ScaleRows(Var, Var),
    ScatterAddRows(Vec<(Var, Vec<usize>)>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Array {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Array::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Array::zeros(shape),
        }
    }

    pub fn touched(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected 2-D input, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulT(a, b), ng))
    }

    /// Adds a length-`c` bias to every row of an `[r × c]` array.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims(x, "add_row_bias")?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias of {} for {c} columns", b.len()),
            ));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddRowBias(x, bias), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a constant array (e.g. sampled noise); gradient passes through.
    pub fn add_const(&mut self, x: Var, c: &Array) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::shape("add_const", "shape mismatch"));
        }
        let mut out = self.value(x).clone();
        for (o, v) in out.data_mut().iter_mut().zip(c.data()) {
            *o += v;
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::AddConst(x), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.dims(x, "softmax_rows")?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::SoftmaxRows(x), ng))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x, "layer_norm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("layer_norm", "affine parameters must match width"));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Array::new(vec![r, c], out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let n = self.value(x).rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {n}")));
        }
        let out = self.value(x).select_rows(&rows);
        let ng = self.needs(x);
        Ok(self.push(out, Op::GatherRows(x, rows), ng))
    }

    /// Picks flat elements of `x` into a 1-D array.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape("gather", format!("index {bad} of {}", src.len())));
        }
        let data: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        let out = Array::new(vec![idx.len()], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Gather(x, idx), ng))
    }

    /// Softmax of `x / temperature` within consecutive segments of a 1-D
    /// array; `lens` gives the segment lengths.
    pub fn segment_softmax(&mut self, x: Var, lens: Vec<usize>, temperature: f64) -> Result<Var> {
        let src = self.value(x).data();
        if lens.iter().sum::<usize>() != src.len() {
            return Err(Error::shape("segment_softmax", "segment lengths do not cover input"));
        }
        let mut out = Vec::with_capacity(src.len());
        let mut start = 0;
        for &len in &lens {
            let seg = &src[start..start + len];
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = seg.iter().map(|v| ((v - max) / temperature).exp()).collect();
            let sum: f64 = exps.iter().sum();
            out.extend(exps.into_iter().map(|e| e / sum));
            start += len;
        }
        let out = Array::new(vec![src.len()], out)?;
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::SegmentSoftmax {
                x,
                lens,
                temperature,
            },
            ng,
        ))
    }

    /// Multiplies row `i` of `x` by `scale[i]`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (r, c) = self.dims(x, "scale_rows")?;
        let s = self.value(scale).data();
        if s.len() != r {
            return Err(Error::shape("scale_rows", format!("{} scales for {r} rows", s.len())));
        }
        let mut out = self.value(x).clone();
        for (row, sv) in out.data_mut().chunks_mut(c).zip(s) {
            for v in row {
                *v *= sv;
            }
        }
        let ng = self.needs(x) || self.needs(scale);
        Ok(self.push(out, Op::ScaleRows(x, scale), ng))
    }

    /// Sums row blocks into a zero `[rows × cols]` array: row `j` of each
    /// part lands on output row `targets[j]`.
    pub fn scatter_add_rows(
        &mut self,
        parts: Vec<(Var, Vec<usize>)>,
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let mut out = vec![0.0; rows * cols];
        for (part, targets) in &parts {
            let v = self.value(*part);
            if v.cols() != cols || v.rows() != targets.len() {
                return Err(Error::shape("scatter_add_rows", "part shape mismatch"));
            }
            for (j, &t) in targets.iter().enumerate() {
                if t >= rows {
                    return Err(Error::shape("scatter_add_rows", format!("row {t} of {rows}")));
                }
                for (o, x) in out[t * cols..(t + 1) * cols].iter_mut().zip(v.row(j)) {
                    *o += x;
                }
            }
        }
        let ng = parts.iter().any(|(p, _)| self.needs(*p));
        let out = Array::new(vec![rows, cols], out)?;
        Ok(self.push(out, Op::ScatterAddRows(parts), ng))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits, "cross_entropy")?;
        if labels.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {r} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Domain(format!("label {bad} outside [0, {c})")));
        }
        let (loss, probs) = cross_entropy_value(self.value(logits).data(), labels, c);
        let ng = self.needs(logits);
        Ok(self.push(
            Array::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Array::scalar(s), Op::Sum(x), ng)
    }

    /// Hash of the sign pattern of every ReLU input on the tape. Two
    /// forward passes with equal signatures took the same linear piece.
    pub fn relu_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for v in self.value(x).data() {
                    (*v > 0.0).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Reverse pass from `loss`, seeded with ones.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0; self.nodes[loss.0].value.len()]);

        for idx in (0..=loss.0).rev() {
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &dout, &mut grads);
            }
            grads[idx] = Some(dout);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, dout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let len = nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(g);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(*a) {
                    acc(*a, &mut |g| matmul_t_into(dout, bv.data(), g, m, n, k));
                }
                if wants(*b) {
                    acc(*b, &mut |g| t_matmul_into(av.data(), dout, g, m, k, n));
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if wants(*a) {
                    acc(*a, &mut |g| matmul_into(dout, bv.data(), g, m, n, k));
                }
                if wants(*b) {
                    acc(*b, &mut |g| t_matmul_into(dout, av.data(), g, m, n, k));
                }
            }
            Op::AddRowBias(x, b) => {
                if wants(*x) {
                    acc(*x, &mut |g| add_into(g, dout));
                }
                if wants(*b) {
                    let c = nodes[b.0].value.len();
                    acc(*b, &mut |g| {
                        for row in dout.chunks(c) {
                            add_into(g, row);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        acc(*v, &mut |g| add_into(g, dout));
                    }
                }
            }
            Op::AddConst(x) => acc(*x, &mut |g| add_into(g, dout)),
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |g| {
                    for ((gi, &d), &xi) in g.iter_mut().zip(dout).zip(xv) {
                        if xi > 0.0 {
                            *gi += d;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*x, &mut |g| {
                    for ((gr, yr), dr) in g.chunks_mut(c).zip(y.chunks(c)).zip(dout.chunks(c)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for ((gi, yi), di) in gr.iter_mut().zip(yr).zip(dr) {
                            *gi += yi * (di - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                if wants(*gamma) {
                    acc(*gamma, &mut |g| {
                        for (dr, hr) in dout.chunks(c).zip(xhat.chunks(c)) {
                            for ((gi, d), h) in g.iter_mut().zip(dr).zip(hr) {
                                *gi += d * h;
                            }
                        }
                    });
                }
                if wants(*beta) {
                    acc(*beta, &mut |g| {
                        for dr in dout.chunks(c) {
                            add_into(g, dr);
                        }
                    });
                }
                if wants(*x) {
                    let gam = nodes[gamma.0].value.data();
                    acc(*x, &mut |g| {
                        for (i, (dr, hr)) in dout.chunks(c).zip(xhat.chunks(c)).enumerate() {
                            let dh: Vec<f64> = dr.iter().zip(gam).map(|(d, w)| d * w).collect();
                            let sum_dh: f64 = dh.iter().sum();
                            let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                            let scale = inv_std[i] / c as f64;
                            for j in 0..c {
                                g[i * c + j] +=
                                    scale * (c as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                            }
                        }
                    });
                }
            }
            Op::GatherRows(x, rows) => {
                let c = node.value.cols();
                acc(*x, &mut |g| {
                    for (j, &r) in rows.iter().enumerate() {
                        add_into(&mut g[r * c..(r + 1) * c], &dout[j * c..(j + 1) * c]);
                    }
                });
            }
            Op::Gather(x, idx) => acc(*x, &mut |g| {
                for (&i, d) in idx.iter().zip(dout) {
                    g[i] += d;
                }
            }),
            Op::SegmentSoftmax {
                x,
                lens,
                temperature,
            } => {
                let y = node.value.data();
                acc(*x, &mut |g| {
                    let mut start = 0;
                    for &len in lens {
                        let seg = start..start + len;
                        let dot: f64 = y[seg.clone()].iter().zip(&dout[seg.clone()]).map(|(a, b)| a * b).sum();
                        for j in seg {
                            g[j] += y[j] * (dout[j] - dot) / temperature;
                        }
                        start += len;
                    }
                });
            }
            Op::ScaleRows(x, s) => {
                let xv = &nodes[x.0].value;
                let sv = nodes[s.0].value.data();
                let c = xv.cols();
                if wants(*x) {
                    acc(*x, &mut |g| {
                        for ((gr, dr), s) in g.chunks_mut(c).zip(dout.chunks(c)).zip(sv) {
                            for (gi, d) in gr.iter_mut().zip(dr) {
                                *gi += s * d;
                            }
                        }
                    });
                }
                if wants(*s) {
                    acc(*s, &mut |g| {
                        for (i, (dr, xr)) in dout.chunks(c).zip(xv.data().chunks(c)).enumerate() {
                            g[i] += dr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    });
                }
            }
            Op::ScatterAddRows(parts) => {
                let c = node.value.cols();
                for (part, targets) in parts {
                    if wants(*part) {
                        acc(*part, &mut |g| {
                            for (j, &t) in targets.iter().enumerate() {
                                add_into(&mut g[j * c..(j + 1) * c], &dout[t * c..(t + 1) * c]);
                            }
                        });
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = nodes[logits.0].value.cols();
                let scale = dout[0] / labels.len() as f64;
                acc(*logits, &mut |g| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            g[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| {
                for gi in g.iter_mut() {
                    *gi += dout[0];
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Mean cross-entropy and row softmax probabilities, via log-sum-exp.
pub(crate) fn cross_entropy_value(logits: &[f64], labels: &[usize], c: usize) -> (f64, Vec<f64>) {
    let mut probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label];
        for j in 0..c {
            probs[i * c + j] = (row[j] - lse).exp();
        }
    }
    (total / labels.len().max(1) as f64, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> Array {
        Array::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central differences of a scalar function over every entry of `x`.
    fn numeric_grad(x: &Array, f: &dyn Fn(&Array) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn linear_map_gradient_is_outer_product() {
        // loss = sum(x · W): dW[p][j] = Σ_i x[i][p]
        let x = arr(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let w = arr(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let wv = t.param(w);
        let y = t.matmul(xv, wv).unwrap();
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(wv).data(), &[0.0, 0.0, 2.5, 2.5, 7.0, 7.0]);
        assert!(!g.touched(xv));
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut t = Tape::new();
        let x = t.param(Array::scalar(2.0));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::BackwardConsumed)));
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let x0 = arr(&[3, 4], &[0.3, -1.2, 0.8, 0.1, 1.5, -0.4, 0.2, -0.9, 0.05, 0.7, -0.3, 1.1]);
        let w0 = arr(&[5, 4], &(0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 9.0).collect::<Vec<_>>());
        let gamma0 = arr(&[5], &[1.0, 0.9, 1.1, 1.2, 0.8]);
        let labels = [1usize, 4, 0];

        let run = |x: &Array, w: &Array, gamma: &Array, grads: bool| -> (f64, Option<(Array, Array, Array)>) {
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let wv = t.param(w.clone());
            let gv = t.param(gamma.clone());
            let bv = t.constant(Array::full(&[5], 0.1));
            let logits = t.matmul_t(xv, wv).unwrap();
            let probs = t.softmax_rows(logits).unwrap();
            let picked = t.gather(probs, vec![1, 2, 5, 9, 13, 14]).unwrap();
            let w = t.segment_softmax(picked, vec![2, 1, 3], 0.5).unwrap();
            let rows = t.gather_rows(logits, vec![0, 0, 1, 2, 2, 2]).unwrap();
            let act = t.relu(rows);
            let scaled = t.scale_rows(act, w).unwrap();
            let mixed = t.scatter_add_rows(vec![(scaled, vec![0, 1, 1, 2, 0, 2])], 3, 5).unwrap();
            let res = t.add(mixed, logits).unwrap();
            let normed = t.layer_norm(res, gv, bv).unwrap();
            let biased = t.add_row_bias(normed, gv).unwrap();
            let loss = t.cross_entropy(biased, &labels).unwrap();
            let value = t.value(loss).data()[0];
            if grads {
                let g = t.backward(loss).unwrap();
                (value, Some((g.wrt(xv), g.wrt(wv), g.wrt(gv))))
            } else {
                (value, None)
            }
        };

        let (_, g) = run(&x0, &w0, &gamma0, true);
        let (gx, gw, gg) = g.unwrap();
        assert_close(gx.data(), &numeric_grad(&x0, &|x| run(x, &w0, &gamma0, false).0), 1e-6);
        assert_close(gw.data(), &numeric_grad(&w0, &|w| run(&x0, w, &gamma0, false).0), 1e-6);
        assert_close(gg.data(), &numeric_grad(&gamma0, &|g| run(&x0, &w0, g, false).0), 1e-6);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = [0.2, -1.3, 2.2, 0.0, 0.7, 0.7, -0.1, 3.0, 1.0];
        let labels = [2, 0, 1];
        let (loss, _) = cross_entropy_value(&logits, &labels, 3);
        let direct: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let row = &logits[i * 3..i * 3 + 3];
                let z: f64 = row.iter().map(|v: &f64| v.exp()).sum();
                -(row[l].exp() / z).ln()
            })
            .sum::<f64>()
            / 3.0;
        assert!((loss - direct).abs() < 1e-12);
        let (uniform, _) = cross_entropy_value(&[0.0; 10], &[3], 10);
        assert!((uniform - 10f64.ln()).abs() < 1e-12);
    }
}
