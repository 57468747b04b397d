//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] as they execute. [`Tape::backward`]
//! replays the tape in reverse from a scalar loss, filling a gradient slot
//! for every node that depends on a differentiable leaf. Gradients from
//! repeated backward calls accumulate until [`Tape::zero_grads`].
//!
//! Parameters enter the tape through [`Tape::param`], which binds each
//! [`ParamId`] to exactly one leaf per tape; every usage site of a shared
//! parameter therefore reads (and differentiates through) the same node.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matrix_dims, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    SmoothL1(Var, Var),
    Concat {
        a: Var,
        b: Var,
        a_inner: usize,
        b_inner: usize,
    },
    SoftmaxRows {
        x: Var,
        mask: Vec<bool>,
    },
    Reshape(Var),
    PairSum(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    SigmoidCrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Copies the value of `x` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Gradients of every bound parameter, in binding order.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = self.grads[v.0]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]);
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Adds this tape's parameter gradients into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, &g);
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `x[m×n] + bias[n]`, the bias repeated on every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = matrix_dims(self.shape(x));
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (v, bb) in data[r * n..(r + 1) * n].iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Identity => x,
            Activation::Relu => self.relu(x),
            Activation::Tanh => self.tanh(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.numel().max(1) as f64;
        let s = t.data().iter().sum::<f64>() / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Elementwise smooth-L1: `½d²` for `|d| < 1`, `|d| − ½` otherwise.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        let t = self.zip_same("smooth_l1", pred, target, |p, q| smooth_l1(p - q))?;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(t, Op::SmoothL1(pred, target), rg))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if axis >= sa.len() {
            return Err(Error::Axis { axis, rank: sa.len() });
        }
        if sa.len() != sb.len() || sa.iter().zip(&sb).enumerate().any(|(d, (x, y))| d != axis && x != y) {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let a_inner: usize = sa[axis..].iter().product();
        let b_inner: usize = sb[axis..].iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            data.extend_from_slice(&da[o * a_inner..(o + 1) * a_inner]);
            data.extend_from_slice(&db[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { a, b, a_inner, b_inner }, rg))
    }

    /// Masked softmax of a vector. Masked entries are exactly zero.
    pub fn softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var> {
        if self.value(logits).numel() != mask.len() {
            return Err(Error::shape("softmax", self.shape(logits), &[mask.len()]));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::DegenerateAttention);
        }
        let shape = self.shape(logits).to_vec();
        let row = self.reshape(logits, &[1, mask.len()])?;
        let y = self.softmax_rows(row, mask)?;
        self.reshape(y, &shape)
    }

    /// Row-wise masked softmax of a matrix; `mask` is elementwise, `true` =
    /// admissible. Rows without any admissible entry come out all zero.
    pub fn softmax_rows(&mut self, logits: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = matrix_dims(self.shape(logits));
        if mask.len() != m * n {
            return Err(Error::shape("softmax_rows", self.shape(logits), &[mask.len()]));
        }
        let x = self.value(logits).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let xs = &x[r * n..(r + 1) * n];
            let ms = &mask[r * n..(r + 1) * n];
            let max = xs
                .iter()
                .zip(ms)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let ys = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0;
            for j in 0..n {
                if ms[j] {
                    ys[j] = (xs[j] - max).exp();
                    z += ys[j];
                }
            }
            ys.iter_mut().for_each(|y| *y /= z);
        }
        let t = Tensor::new(self.shape(logits).to_vec(), out)?;
        let rg = self.rg(logits);
        Ok(self.push(
            t,
            Op::SoftmaxRows {
                x: logits,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `out[i, j, :] = a[i, :] + b[j, :]` for `a, b` of shape `[N, d]`.
    pub fn pair_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sa != sb {
            return Err(Error::shape("pair_sum", sa, sb));
        }
        let (n, d) = (sa[0], sa[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * n * d];
        for i in 0..n {
            for j in 0..n {
                let o = &mut out[(i * n + j) * d..(i * n + j + 1) * d];
                for k in 0..d {
                    o[k] = da[i * d + k] + db[j * d + k];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, n, d], out)?, Op::PairSum(a, b), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (m, n) = matrix_dims(&s);
        if s.len() != 2 || start > end || end > m {
            return Err(Error::shape("slice_rows", &s, &[start, end]));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![end - start, n], data)?, Op::SliceRows { x, start }, rg))
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[target_i])` over rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (m, n) = matrix_dims(self.shape(logits));
        if targets.len() != m || weights.len() != m {
            return Err(Error::shape(
                "softmax_cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Label { label: bad, classes: n });
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for r in 0..m {
            let xs = &x[r * n..(r + 1) * n];
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = xs.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            for j in 0..n {
                probs[r * n + j] = (xs[j] - lse).exp();
            }
            loss += weights[r] * (lse - xs[targets[r]]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ_i w_i Σ_c BCE(σ(logits_ic), targets_ic)`.
    pub fn sigmoid_cross_entropy(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let (m, n) = matrix_dims(self.shape(logits));
        if targets.len() != m * n || weights.len() != m {
            return Err(Error::shape(
                "sigmoid_cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let x = self.value(logits).data();
        let mut loss = 0.0;
        for r in 0..m {
            let mut row = 0.0;
            for c in 0..n {
                let (v, y) = (x[r * n + c], targets[r * n + c]);
                row += v.max(0.0) - v * y + (-v.abs()).exp().ln_1p();
            }
            loss += weights[r] * row;
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SigmoidCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`, adding into existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut adj);
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        // Accumulates `f(k)` into the adjoint of `v` elementwise.
        let acc = |v: Var, adj: &mut [Option<Vec<f64>>], f: &dyn Fn(usize) -> f64| {
            if !needs(v) {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
            for (k, s) in slot.iter_mut().enumerate() {
                *s += f(k);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let slot = adj[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    gemm_nt_acc(m, n, k, g, val(*b), slot);
                }
                if needs(*b) {
                    let slot = adj[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    gemm_tn_acc(m, k, n, val(*a), g, slot);
                }
            }
            Op::Add(a, b) => {
                acc(*a, adj, &|k| g[k]);
                acc(*b, adj, &|k| g[k]);
            }
            Op::Sub(a, b) => {
                acc(*a, adj, &|k| g[k]);
                acc(*b, adj, &|k| -g[k]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, adj, &|k| g[k] * vb[k]);
                acc(*b, adj, &|k| g[k] * va[k]);
            }
            Op::AddRow(x, bias) => {
                acc(*x, adj, &|k| g[k]);
                let n = self.nodes[bias.0].value.numel();
                let m = g.len() / n.max(1);
                acc(*bias, adj, &|c| (0..m).map(|r| g[r * n + c]).sum());
            }
            Op::Scale(x, c) => acc(*x, adj, &|k| c * g[k]),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, adj, &|k| g[k]),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, adj, &|k| g[k] * y[k] * (1.0 - y[k]));
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, adj, &|k| g[k] * (1.0 - y[k] * y[k]));
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, adj, &|k| if xv[k] > 0.0 { g[k] } else { 0.0 });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, adj, &|k| g[k] * y[k]);
            }
            Op::Sum(x) => acc(*x, adj, &|_| g[0]),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel().max(1) as f64;
                acc(*x, adj, &|_| g[0] / n);
            }
            Op::SmoothL1(p, t) => {
                let (vp, vt) = (val(*p), val(*t));
                acc(*p, adj, &|k| g[k] * smooth_l1_grad(vp[k] - vt[k]));
                acc(*t, adj, &|k| -g[k] * smooth_l1_grad(vp[k] - vt[k]));
            }
            Op::Concat { a, b, a_inner, b_inner } => {
                let w = a_inner + b_inner;
                acc(*a, adj, &|k| g[(k / a_inner) * w + k % a_inner]);
                acc(*b, adj, &|k| g[(k / b_inner) * w + a_inner + k % b_inner]);
            }
            Op::SoftmaxRows { x, mask } => {
                let y = node.value.data();
                let (m, n) = matrix_dims(node.value.shape());
                let dots: Vec<f64> = (0..m)
                    .map(|r| (0..n).map(|j| g[r * n + j] * y[r * n + j]).sum())
                    .collect();
                acc(*x, adj, &|k| {
                    if mask[k] {
                        y[k] * (g[k] - dots[k / n])
                    } else {
                        0.0
                    }
                });
            }
            Op::PairSum(a, b) => {
                let s = node.value.shape();
                let (n, d) = (s[0], s[2]);
                acc(*a, adj, &|k| {
                    let (i, c) = (k / d, k % d);
                    (0..n).map(|j| g[(i * n + j) * d + c]).sum()
                });
                acc(*b, adj, &|k| {
                    let (j, c) = (k / d, k % d);
                    (0..n).map(|i| g[(i * n + j) * d + c]).sum()
                });
            }
            Op::SliceRows { x, start } => {
                let cols = matrix_dims(node.value.shape()).1;
                let (lo, hi) = (start * cols, start * cols + g.len());
                acc(*x, adj, &|k| if k >= lo && k < hi { g[k - lo] } else { 0.0 });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let n = probs.len() / targets.len().max(1);
                acc(*logits, adj, &|k| {
                    let (r, c) = (k / n, k % n);
                    let hot = if targets[r] == c { 1.0 } else { 0.0 };
                    g[0] * weights[r] * (probs[k] - hot)
                });
            }
            Op::SigmoidCrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let x = val(*logits);
                let n = targets.len() / weights.len().max(1);
                acc(*logits, adj, &|k| g[0] * weights[k / n] * (sigmoid(x[k]) - targets[k]));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// `c = a·b` for row-major `a: m×k`, `b: k×n`.
///
/// Every output element accumulates its products in ascending `k`, whatever
/// the matrix sizes, so appending zero-weighted rows or columns leaves the
/// existing entries bit-identical.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    c.fill(0.0);
    gemm_nn_acc(m, k, n, a, b, c);
}

fn gemm_nn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let bk = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in ci.iter_mut().zip(bk) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c += g·bᵀ` with `g: m×n`, `b: k×n`, `c: m×k`.
fn gemm_nt_acc(m: usize, n: usize, k: usize, g: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let bk = &b[kk * n..(kk + 1) * n];
            c[i * k + kk] += gi.iter().zip(bk).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c += aᵀ·g` with `a: m×k`, `g: m×n`, `c: k×n`.
fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], g: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let ck = &mut c[kk * n..(kk + 1) * n];
            for (cv, gv) in ck.iter_mut().zip(gi) {
                *cv += aik * gv;
            }
        }
    }
}
