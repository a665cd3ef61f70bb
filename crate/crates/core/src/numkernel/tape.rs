//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every forward primitive appends a node holding its output value and the
//! information its vector-Jacobian product needs. `backward` replays the
//! nodes in reverse order exactly once, accumulating gradients additively
//! into every node that feeds more than one consumer.

use std::collections::HashMap;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Concat {
        parts: Vec<Var>,
    },
    MaxGroups {
        x: Var,
        argmax: Vec<u32>,
    },
    SumGroups {
        x: Var,
        group: usize,
    },
    Gather {
        x: Var,
        idx: Vec<u32>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumSquares {
        x: Var,
    },
    RowDot {
        a: Var,
        b: Var,
    },
    RowTransform3 {
        x: Var,
        mats: Vec<[T; 9]>,
    },
    RowNormalize {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed operations for one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn expect_rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::shape(op, shape, &[]));
    }
    Ok((shape[0], shape[1]))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Argmax indices retained by a [`Tape::max_groups`] node.
    pub fn argmax(&self, v: Var) -> Option<&[u32]> {
        match &self.nodes[v.0].op {
            Op::MaxGroups { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a parameter block. Repeated calls return the same handle, so
    /// every consumer of a block shares one node and one gradient slot.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let trainable = store.entry(id).trainable;
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(&id).copied()
    }

    // ---- forward primitives ------------------------------------------------

    /// `x @ w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = expect_rank2("linear", self.shape(x))?;
        let (win, fout) = expect_rank2("linear", self.shape(w))?;
        if fin != win {
            return Err(Error::shape("linear", self.shape(x), self.shape(w)));
        }
        let mut out = Tensor::zeros(&[n, fout]);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.numel() != fout {
                return Err(Error::shape("linear bias", self.shape(w), bias.shape()));
            }
            for row in out.data_mut().chunks_exact_mut(fout) {
                row.copy_from_slice(bias.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            n,
            fin,
            fout,
            T::one(),
            self.value(x).data(),
            fin as isize,
            1,
            self.value(w).data(),
            fout as isize,
            1,
            beta,
            out.data_mut(),
            fout as isize,
            1,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v * c).collect()).unwrap();
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale { x, c }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v.max(T::zero())).collect()).unwrap();
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::of(slope);
        let t = self.value(x);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { v * slope })
                .collect(),
        )
        .unwrap();
        let rg = self.any_grad(&[x]);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    /// Batch normalization over the row axis of `x: [n, c]` using batch
    /// statistics. Returns the output and the (mean, biased variance) per column.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c) = expect_rank2("batch_norm", self.shape(x))?;
        if n == 0 {
            return Err(Error::shape("batch_norm", self.shape(x), &[]));
        }
        let xs = self.value(x).data();
        let inv_n = T::one() / T::of(n as f64);
        let mut mean = vec![T::zero(); c];
        for row in xs.chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_n);
        let mut var = vec![T::zero(); c];
        for row in xs.chunks_exact(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s *= inv_n);
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + T::of(eps)).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
        );
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + T::of(eps)).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, mean, &inv_std)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
        ))
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> Result<(Tensor<T>, Vec<T>)> {
        let (_, c) = expect_rank2("batch_norm", self.shape(x))?;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() != c || b.len() != c || mean.len() != c || inv_std.len() != c {
            return Err(Error::shape("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let xs = self.value(x).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for ((row, hrow), orow) in xs
            .chunks_exact(c)
            .zip(xhat.chunks_exact_mut(c))
            .zip(out.chunks_exact_mut(c))
        {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                hrow[j] = h;
                orow[j] = g[j] * h + b[j];
            }
        }
        Ok((Tensor::new(self.shape(x).to_vec(), out)?, xhat))
    }

    /// Column-wise concatenation of rank-2 tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (n, _) = expect_rank2("concat", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc) = expect_rank2("concat", self.shape(p))?;
            if pn != n {
                return Err(Error::shape("concat", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![n, total], out)?,
            Op::Concat { parts: parts.to_vec() },
            rg,
        ))
    }

    /// Max over consecutive row groups: `[g * group, c] -> [g, c]`. The first
    /// maximal row wins ties; argmax indices are retained for routing.
    pub fn max_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (n, c) = expect_rank2("max_groups", self.shape(x))?;
        if group == 0 || n % group != 0 {
            return Err(Error::invalid(format!(
                "max_groups: {n} rows not divisible into groups of {group}"
            )));
        }
        let g = n / group;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(g * c);
        let mut argmax = Vec::with_capacity(g * c);
        for gi in 0..g {
            let base = gi * group;
            out.extend_from_slice(&xs[base * c..(base + 1) * c]);
            argmax.extend(std::iter::repeat_n(base as u32, c));
            let o = &mut out[gi * c..(gi + 1) * c];
            let a = &mut argmax[gi * c..(gi + 1) * c];
            for r in base + 1..base + group {
                let row = &xs[r * c..(r + 1) * c];
                for j in 0..c {
                    if row[j] > o[j] {
                        o[j] = row[j];
                        a[j] = r as u32;
                    }
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![g, c], out)?, Op::MaxGroups { x, argmax }, rg))
    }

    /// Max over the row axis of a rank-2 tensor.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (n, _) = expect_rank2("max_rows", self.shape(x))?;
        self.max_groups(x, n)
    }

    /// Sum over consecutive row groups: `[g * group, c] -> [g, c]`, in row order.
    pub fn sum_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (n, c) = expect_rank2("sum_groups", self.shape(x))?;
        if group == 0 || n % group != 0 {
            return Err(Error::invalid(format!(
                "sum_groups: {n} rows not divisible into groups of {group}"
            )));
        }
        let g = n / group;
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); g * c];
        for (r, row) in xs.chunks_exact(c).enumerate() {
            let o = &mut out[(r / group) * c..(r / group + 1) * c];
            for (acc, &v) in o.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![g, c], out)?, Op::SumGroups { x, group }, rg))
    }

    /// Row gather: `out[r] = x[idx[r]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = expect_rank2("gather_rows", self.shape(x))?;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(Error::invalid(format!(
                    "gather_rows: index {i} out of range for {n} rows"
                )));
            }
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::Gather {
                x,
                idx: idx.iter().map(|&i| i as u32).collect(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::of(t.numel().max(1) as f64);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(m), Op::Mean { x }, rg)
    }

    /// Squared L2 norm of all entries.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares { x }, rg)
    }

    /// Row-wise dot products: `[n, c] x [n, c] -> [n, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("row_dot", ta.shape(), tb.shape()));
        }
        let (n, c) = expect_rank2("row_dot", ta.shape())?;
        let out = ta
            .data()
            .chunks_exact(c)
            .zip(tb.data().chunks_exact(c))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, 1], out)?, Op::RowDot { a, b }, rg))
    }

    /// Right-multiplies row `r` of `x: [n, 3]` by the 3x3 matrix `mats[r]`
    /// (row-major).
    pub fn row_transform3(&mut self, x: Var, mats: Vec<[T; 9]>) -> Result<Var> {
        let (n, c) = expect_rank2("row_transform3", self.shape(x))?;
        if c != 3 || mats.len() != n {
            return Err(Error::shape("row_transform3", self.shape(x), &[mats.len(), 3, 3]));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * 3);
        for (row, m) in xs.chunks_exact(3).zip(&mats) {
            for j in 0..3 {
                out.push(row[0] * m[j] + row[1] * m[3 + j] + row[2] * m[6 + j]);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![n, 3], out)?, Op::RowTransform3 { x, mats }, rg))
    }

    /// Scales each row to unit L2 norm; rows shorter than `eps` are divided by `eps`.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, c) = expect_rank2("row_normalize", self.shape(x))?;
        let eps = T::of(eps);
        let xs = self.value(x).data();
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * c);
        for row in xs.chunks_exact(c) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms.push(nrm);
            out.extend(row.iter().map(|&v| v / nrm));
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::RowNormalize { x, norms, eps }, rg))
    }

    /// Mean softmax cross-entropy of `logits: [n, classes]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = expect_rank2("softmax_cross_entropy", self.shape(logits))?;
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                self.shape(logits),
                &[labels.len()],
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let xs = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = T::zero();
        for (row, &label) in xs.chunks_exact(c).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: T = exps.iter().copied().sum();
            loss += z.ln() + m - row[label];
            probs.extend(exps.iter().map(|&e| e / z));
        }
        let loss = loss / T::of(n.max(1) as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        let keep = T::of(1.0 / (1.0 - p));
        let t = self.value(x);
        let mask: Vec<T> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Propagates `d loss / d node` from a scalar loss to every leaf that
    /// requires gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.vjp(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => Some(Tensor::new(node.value.shape().to_vec(), g).unwrap()),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            params: self.param_vars.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, fin) = self.value(*x).dims2();
                let fout = out.shape()[1];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    T::gemm(
                        n,
                        fout,
                        fin,
                        T::one(),
                        g,
                        fout as isize,
                        1,
                        self.value(*w).data(),
                        1,
                        fout as isize,
                        T::zero(),
                        &mut dx,
                        fin as isize,
                        1,
                    );
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); fin * fout];
                    T::gemm(
                        fin,
                        n,
                        fout,
                        T::one(),
                        self.value(*x).data(),
                        1,
                        fin as isize,
                        g,
                        fout as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        fout as isize,
                        1,
                    );
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); fout];
                        for row in g.chunks_exact(fout) {
                            for (a, &v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        n as isize,
                        1,
                        self.value(*b).data(),
                        1,
                        n as isize,
                        T::zero(),
                        &mut da,
                        k as isize,
                        1,
                    );
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*a).data(),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        T::zero(),
                        &mut db,
                        n as isize,
                        1,
                    );
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, g.iter().map(|&d| d * *c).collect());
            }
            Op::Relu { x } => {
                let dx = g
                    .iter()
                    .zip(out.data())
                    .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| if v > T::zero() { d } else { d * *slope })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let n = xhat.len() / c;
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        sum_g[j] += grow[j];
                        sum_gx[j] += grow[j] * hrow[j];
                    }
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); n * c];
                    if *batch_stats {
                        let nn = T::of(n as f64);
                        let k: Vec<T> = (0..c).map(|j| gam[j] * inv_std[j] / nn).collect();
                        for ((drow, grow), hrow) in
                            dx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c))
                        {
                            for j in 0..c {
                                drow[j] = k[j] * (nn * grow[j] - sum_g[j] - hrow[j] * sum_gx[j]);
                            }
                        }
                    } else {
                        let k: Vec<T> = (0..c).map(|j| gam[j] * inv_std[j]).collect();
                        for (drow, grow) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                            for j in 0..c {
                                drow[j] = grow[j] * k[j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, sum_gx);
                self.accumulate(grads, *beta, sum_g);
            }
            Op::Concat { parts } => {
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.wants(p) {
                        let dp = g
                            .chunks_exact(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::MaxGroups { x, argmax } => {
                let c = out.shape()[1];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (k, (&d, &r)) in g.iter().zip(argmax).enumerate() {
                    dx[r as usize * c + k % c] += d;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SumGroups { x, group } => {
                let c = out.shape()[1];
                let n = self.value(*x).shape()[0];
                let mut dx = Vec::with_capacity(n * c);
                for r in 0..n {
                    dx.extend_from_slice(&g[(r / group) * c..(r / group + 1) * c]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gather { x, idx } => {
                let c = out.shape()[1];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (row, &i) in g.chunks_exact(c).zip(idx) {
                    let dst = &mut dx[i as usize * c..(i as usize + 1) * c];
                    for (a, &v) in dst.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                let d = g[0] / T::of(n.max(1) as f64);
                self.accumulate(grads, *x, vec![d; n]);
            }
            Op::SumSquares { x } => {
                let two = T::of(2.0) * g[0];
                let dx = self.value(*x).data().iter().map(|&v| two * v).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::RowDot { a, b } => {
                let c = self.value(*a).shape()[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let da = vb.iter().enumerate().map(|(k, &y)| g[k / c] * y).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = va.iter().enumerate().map(|(k, &x)| g[k / c] * x).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::RowTransform3 { x, mats } => {
                let mut dx = Vec::with_capacity(g.len());
                for (row, m) in g.chunks_exact(3).zip(mats) {
                    for i in 0..3 {
                        dx.push(row[0] * m[3 * i] + row[1] * m[3 * i + 1] + row[2] * m[3 * i + 2]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RowNormalize { x, norms, eps } => {
                let c = out.shape()[1];
                let mut dx = Vec::with_capacity(g.len());
                for ((grow, yrow), &nrm) in g.chunks_exact(c).zip(out.data().chunks_exact(c)).zip(norms) {
                    if nrm > *eps {
                        let proj: T = grow.iter().zip(yrow).map(|(&d, &y)| d * y).sum();
                        dx.extend(grow.iter().zip(yrow).map(|(&d, &y)| (d - y * proj) / nrm));
                    } else {
                        dx.extend(grow.iter().map(|&d| d / nrm));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let c = probs.len() / labels.len().max(1);
                let scale = g[0] / T::of(labels.len().max(1) as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * c + l] -= scale;
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, g.iter().zip(mask).map(|(&d, &m)| d * m).collect());
            }
        }
    }
}

/// Gradients of leaf nodes after a reverse pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec1(t: &mut Tape<f64>, xs: &[f64], grad: bool) -> Var {
        let v = Tensor::from_f64(&[xs.len()], xs).unwrap();
        if grad {
            t.leaf(v)
        } else {
            t.constant(v)
        }
    }

    #[test]
    fn max_over_rows_with_argmax() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![7.0, 2.0]]));
        let m = t.max_rows(x).unwrap();
        assert_eq!(t.value(m).data(), &[7.0, 5.0]);
        assert_eq!(t.argmax(m).unwrap(), &[1, 0]);
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_rows(&[vec![3.0], vec![3.0], vec![1.0]]));
        let m = t.max_rows(x).unwrap();
        let s = t.sum(m);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn leaky_relu_slope() {
        let mut t = Tape::<f64>::new();
        let x = vec1(&mut t, &[-1.0, 2.0], false);
        let y = t.leaky_relu(x, 0.2);
        assert_eq!(t.value(y).data(), &[-0.2, 2.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::<f64>::new();
        let x = vec1(&mut t, &[1.0, -2.0, 3.0], true);
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::<f64>::new();
        let x = vec1(&mut t, &[2.0], true);
        let y = t.mul(x, x).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::<f64>::new();
        let x = vec1(&mut t, &[1.0, 2.0], true);
        let y = t.relu(x);
        assert!(matches!(t.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = Tape::<f64>::new();
        let a = vec1(&mut t, &[1.0, 2.0], false);
        let b = vec1(&mut t, &[1.0, 2.0, 3.0], false);
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(
            err.contains("add") && err.contains("[2]") && err.contains("[3]"),
            "{err}"
        );
    }

    #[test]
    fn param_registration_is_shared() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::zeros(&[2, 2]), true);
        let mut t = Tape::new();
        let a = t.param(&store, id);
        let b = t.param(&store, id);
        assert_eq!(a, b);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x * 3 + x  =>  dy/dx = 4
        let mut t = Tape::<f64>::new();
        let x = vec1(&mut t, &[1.5], true);
        let a = t.scale(x, 3.0);
        let y = t.add(a, x).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn dropout_is_inverted_and_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(&[1000], 1.0));
        let y = t.dropout(x, 0.5, &mut rng).unwrap();
        let vals = t.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }
}
