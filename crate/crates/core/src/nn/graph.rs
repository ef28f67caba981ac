//! Reverse-mode tape.
//!
//! Values are computed eagerly as ops are recorded. [`Graph::backward`]
//! consumes the tape, walks it once in reverse insertion order (which is a
//! topological order) and returns gradients for leaves created with
//! `requires_grad = true`.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;

use super::tensor::{gemm, gemm_at, gemm_bt, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    AddTable {
        x: Var,
        table: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        valid: Vec<u8>,
        /// Normalization used batch statistics (gradient flows through them).
        batch_stats: bool,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        time: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        time: usize,
        heads: usize,
    },
    MaskedMse {
        pred: Var,
        target: Vec<T>,
        weight: Vec<u8>,
        count: usize,
    },
    Sum {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, for updating
/// running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance over valid rows.
    pub var: Vec<f64>,
}

pub enum NormMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

pub const BN_EPS: f64 = 1e-5;

pub struct Gradients<T> {
    map: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.map.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.map.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, l: &[usize], r: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: l.to_vec(),
        right: r.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// `a[.., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.shape().is_empty() || av.cols() != bv.shape()[0] {
            return Err(dim_err("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("non-empty") = n;
        let out = Tensor::new(shape, gemm(av.data(), bv.data(), m, k, n))?;
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched `a[g, m, k] · b[g, k, n]`, or `a · bᵀ` with `b[g, n, k]`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err("bmm", sa, sb));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(dim_err("bmm", sa, sb));
        }
        let mut data = vec![T::zero(); groups * m * n];
        let (ad, bd) = (av.data(), bv.data());
        data.par_chunks_mut((m * n).max(1))
            .enumerate()
            .for_each(|(g, out)| {
                let ag = &ad[g * m * k..(g + 1) * m * k];
                let bg = &bd[g * k * n..(g + 1) * k * n];
                let c = if transpose_b {
                    gemm_bt(ag, bg, m, k, n)
                } else {
                    gemm(ag, bg, m, k, n)
                };
                out.copy_from_slice(&c);
            });
        let out = Tensor::new(vec![groups, m, n], data)?;
        Ok(self.push(
            out,
            Op::BatchMatMul {
                a,
                b,
                groups,
                m,
                k,
                n,
                transpose_b,
            },
            &[a, b],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a `[cols]` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(dim_err("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(bv.len().max(1)) {
            for (v, &b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Adds a `[time, cols]` table to each consecutive block of `time` rows.
    pub fn add_table(&mut self, x: Var, table: Var) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(table));
        if tv.shape().len() != 2 || tv.cols() != xv.cols() || xv.rows() % tv.rows() != 0 {
            return Err(dim_err("add_table", xv.shape(), tv.shape()));
        }
        let mut data = xv.data().to_vec();
        for block in data.chunks_mut(tv.len()) {
            for (v, &t) in block.iter_mut().zip(tv.data()) {
                *v += t;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddTable { x, table }, &[x, table]))
    }

    /// `x · W + b` with `W[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Relu { x }, &[x])
    }

    /// Inverted dropout. Identity when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    /// Softmax over the last axis. `mask` (same length as `x`, 1 = keep)
    /// gives masked entries exactly zero probability; a fully masked row is
    /// all zeros.
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&[u8]>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return Err(dim_err("softmax mask", xv.shape(), &[m.len()]));
            }
        }
        let cols = xv.cols().max(1);
        let mut data = xv.data().to_vec();
        data.par_chunks_mut(cols).enumerate().for_each(|(r, row)| {
            let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j] == 1);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                row.fill(T::zero());
                return;
            }
            let mut total = 0f64;
            for (j, v) in row.iter_mut().enumerate() {
                if keep(j) {
                    *v = (*v - max).exp();
                    total += v.as_f64();
                } else {
                    *v = T::zero();
                }
            }
            let inv = T::from_f64_lossy(1.0 / total);
            for v in row.iter_mut() {
                *v *= inv;
            }
        });
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax { x }, &[x]))
    }

    /// Per-channel batch norm over rows of `x[rows, channels]`. In training
    /// mode the statistics come from rows with `valid == 1` only and are
    /// returned for running-average updates.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        valid: &[u8],
        mode: NormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if valid.len() != rows {
            return Err(dim_err("batchnorm mask", xv.shape(), &[valid.len()]));
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != cols || bv.len() != cols {
            return Err(dim_err("batchnorm affine", xv.shape(), gv.shape()));
        }
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                let m = valid.iter().filter(|&&v| v == 1).count();
                if m == 0 {
                    return Err(Error::Contract("batchnorm with no valid rows".into()));
                }
                let mut mean = vec![0f64; cols];
                for (row, _) in xv.data().chunks(cols).zip(valid).filter(|(_, &v)| v == 1) {
                    for (acc, &v) in mean.iter_mut().zip(row) {
                        *acc += v.as_f64();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                let mut var = vec![0f64; cols];
                for (row, _) in xv.data().chunks(cols).zip(valid).filter(|(_, &v)| v == 1) {
                    for ((acc, &v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v.as_f64() - mu;
                        *acc += d * d;
                    }
                }
                let unbiased: Vec<f64> = var
                    .iter()
                    .map(|v| if m > 1 { v / (m - 1) as f64 } else { 0.0 })
                    .collect();
                var.iter_mut().for_each(|v| *v /= m as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != cols || var.len() != cols {
                    return Err(dim_err("batchnorm running stats", xv.shape(), &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64_lossy(1.0 / (v + BN_EPS).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64_lossy(v)).collect();
        let mut xhat = xv.data().to_vec();
        let mut out = vec![T::zero(); xhat.len()];
        for (xr, yr) in xhat.chunks_mut(cols).zip(out.chunks_mut(cols)) {
            for j in 0..cols {
                xr[j] = (xr[j] - mean_t[j]) * inv_std[j];
                yr[j] = gv.data()[j] * xr[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let batch_stats = stats.is_some();
        let var_out = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                valid: valid.to_vec(),
                batch_stats,
            },
            &[x, gamma, beta],
        );
        Ok((var_out, stats))
    }

    /// `[batch*time, heads*dh]` to `[batch*heads, time, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, time: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        if heads == 0 || xv.rows() != batch * time || !xv.cols().is_multiple_of(heads) {
            return Err(dim_err("split_heads", xv.shape(), &[batch, time, heads]));
        }
        let dh = xv.cols() / heads;
        let data = permute_heads(xv.data(), batch, time, heads, dh, true);
        let out = Tensor::new(vec![batch * heads, time, dh], data)?;
        Ok(self.push(
            out,
            Op::SplitHeads {
                x,
                batch,
                time,
                heads,
            },
            &[x],
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, time: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || s[0] != batch * heads || s[1] != time {
            return Err(dim_err("merge_heads", s, &[batch, time, heads]));
        }
        let dh = s[2];
        let data = permute_heads(xv.data(), batch, time, heads, dh, false);
        let out = Tensor::new(vec![batch * time, heads * dh], data)?;
        Ok(self.push(
            out,
            Op::MergeHeads {
                x,
                batch,
                time,
                heads,
            },
            &[x],
        ))
    }

    /// Mean squared error over entries with `weight == 1`. Zero when no
    /// entry is weighted.
    pub fn masked_mse(&mut self, pred: Var, target: &[T], weight: &[u8]) -> Result<Var> {
        let pv = self.value(pred);
        if target.len() != pv.len() || weight.len() != pv.len() {
            return Err(dim_err("masked_mse", pv.shape(), &[target.len(), weight.len()]));
        }
        let count = weight.iter().filter(|&&w| w == 1).count();
        let mut total = 0f64;
        for ((&p, &t), &w) in pv.data().iter().zip(target).zip(weight) {
            if w == 1 {
                let d = (p - t).as_f64();
                total += d * d;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let out = Tensor::scalar(T::from_f64_lossy(loss));
        Ok(self.push(
            out,
            Op::MaskedMse {
                pred,
                target: target.to_vec(),
                weight: weight.to_vec(),
                count,
            },
            &[pred],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum_f64();
        self.push(Tensor::scalar(T::from_f64_lossy(total)), Op::Sum { x }, &[x])
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = HashMap::new();
        self.nodes.truncate(loss.0 + 1);

        while let Some(node) = self.nodes.pop() {
            let id = self.nodes.len();
            let Some(g) = grads[id].take() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, delta: Vec<T>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (e, d) in existing.iter_mut().zip(delta) {
                            *e += d;
                        }
                    }
                    slot => *slot = Some(delta),
                }
            };
            let val = |v: Var| nodes[v.0].value.data();
            let req = |v: Var| nodes[v.0].requires_grad;
            match node.op {
                Op::Leaf => {
                    out.insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatMul { a, b, m, k, n } => {
                    if req(a) {
                        acc(a, gemm_bt(&g, val(b), m, n, k));
                    }
                    if req(b) {
                        acc(b, gemm_at(val(a), &g, m, k, n));
                    }
                }
                Op::BatchMatMul {
                    a,
                    b,
                    groups,
                    m,
                    k,
                    n,
                    transpose_b,
                } => {
                    let (ad, bd) = (val(a), val(b));
                    let mut da = vec![T::zero(); groups * m * k];
                    let mut db = vec![T::zero(); groups * k * n];
                    da.par_chunks_mut((m * k).max(1))
                        .zip(db.par_chunks_mut((k * n).max(1)))
                        .enumerate()
                        .for_each(|(i, (da_g, db_g))| {
                            let ag = &ad[i * m * k..(i + 1) * m * k];
                            let bg = &bd[i * k * n..(i + 1) * k * n];
                            let gg = &g[i * m * n..(i + 1) * m * n];
                            if transpose_b {
                                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                                da_g.copy_from_slice(&gemm(gg, bg, m, n, k));
                                db_g.copy_from_slice(&gemm_at(gg, ag, m, n, k));
                            } else {
                                da_g.copy_from_slice(&gemm_bt(gg, bg, m, n, k));
                                db_g.copy_from_slice(&gemm_at(ag, gg, m, k, n));
                            }
                        });
                    if req(a) {
                        acc(a, da);
                    }
                    if req(b) {
                        acc(b, db);
                    }
                }
                Op::Add { a, b } => {
                    if req(b) {
                        acc(b, g.clone());
                    }
                    acc(a, g);
                }
                Op::AddBias { x, bias } => {
                    let cols = nodes[bias.0].value.len();
                    if req(bias) {
                        let mut db = vec![T::zero(); cols];
                        for row in g.chunks(cols.max(1)) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        acc(bias, db);
                    }
                    acc(x, g);
                }
                Op::AddTable { x, table } => {
                    let len = nodes[table.0].value.len();
                    if req(table) {
                        let mut dt = vec![T::zero(); len];
                        for block in g.chunks(len) {
                            for (d, &v) in dt.iter_mut().zip(block) {
                                *d += v;
                            }
                        }
                        acc(table, dt);
                    }
                    acc(x, g);
                }
                Op::Scale { x, factor } => {
                    acc(x, g.into_iter().map(|v| v * factor).collect());
                }
                Op::Relu { x } => {
                    let d = g
                        .iter()
                        .zip(val(x))
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    acc(x, d);
                }
                Op::Dropout { x, mask } => {
                    acc(x, g.iter().zip(&mask).map(|(&gv, &m)| gv * m).collect());
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let cols = node.value.cols().max(1);
                    let mut d = vec![T::zero(); y.len()];
                    d.par_chunks_mut(cols).enumerate().for_each(|(r, dr)| {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    });
                    acc(x, d);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    valid,
                    batch_stats,
                } => {
                    let cols = inv_std.len();
                    let gam = val(gamma).to_vec();
                    if req(gamma) || req(beta) {
                        let mut dg = vec![T::zero(); cols];
                        let mut dbeta = vec![T::zero(); cols];
                        for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            for j in 0..cols {
                                dg[j] += gr[j] * xr[j];
                                dbeta[j] += gr[j];
                            }
                        }
                        acc(gamma, dg);
                        acc(beta, dbeta);
                    }
                    if req(x) {
                        let mut dx = vec![T::zero(); g.len()];
                        if batch_stats {
                            let m = valid.iter().filter(|&&v| v == 1).count() as f64;
                            let mut sum_d = vec![0f64; cols];
                            let mut sum_dx = vec![0f64; cols];
                            for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                                for j in 0..cols {
                                    let dxhat = (gr[j] * gam[j]).as_f64();
                                    sum_d[j] += dxhat;
                                    sum_dx[j] += dxhat * xr[j].as_f64();
                                }
                            }
                            let mean_d: Vec<T> = sum_d.iter().map(|v| T::from_f64_lossy(v / m)).collect();
                            let mean_dx: Vec<T> =
                                sum_dx.iter().map(|v| T::from_f64_lossy(v / m)).collect();
                            for (r, ((dr, gr), xr)) in dx
                                .chunks_mut(cols)
                                .zip(g.chunks(cols))
                                .zip(xhat.chunks(cols))
                                .enumerate()
                            {
                                let in_stats = valid[r] == 1;
                                for j in 0..cols {
                                    let dxhat = gr[j] * gam[j];
                                    dr[j] = if in_stats {
                                        inv_std[j] * (dxhat - mean_d[j] - xr[j] * mean_dx[j])
                                    } else {
                                        inv_std[j] * dxhat
                                    };
                                }
                            }
                        } else {
                            for (dr, gr) in dx.chunks_mut(cols).zip(g.chunks(cols)) {
                                for j in 0..cols {
                                    dr[j] = gr[j] * gam[j] * inv_std[j];
                                }
                            }
                        }
                        acc(x, dx);
                    }
                }
                Op::SplitHeads {
                    x,
                    batch,
                    time,
                    heads,
                } => {
                    let dh = node.value.cols();
                    acc(x, permute_heads(&g, batch, time, heads, dh, false));
                }
                Op::MergeHeads {
                    x,
                    batch,
                    time,
                    heads,
                } => {
                    let dh = node.value.cols() / heads;
                    acc(x, permute_heads(&g, batch, time, heads, dh, true));
                }
                Op::MaskedMse {
                    pred,
                    target,
                    weight,
                    count,
                } => {
                    let scale = if count == 0 {
                        T::zero()
                    } else {
                        T::from_f64_lossy(2.0 / count as f64) * g[0]
                    };
                    let d = val(pred)
                        .iter()
                        .zip(&target)
                        .zip(&weight)
                        .map(|((&p, &t), &w)| if w == 1 { (p - t) * scale } else { T::zero() })
                        .collect();
                    acc(pred, d);
                }
                Op::Sum { x } => {
                    let n = nodes[x.0].value.len();
                    acc(x, vec![g[0]; n]);
                }
            }
        }
        Ok(Gradients { map: out })
    }
}

/// `split == true`: `[b*t, h*d] -> [b*h, t, d]`; otherwise the inverse.
fn permute_heads<T: Scalar>(
    src: &[T],
    batch: usize,
    time: usize,
    heads: usize,
    dh: usize,
    split: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        for t in 0..time {
            for h in 0..heads {
                let merged = (b * time + t) * heads * dh + h * dh;
                let split_at = ((b * heads + h) * time + t) * dh;
                let (from, to) = if split { (merged, split_at) } else { (split_at, merged) };
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    out
}
