//! Dynamic tape for reverse-mode differentiation over matrices.
//!
//! Every op appends a node holding its forward value and enough context to
//! run the vector-Jacobian product later. Rank-1 tensors behave as `1 × n`
//! rows. Parameters are borrowed from a [`ParamStore`] rather than copied.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, gemm};
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        tb: bool,
    },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    SubCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Ln(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    RowMean(Var),
    RowStd(Var),
    Standardize {
        a: Var,
        normed: Vec<f64>,
        denom: Vec<f64>,
        std: Vec<f64>,
    },
    Pick {
        a: Var,
        at: Vec<(usize, usize)>,
    },
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<Option<usize>>,
        count: usize,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<ParamId, Var>,
}

/// Result of [`Tape::backward`]: gradients for parameters and leaves.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn leaf(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.params.get_mut(&id)
    }

    pub fn insert_param(&mut self, id: ParamId, grad: Tensor) {
        self.params.insert(id, grad);
    }

    /// Adds `other`'s parameter gradients into `self`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.params {
            match self.params.get_mut(id) {
                Some(mine) => kernels::axpy(mine.data_mut(), 1.0, g.data()),
                None => {
                    self.params.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.params.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.matrix_dims().expect("tape values are matrices")
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn mat(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).matrix_dims()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Borrowed counterpart of [`Tape::constant`].
    pub fn constant_ref(&mut self, value: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input whose gradient is reported via
    /// [`Gradients::leaf`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Borrows a parameter onto the tape. Repeated calls return the same
    /// node.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (m, k) = self.mat(a)?;
        let (br, bc) = self.mat(b)?;
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(if tb { "matmul_t" } else { "matmul" }, self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), tb, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, tb }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.mat(a)?;
        let db = self.mat(b)?;
        if da != db {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(da)
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.same_shape(op_name, a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[r, c], data)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, op_name: &'static str, a: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.mat(a)?;
        let (rr, rc) = self.mat(row)?;
        if rr != 1 || rc != c {
            return Err(Error::shape(op_name, self.shape(a), self.shape(row)));
        }
        let rv = self.value(row).data();
        let data = self.value(a).data().chunks(c).flat_map(|x| x.iter().zip(rv).map(|(x, y)| f(*x, *y))).collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Tensor::new(&[r, c], data)?, op, ng))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` element-wise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    fn col_broadcast(&mut self, op_name: &'static str, a: Var, col: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.mat(a)?;
        let (cr, cc) = self.mat(col)?;
        if cc != 1 || cr != r {
            return Err(Error::shape(op_name, self.shape(a), self.shape(col)));
        }
        let cv = self.value(col).data();
        let f = &f;
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .zip(cv)
            .flat_map(|(x, y)| x.iter().map(move |x| f(*x, *y)))
            .collect();
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(Tensor::new(&[r, c], data)?, op, ng))
    }

    /// Subtracts an `m × 1` column from every column of `a`.
    pub fn sub_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.col_broadcast("sub_col", a, col, |x, y| x - y, Op::SubCol(a, col))
    }

    /// Divides every column of `a` element-wise by an `m × 1` column.
    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.col_broadcast("div_col", a, col, |x, y| x / y, Op::DivCol(a, col))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| f(*x)).collect();
        let t = Tensor::new(v.shape(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Ln(a))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat(a)?;
        let data = kernels::softmax_rows(self.value(a).data(), c);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&[r, c], data)?, Op::Softmax(a), ng))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat(a)?;
        let data = kernels::log_softmax_rows(self.value(a).data(), c);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&[r, c], data)?, Op::LogSoftmax(a), ng))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let (_, c) = self.mat(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.mat(p)?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(&[rows, c], data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let (r, _) = self.mat(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.mat(p)?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(&[r, total], data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat(a)?;
        if start + len > r || len == 0 {
            return Err(Error::contract(format!("slice_rows {start}..{} out of {r} rows", start + len)));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&[len, c], data)?, Op::SliceRows { a, start }, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat(a)?;
        if start + len > c || len == 0 {
            return Err(Error::contract(format!("slice_cols {start}..{} out of {c} columns", start + len)));
        }
        let src = self.value(a).data();
        let data = (0..r).flat_map(|i| src[i * c + start..i * c + start + len].iter().copied()).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&[r, len], data)?, Op::SliceCols { a, start }, ng))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.mat(table)?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Vocab(format!("token id {bad} out of range for table of {r} rows")));
        }
        let src = self.value(table).data();
        let data = ids.iter().flat_map(|&i| src[i * c..(i + 1) * c].iter().copied()).collect();
        let ng = self.ng(table);
        Ok(self.push(Tensor::new(&[ids.len(), c], data)?, Op::Gather { table, ids: ids.to_vec() }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        t.matrix_dims()?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Per-row mean as an `m × 1` column.
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat(a)?;
        let (mu, _) = kernels::row_stats(self.value(a).data(), c);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&[r, 1], mu)?, Op::RowMean(a), ng))
    }

    /// Per-row population standard deviation as an `m × 1` column.
    pub fn row_std(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat(a)?;
        let (_, sd) = kernels::row_stats(self.value(a).data(), c);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&[r, 1], sd)?, Op::RowStd(a), ng))
    }

    /// `(r - mean) / (std + eps)` per row, with population std. Fused form of
    /// `div_col(sub_col(r, row_mean(r)), add_scalar(row_std(r), eps))`.
    pub fn standardize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.mat(a)?;
        let (mu, sd) = kernels::row_stats(self.value(a).data(), c);
        let denom: Vec<f64> = sd.iter().map(|s| s + eps).collect();
        let normed: Vec<f64> = self
            .value(a)
            .data()
            .chunks(c)
            .enumerate()
            .flat_map(|(i, row)| {
                let (m, d) = (mu[i], denom[i]);
                row.iter().map(move |x| (x - m) / d)
            })
            .collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&[r, c], normed.clone())?, Op::Standardize { a, normed, denom, std: sd }, ng))
    }

    /// Gathers single elements `(row, col)` into a `k × 1` column.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.mat(a)?;
        if let Some(bad) = at.iter().find(|(i, j)| *i >= r || *j >= c) {
            return Err(Error::contract(format!("pick {bad:?} outside {r}x{c}")));
        }
        let data = at.iter().map(|&(i, j)| self.value(a).data()[i * c + j]).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&[at.len(), 1], data)?, Op::Pick { a, at: at.to_vec() }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Fused multi-head scaled dot-product attention. `q` is `m × d`, `k`
    /// and `v` are `n × d`, each head owns a block of `d / heads` columns,
    /// and `mask` (`m × n`) is added to the scores. Head outputs are
    /// concatenated to `m × d`. Per-head weights are available through
    /// [`Tape::attention_weights`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<Var>) -> Result<Var> {
        let (m, d) = self.mat(q)?;
        let (n, dk_) = self.mat(k)?;
        if dk_ != d || self.mat(v)? != (n, d) {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        if let Some(mv) = mask {
            if self.mat(mv)? != (m, n) {
                return Err(Error::shape("attention mask", self.shape(mv), &[m, n]));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let maskv = mask.map(|mv| self.value(mv).data());
        let mut probs = vec![0.0; heads * m * n];
        let mut out = vec![0.0; m * d];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..m {
                let row = &mut probs[(h * m + i) * n..(h * m + i + 1) * n];
                let qi = &qv[i * d + c0..i * d + c0 + dh];
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &kv[j * d + c0..j * d + c0 + dh];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    *r = dot * scale + maskv.map_or(0.0, |mk| mk[i * n + j]);
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                let oi = &mut out[i * d + c0..i * d + c0 + dh];
                for (j, r) in row.iter_mut().enumerate() {
                    *r /= sum;
                    kernels::axpy(oi, *r, &vv[j * d + c0..j * d + c0 + dh]);
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(Tensor::new(&[m, d], out)?, Op::Attention { q, k, v, heads, probs }, ng))
    }

    /// Per-head `m × n` weight matrices of an [`Tape::attention`] node.
    pub fn attention_weights(&self, node: Var) -> Option<Vec<Tensor>> {
        match &self.nodes[node.0].op {
            Op::Attention { q, k, heads, probs, .. } => {
                let m = self.value(*q).rows();
                let n = self.value(*k).rows();
                Some(
                    probs
                        .chunks(m * n)
                        .take(*heads)
                        .map(|p| Tensor::new(&[m, n], p.to_vec()).expect("sizes match"))
                        .collect(),
                )
            }
            _ => None,
        }
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows whose target is `None` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.mat(logits)?;
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::Vocab(format!("target id {bad} >= vocabulary size {c}")));
        }
        let logp = kernels::log_softmax_rows(self.value(logits).data(), c);
        let count = targets.iter().flatten().count();
        let total: f64 = targets.iter().enumerate().filter_map(|(i, t)| t.map(|t| -logp[i * c + t])).sum();
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let probs = logp.iter().map(|x| x.exp()).collect();
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                count,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns fresh gradients; nothing is
    /// accumulated across calls.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(idx), Tensor::new(node.value.shape(), g)?);
                }
                Op::Param(id) => {
                    out.params.insert(*id, Tensor::new(node.value.shape(), g)?);
                }
                op => self.propagate(op, &node.value, &g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let (orows, ocols) = dims(out);
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("handled by caller"),
            Op::MatMul { a, b, tb } => {
                let (m, k) = dims(self.value(*a));
                let n = ocols;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, bv, !*tb, ga, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *tb {
                        // B is n × k: dB = dCᵀ · A
                        gemm(n, m, k, g, true, av, false, gb, 1.0);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(k, m, n, av, true, g, false, gb, 1.0);
                    }
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    // out is c × r, a is r × c
                    let (r, c) = (ocols, orows);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::axpy(ga, 1.0, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::axpy(gb, 1.0, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::axpy(ga, 1.0, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::axpy(gb, -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::axpy(ga, 1.0, g);
                }
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in g.chunks(ocols) {
                        kernels::axpy(gr, 1.0, chunk);
                    }
                }
            }
            Op::MulRow(a, row) => {
                let av = self.value(*a).data();
                let rv = self.value(*row).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for (gc, dc) in g.chunks(ocols).zip(ga.chunks_mut(ocols)) {
                        for j in 0..ocols {
                            dc[j] += gc[j] * rv[j];
                        }
                    }
                }
                if let Some(gr) = self.acc(grads, *row) {
                    for (gc, ac) in g.chunks(ocols).zip(av.chunks(ocols)) {
                        for j in 0..ocols {
                            gr[j] += gc[j] * ac[j];
                        }
                    }
                }
            }
            Op::SubCol(a, col) => {
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::axpy(ga, 1.0, g);
                }
                if let Some(gc) = self.acc(grads, *col) {
                    for (i, chunk) in g.chunks(ocols).enumerate() {
                        gc[i] -= chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::DivCol(a, col) => {
                let av = self.value(*a).data();
                let cv = self.value(*col).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, (gc, dc)) in g.chunks(ocols).zip(ga.chunks_mut(ocols)).enumerate() {
                        for j in 0..ocols {
                            dc[j] += gc[j] / cv[i];
                        }
                    }
                }
                if let Some(gcol) = self.acc(grads, *col) {
                    for (i, (gc, ac)) in g.chunks(ocols).zip(av.chunks(ocols)).enumerate() {
                        let dot: f64 = gc.iter().zip(ac).map(|(x, y)| x * y).sum();
                        gcol[i] -= dot / (cv[i] * cv[i]);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::axpy(ga, *s, g);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::axpy(ga, 1.0, g);
                }
            }
            Op::Tanh(a) => {
                let y = out.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Ln(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        *d += gi / xi;
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (m, d) = (orows, ocols);
                let n = self.value(*k).rows();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qv = self.value(*q).data();
                let kv = self.value(*k).data();
                let vv = self.value(*v).data();
                let mut dq = vec![0.0; m * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut ds = vec![0.0; n];
                for h in 0..*heads {
                    let c0 = h * dh;
                    for i in 0..m {
                        let p = &probs[(h * m + i) * n..(h * m + i + 1) * n];
                        let gi = &g[i * d + c0..i * d + c0 + dh];
                        let mut dot = 0.0;
                        for j in 0..n {
                            let vj = &vv[j * d + c0..j * d + c0 + dh];
                            let dp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            ds[j] = dp;
                            dot += dp * p[j];
                            kernels::axpy(&mut dv[j * d + c0..j * d + c0 + dh], p[j], gi);
                        }
                        let qi = &qv[i * d + c0..i * d + c0 + dh];
                        for j in 0..n {
                            let s = p[j] * (ds[j] - dot) * scale;
                            if s == 0.0 {
                                continue;
                            }
                            kernels::axpy(&mut dq[i * d + c0..i * d + c0 + dh], s, &kv[j * d + c0..j * d + c0 + dh]);
                            kernels::axpy(&mut dk[j * d + c0..j * d + c0 + dh], s, qi);
                        }
                    }
                }
                for (var, local) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(acc) = self.acc(grads, var) {
                        kernels::axpy(acc, 1.0, &local);
                    }
                }
            }
            Op::Softmax(a) => {
                let y = out.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gc, yc), dc) in g.chunks(ocols).zip(y.chunks(ocols)).zip(ga.chunks_mut(ocols)) {
                        let dot: f64 = gc.iter().zip(yc).map(|(x, y)| x * y).sum();
                        for j in 0..ocols {
                            dc[j] += yc[j] * (gc[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = out.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gc, yc), dc) in g.chunks(ocols).zip(y.chunks(ocols)).zip(ga.chunks_mut(ocols)) {
                        let total: f64 = gc.iter().sum();
                        for j in 0..ocols {
                            dc[j] += gc[j] - yc[j].exp() * total;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        kernels::axpy(gp, 1.0, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let (_, w) = dims(self.value(p));
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..orows {
                            kernels::axpy(&mut gp[i * w..(i + 1) * w], 1.0, &g[i * ocols + col..i * ocols + col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows { a, start } => {
                let (_, c) = dims(self.value(*a));
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::axpy(&mut ga[start * c..(start + orows) * c], 1.0, g);
                }
            }
            Op::SliceCols { a, start } => {
                let (_, c) = dims(self.value(*a));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..orows {
                        kernels::axpy(&mut ga[i * c + start..i * c + start + ocols], 1.0, &g[i * ocols..(i + 1) * ocols]);
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = self.acc(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        kernels::axpy(&mut gt[id * ocols..(id + 1) * ocols], 1.0, &g[i * ocols..(i + 1) * ocols]);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::axpy(ga, 1.0, g);
                }
            }
            Op::RowMean(a) => {
                let (_, c) = dims(self.value(*a));
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, dc) in ga.chunks_mut(c).enumerate() {
                        let share = g[i] / c as f64;
                        dc.iter_mut().for_each(|d| *d += share);
                    }
                }
            }
            Op::RowStd(a) => {
                let (_, c) = dims(self.value(*a));
                let x = self.value(*a).data();
                let sd = out.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, (dc, xc)) in ga.chunks_mut(c).zip(x.chunks(c)).enumerate() {
                        if sd[i] == 0.0 {
                            continue;
                        }
                        let mu = xc.iter().sum::<f64>() / c as f64;
                        let k = g[i] / (c as f64 * sd[i]);
                        for j in 0..c {
                            dc[j] += k * (xc[j] - mu);
                        }
                    }
                }
            }
            Op::Standardize { a, normed, denom, std } => {
                let c = ocols as f64;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..orows {
                        let gr = &g[i * ocols..(i + 1) * ocols];
                        let nr = &normed[i * ocols..(i + 1) * ocols];
                        let dc = &mut ga[i * ocols..(i + 1) * ocols];
                        let s = denom[i];
                        let gmean = gr.iter().sum::<f64>() / c;
                        // x - mu = normed * s
                        let coupling = if std[i] > 0.0 {
                            let dot: f64 = gr.iter().zip(nr).map(|(x, y)| x * y * s).sum();
                            dot / (c * std[i] * s * s)
                        } else {
                            0.0
                        };
                        for j in 0..ocols {
                            dc[j] += (gr[j] - gmean) / s - nr[j] * s * coupling;
                        }
                    }
                }
            }
            Op::Pick { a, at } => {
                let (_, c) = dims(self.value(*a));
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, &(i, j)) in at.iter().enumerate() {
                        ga[i * c + j] += g[k];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::CrossEntropy { logits, probs, targets, count } => {
                if *count == 0 {
                    return Ok(());
                }
                let (_, c) = dims(self.value(*logits));
                let k = g[0] / *count as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            let row = &mut gl[i * c..(i + 1) * c];
                            for j in 0..c {
                                row[j] += k * probs[i * c + j];
                            }
                            row[*t] -= k;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
