//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward and
//! backward pass. Nodes are appended in execution order, so a node's inputs
//! always precede it and the backward sweep is a single reverse scan that
//! visits every node once.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar coordinates.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var, f64),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MaskCols(Var, Vec<bool>),
    MeanRows(Var),
    Sum(Var),
    CoxLoss {
        risks: Var,
        times: Vec<f64>,
        events: Vec<bool>,
    },
}

struct Node {
    op: Op,
    /// `None` for parameter leaves, which read the store directly.
    value: Option<Tensor>,
}

/// Gradients indexed by [`ParamId`]; `None` for parameters the loss does not reach.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn set(&mut self, id: ParamId, g: Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(g);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Per-node gradients from [`Graph::backward_all`].
pub struct VarGradients {
    grads: Vec<Option<Tensor>>,
}

impl VarGradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) * 0.398_942_280_401_432_7;
    cdf + x * pdf
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Mean of each column with values summed in sorted order, so the result is
/// bit-identical under any permutation of the rows.
fn sorted_column_means(t: &Tensor) -> Tensor {
    let (m, n) = (t.rows(), t.cols());
    let mut out = Vec::with_capacity(n);
    let mut col = Vec::with_capacity(m);
    for j in 0..n {
        col.clear();
        col.extend((0..m).map(|i| t.get(i, j)));
        col.sort_by(f64::total_cmp);
        out.push(col.iter().sum::<f64>() / m as f64);
    }
    Tensor::matrix(1, n, out).expect("positive extents")
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(1024 + 2 * store.len()),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            (None, _) => unreachable!("only parameter leaves borrow their value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `x · w + b` with the `1 × n` row `b` added to every row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let mut out = self.value(x).matmul(self.value(w))?;
        let (m, n) = out.dims()?;
        let bias = self.value(b);
        if bias.shape() != [1, n] {
            return Err(Error::dim("affine", out.shape(), bias.shape()));
        }
        let bias = bias.data();
        for i in 0..m {
            for (o, c) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(bias) {
                *o += c;
            }
        }
        Ok(self.push(Op::Affine(x, w, b), out))
    }

    /// `s · a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var, s: f64) -> Result<Var> {
        let mut out = self.value(a).matmul_nt(self.value(b))?;
        if s != 1.0 {
            out.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(Op::MatMulNt(a, b, s), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims()?;
        let (r, n2) = self.value(row).dims()?;
        if r != 1 || n != n2 {
            return Err(Error::dim("add_row", self.value(a).shape(), self.value(row).shape()));
        }
        let mut out = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..m {
            for (o, b) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&bias) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRow(a, row), out))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), out)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(Op::Gelu(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        Ok(self.push(Op::SoftmaxRows(a), out))
    }

    /// Divides each row by its sum. Rows summing to zero are left at zero.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims()?;
        let mut out = self.value(a).clone();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        Ok(self.push(Op::NormalizeRows(a), out))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (both `1 × n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims()?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [1, n] {
                return Err(Error::dim("layer_norm", self.value(x).shape(), self.value(p).shape()));
            }
        }
        let xv = self.value(x);
        let mut normalized = xv.clone();
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &mut normalized.data_mut()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = normalized.clone();
        for i in 0..m {
            for j in 0..n {
                let idx = i * n + j;
                out.data_mut()[idx] = out.data()[idx] * g[j] + b[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            out,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), out))
    }

    /// Concatenates along the feature axis; all parts must have equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Input("concat_cols of nothing".into()));
        };
        let m = self.value(first).dims()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims()?;
            if r != m {
                return Err(Error::dim("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::matrix(m, total, out)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    /// Stacks along the row axis; all parts must have equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Input("concat_rows of nothing".into()));
        };
        let n = self.value(first).dims()?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims()?;
            if c != n {
                return Err(Error::dim("concat_rows", self.value(first).shape(), self.value(p).shape()));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(rows, n, out)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims()?;
        if width == 0 || start + width > n {
            return Err(Error::dim("slice_cols", self.value(a).shape(), &[start, width]));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&src.row_slice(i)[start..start + width]);
        }
        let out = Tensor::matrix(m, width, out)?;
        Ok(self.push(Op::SliceCols(a, start), out))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims()?;
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(Error::Input(alloc::format!(
                "gather_rows: indices {rows:?} invalid for {m} rows"
            )));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(src.row_slice(r));
        }
        let out = Tensor::matrix(rows.len(), n, out)?;
        Ok(self.push(Op::GatherRows(a, rows.to_vec()), out))
    }

    /// Zeroes every column whose `keep` flag is false.
    pub fn mask_cols(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let (m, n) = self.value(a).dims()?;
        if keep.len() != n {
            return Err(Error::dim("mask_cols", self.value(a).shape(), &[keep.len()]));
        }
        let mut out = self.value(a).clone();
        for i in 0..m {
            for (j, &k) in keep.iter().enumerate() {
                if !k {
                    out.set(i, j, 0.0);
                }
            }
        }
        Ok(self.push(Op::MaskCols(a, keep.to_vec()), out))
    }

    /// Column means as a `1 × n` row, accumulated in sorted order.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.value(a).dims()?;
        let out = sorted_column_means(self.value(a));
        Ok(self.push(Op::MeanRows(a), out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), out)
    }

    /// Negative log partial likelihood of `risks` (`n × 1`) with an inclusive
    /// risk set `t_j >= t_i`.
    pub fn cox_loss(&mut self, risks: Var, times: &[f64], events: &[bool]) -> Result<Var> {
        let r = self.value(risks);
        if r.len() != times.len() || times.len() != events.len() {
            return Err(Error::dim("cox_loss", r.shape(), &[times.len(), events.len()]));
        }
        let loss = crate::head::neg_log_partial_likelihood(r.data(), times, events)?;
        Ok(self.push(
            Op::CoxLoss {
                risks,
                times: times.to_vec(),
                events: events.to_vec(),
            },
            Tensor::scalar(loss),
        ))
    }

    /// Gradients of a scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node_grads = self.backward_all(loss)?;
        let mut out = Gradients::zeros_like(self.store);
        for (pid, v) in self.param_nodes.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = node_grads.get(*v) {
                    out.set(ParamId(pid), g.clone());
                }
            }
        }
        Ok(out)
    }

    /// Gradients of a scalar `loss` with respect to every node.
    pub fn backward_all(&self, loss: Var) -> Result<VarGradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lv.shape(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(VarGradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, t: Tensor| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_nt(self.value(*b))?);
                acc(*b, self.value(*a).matmul_tn(g)?);
            }
            Op::Affine(x, w, b) => {
                acc(*x, g.matmul_nt(self.value(*w))?);
                acc(*w, self.value(*x).matmul_tn(g)?);
                acc(*b, Tensor::row(&g.col_sums()?)?);
            }
            Op::MatMulNt(a, b, s) => {
                let gs = g.map(|v| v * s);
                acc(*a, gs.matmul(self.value(*b))?);
                acc(*b, gs.matmul_tn(self.value(*a))?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, Tensor::row(&g.col_sums()?)?);
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), "mul", |x, y| x * y)?);
                acc(*b, g.zip_map(self.value(*a), "mul", |x, y| x * y)?);
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Relu(a) => {
                let t = g.zip_map(self.value(*a), "relu", |d, x| if x > 0.0 { d } else { 0.0 })?;
                acc(*a, t);
            }
            Op::Gelu(a) => {
                let t = g.zip_map(self.value(*a), "gelu", |d, x| d * gelu_grad(x))?;
                acc(*a, t);
            }
            Op::Sigmoid(a) => {
                let t = g.zip_map(self.value(Var(idx)), "sigmoid", |d, y| d * y * (1.0 - y))?;
                acc(*a, t);
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(Var(idx));
                let (m, n) = y.dims()?;
                let mut out = Tensor::zeros(m, n);
                for i in 0..m {
                    let dot: f64 = (0..n).map(|j| g.get(i, j) * y.get(i, j)).sum();
                    for j in 0..n {
                        out.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                acc(*a, out);
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let y = self.value(Var(idx));
                let (m, n) = y.dims()?;
                let mut out = Tensor::zeros(m, n);
                for i in 0..m {
                    let s: f64 = x.row_slice(i).iter().sum();
                    if s == 0.0 {
                        continue;
                    }
                    let dot: f64 = (0..n).map(|j| g.get(i, j) * y.get(i, j)).sum();
                    for j in 0..n {
                        out.set(i, j, (g.get(i, j) - dot) / s);
                    }
                }
                acc(*a, out);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (m, n) = normalized.dims()?;
                let gam = self.value(*gamma).data();
                let mut dx = Tensor::zeros(m, n);
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..n {
                        let gy = g.get(i, j);
                        let xh = normalized.get(i, j);
                        dgamma[j] += gy * xh;
                        dbeta[j] += gy;
                        let d = gy * gam[j];
                        sum_d += d;
                        sum_dx += d * xh;
                    }
                    let nf = n as f64;
                    for j in 0..n {
                        let d = g.get(i, j) * gam[j];
                        let xh = normalized.get(i, j);
                        dx.set(i, j, inv_std[i] / nf * (nf * d - sum_d - xh * sum_dx));
                    }
                }
                acc(*x, dx);
                acc(*gamma, Tensor::row(&dgamma)?);
                acc(*beta, Tensor::row(&dbeta)?);
            }
            Op::Transpose(a) => acc(*a, g.transpose()?),
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut out = Vec::with_capacity(m * w);
                    for i in 0..m {
                        out.extend_from_slice(&g.row_slice(i)[offset..offset + w]);
                    }
                    acc(p, Tensor::matrix(m, w, out)?);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let out = g.data()[offset * n..(offset + r) * n].to_vec();
                    acc(p, Tensor::matrix(r, n, out)?);
                    offset += r;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims()?;
                let w = g.cols();
                let mut out = Tensor::zeros(m, n);
                for i in 0..m {
                    for j in 0..w {
                        out.set(i, start + j, g.get(i, j));
                    }
                }
                acc(*a, out);
            }
            Op::GatherRows(a, rows) => {
                let (m, n) = self.value(*a).dims()?;
                let mut out = Tensor::zeros(m, n);
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        let v = out.get(r, j) + g.get(k, j);
                        out.set(r, j, v);
                    }
                }
                acc(*a, out);
            }
            Op::MaskCols(a, keep) => {
                let mut out = g.clone();
                for i in 0..out.rows() {
                    for (j, &k) in keep.iter().enumerate() {
                        if !k {
                            out.set(i, j, 0.0);
                        }
                    }
                }
                acc(*a, out);
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).dims()?;
                let mut out = Tensor::zeros(m, n);
                for i in 0..m {
                    for j in 0..n {
                        out.set(i, j, g.get(0, j) / m as f64);
                    }
                }
                acc(*a, out);
            }
            Op::Sum(a) => {
                let v = self.value(*a);
                let s = g.item()?;
                acc(*a, Tensor::new(v.shape(), vec![s; v.len()])?);
            }
            Op::CoxLoss {
                risks,
                times,
                events,
            } => {
                let r = self.value(*risks);
                let d = crate::head::neg_log_partial_likelihood_grad(r.data(), times, events);
                let s = g.item()?;
                let scaled: Vec<f64> = d.into_iter().map(|x| x * s).collect();
                acc(*risks, Tensor::new(r.shape(), scaled)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_gradient, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Checks every coordinate of parameter `id` against central differences.
    fn check(store: &ParamStore, id: ParamId, f: impl Fn(&mut Graph) -> Var) {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(id).unwrap().clone();
        let base = store.get(id).data().to_vec();
        let fd = fd_gradient(
            |p| {
                let mut s = store.clone();
                s.get_mut(id).data_mut().copy_from_slice(p);
                let mut g = Graph::new(&s);
                let l = f(&mut g);
                g.value(l).item().unwrap()
            },
            &base,
            1e-5,
        );
        for (a, n) in analytic.data().iter().zip(&fd) {
            assert!(
                relative_error(*a, *n) < 1e-6 || (a - n).abs() < 1e-8,
                "analytic {a} vs fd {n}"
            );
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, 9.0]]).unwrap());
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let loss = g.sum(wv);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).unwrap().data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_rows(&[[1.0, -2.0], [0.25, 4.0]]).unwrap());
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let sq = g.mul(wv, wv).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), store.get(w));
    }

    #[test]
    fn reuse_accumulates_both_paths() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap());
        let x = Tensor::column(&[0.5, -1.0, 2.0]).unwrap();
        let y = Tensor::column(&[3.0, 0.25, -4.0]).unwrap();
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let a = g.matmul(wv, xv).unwrap();
        let b = g.matmul(wv, yv).unwrap();
        let sa = g.sum(a);
        let sb = g.sum(b);
        let loss = g.add(sa, sb).unwrap();
        let grads = g.backward(loss).unwrap();
        let want: Vec<f64> = x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect();
        assert_eq!(grads.get(w).unwrap().data(), want.as_slice());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v = g.constant(Tensor::zeros(2, 2));
        assert!(matches!(g.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn mean_rows_is_permutation_exact() {
        let store = ParamStore::new();
        let rows = [[0.1, 1e16], [0.2, 1.0], [0.3, -1e16], [1e-3, 3.0]];
        let perm = [rows[2], rows[0], rows[3], rows[1]];
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::from_rows(&rows).unwrap());
        let b = g.constant(Tensor::from_rows(&perm).unwrap());
        let ma = g.mean_rows(a).unwrap();
        let mb = g.mean_rows(b).unwrap();
        assert_eq!(g.value(ma), g.value(mb));
    }

    #[test]
    fn elementary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..20u64 {
            let mut store = ParamStore::new();
            let w = store.add("w", random(&mut rng, 3, 4));
            let gamma = store.add("gamma", random(&mut rng, 1, 4));
            let beta = store.add("beta", random(&mut rng, 1, 4));
            let bias = store.add("bias", random(&mut rng, 1, 4));
            let x = random(&mut rng, 4, 3);
            let keep = [true, seed % 2 == 0, true, false];
            let f = |g: &mut Graph| {
                let wv = g.param(w);
                let xv = g.constant(x.clone());
                let h = g.matmul(xv, wv).unwrap();
                let bv = g.param(bias);
                let h = g.add_row(h, bv).unwrap();
                let h2 = g.affine(xv, wv, bv).unwrap();
                let h = g.add(h, h2).unwrap();
                let (gv, btv) = (g.param(gamma), g.param(beta));
                let h = g.layer_norm(h, gv, btv, 1e-5).unwrap();
                let a = g.gelu(h);
                let s = g.softmax_rows(a).unwrap();
                let s = g.mask_cols(s, &keep).unwrap();
                let s = g.normalize_rows(s).unwrap();
                let t = g.transpose(s).unwrap();
                let c = g.concat_cols(&[t, s]).unwrap();
                let r = g.gather_rows(c, &[0, 2, 2]).unwrap();
                let sl = g.slice_cols(r, 1, 5).unwrap();
                let sg = g.sigmoid(sl);
                let m = g.mean_rows(sg).unwrap();
                let st = g.concat_rows(&[m, m]).unwrap();
                let rl = g.relu(st);
                let d = g.sub(rl, st).unwrap();
                let p = g.mul(d, st).unwrap();
                let q = g.add(p, st).unwrap();
                let nt = g.matmul_nt(q, st, 0.7).unwrap();
                let sc = g.scale(nt, -1.3);
                g.sum(sc)
            };
            check(&store, w, f);
            check(&store, gamma, f);
            check(&store, beta, f);
            check(&store, bias, f);
        }
    }

    #[test]
    fn cox_node_matches_finite_differences() {
        let mut store = ParamStore::new();
        let r = store.add("r", Tensor::column(&[0.3, -1.2, 0.8, 0.1, 2.0]).unwrap());
        let times = [3.0, 1.0, 3.0, 7.0, 2.0];
        let events = [true, true, false, true, false];
        check(&store, r, |g| {
            let rv = g.param(r);
            g.cox_loss(rv, &times, &events).unwrap()
        });
    }
}
