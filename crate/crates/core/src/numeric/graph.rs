//! Tape-based reverse-mode differentiation over whole-tensor operations.
//!
//! Every operation appends a node holding its output value. Nodes only ever
//! reference earlier nodes, so the insertion order is a valid topological
//! order and `backward` is a single reverse sweep.

use super::tensor::{
    dot, huber, huber_grad, l2_norm, matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, transpose_kernel, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    RowNorms(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    LogSumExpRows {
        x: Var,
        mask: Option<Vec<bool>>,
    },
    Huber {
        x: Var,
        target: Vec<f64>,
        delta: f64,
    },
    PairDistances {
        x: Var,
        pairs: Vec<(usize, usize)>,
    },
    TripletAngles {
        x: Var,
        triples: Vec<(usize, usize, usize)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_row(row: &mut [f64]) {
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

/// Log-sum-exp over the entries of `row` selected by `mask`, plus the
/// normalized weights of those entries (zero elsewhere).
fn masked_lse(row: &[f64], mask: Option<&[bool]>) -> Option<(f64, Vec<f64>)> {
    let on = |j: usize| mask.is_none_or(|m| m[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| on(*j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut weights: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(j, &v)| if on(j) { (v - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= sum);
    Some((max + sum.ln(), weights))
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        finite(name, &data)?;
        Ok(self.push(Tensor::from_parts(shape, data), op, inputs))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn scalar_value(&self, s: Var, op: &'static str) -> Result<f64> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape(op, self.shape(s), &[1]));
        }
        Ok(self.value(s).item())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push_checked("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_t")?;
        let (n, k2) = self.matrix_dims(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", self.shape(a), self.shape(b)));
        }
        let out = matmul_nt_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push_checked("matmul_t", vec![m, n], out, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let out = transpose_kernel(self.value(a).data(), m, n);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), &[a]))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push_checked("add", shape, out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.push_checked("sub", shape, out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push_checked("mul", shape, out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a row vector (`[n]` or `[1×n]`) to every row of a `[m×n]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "add_row")?;
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            row.iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
        }
        self.push_checked("add_row", vec![m, n], out, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push_checked("scale", shape, out, Op::Scale(x, c), &[x])
    }

    /// `x * s` for a single-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_value(s, "mul_scalar")?;
        let out = self.value(x).data().iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        self.push_checked("mul_scalar", shape, out, Op::MulScalar(x, s), &[x, s])
    }

    /// `x / s` for a single-element `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_value(s, "div_scalar")?;
        let out = self.value(x).data().iter().map(|v| v / sv).collect();
        let shape = self.shape(x).to_vec();
        self.push_checked("div_scalar", shape, out, Op::DivScalar(x, s), &[x, s])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.push_checked("exp", shape, out, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite("log"));
        }
        let out = self.value(x).data().iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        self.push_checked("log", shape, out, Op::Log(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_checked("gelu", shape, out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push_checked("relu", shape, out, Op::Relu(x), &[x])
    }

    /// Row-wise softmax of `x + bias`, where `bias` (one entry per column)
    /// is a constant added to every row before normalization.
    pub fn softmax_rows(&mut self, x: Var, bias: Option<&[f64]>) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "softmax_rows")?;
        if let Some(b) = bias {
            if b.len() != n {
                return Err(Error::shape("softmax_rows", self.shape(x), &[b.len()]));
            }
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            if let Some(b) = bias {
                row.iter_mut().zip(b).for_each(|(v, &bv)| *v += bv);
            }
            softmax_row(row);
        }
        self.push_checked("softmax_rows", vec![m, n], out, Op::Softmax(x), &[x])
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "layer_norm_rows")?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::shape("layer_norm_rows", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normed = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                normed[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        self.push_checked(
            "layer_norm_rows",
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push_checked("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let s = self.value(x).data().iter().sum::<f64>() / n as f64;
        self.push_checked("mean", vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Divides each row by its L2 norm. Zero rows are an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "normalize_rows")?;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(m);
        for row in out.chunks_mut(n.max(1)) {
            let nr = l2_norm(row);
            if nr == 0.0 {
                return Err(Error::ZeroNorm("normalize_rows"));
            }
            row.iter_mut().for_each(|v| *v /= nr);
            norms.push(nr);
        }
        self.push_checked("normalize_rows", vec![m, n], out, Op::NormalizeRows { x, norms }, &[x])
    }

    /// L2 norm of every row, shape `[m]`.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "row_norms")?;
        let out: Vec<f64> = self.value(x).data().chunks(n.max(1)).map(l2_norm).collect();
        self.push_checked("row_norms", vec![m], out, Op::RowNorms(x), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_rows")?;
        if start + len > m {
            return Err(Error::shape("slice_rows", self.shape(x), &[start + len, n]));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(Tensor::from_parts(vec![len, n], out), Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::shape("slice_cols", self.shape(x), &[m, start + len]));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![m, len], out), Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let (_, n) = self.matrix_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, n2) = self.matrix_dims(p, "concat_rows")?;
            if n2 != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += m;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, n], out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let (m, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (m2, n) = self.matrix_dims(p, "concat_cols")?;
            if m2 != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Picks flat elements of `x`; output shape `[indices.len()]`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", self.shape(x), &[bad]));
        }
        let xv = self.value(x).data();
        let out: Vec<f64> = indices.iter().map(|&i| xv[i]).collect();
        Ok(self.push(
            Tensor::from_parts(vec![indices.len()], out),
            Op::Gather { x, indices },
            &[x],
        ))
    }

    /// Row-wise log-sum-exp, optionally over a subset of columns. `mask`
    /// has one entry per element of `x`; every row must select at least one
    /// entry. Output shape `[m]`.
    pub fn logsumexp_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "logsumexp_rows")?;
        if let Some(mk) = &mask {
            if mk.len() != m * n {
                return Err(Error::shape("logsumexp_rows", self.shape(x), &[mk.len()]));
            }
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row_mask = mask.as_ref().map(|mk| &mk[i * n..(i + 1) * n]);
            let (lse, _) = masked_lse(&xv[i * n..(i + 1) * n], row_mask)
                .ok_or_else(|| Error::InvalidArgument(format!("logsumexp_rows: row {i} selects no entries")))?;
            out.push(lse);
        }
        self.push_checked("logsumexp_rows", vec![m], out, Op::LogSumExpRows { x, mask }, &[x])
    }

    /// Elementwise Huber loss of `x` against a constant target.
    pub fn huber(&mut self, x: Var, target: Vec<f64>, delta: f64) -> Result<Var> {
        if target.len() != self.value(x).numel() {
            return Err(Error::shape("huber", self.shape(x), &[target.len()]));
        }
        if delta <= 0.0 {
            return Err(Error::InvalidArgument("huber delta must be positive".into()));
        }
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&target)
            .map(|(&a, &b)| huber(a, b, delta))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_checked("huber", shape, out, Op::Huber { x, target, delta }, &[x])
    }

    /// Euclidean distances `|x_i - x_j|` between the listed row pairs.
    pub fn pair_distances(&mut self, x: Var, pairs: Vec<(usize, usize)>) -> Result<Var> {
        let (m, _) = self.matrix_dims(x, "pair_distances")?;
        if pairs.iter().any(|&(i, j)| i >= m || j >= m) {
            return Err(Error::InvalidArgument("pair_distances: row index out of range".into()));
        }
        let xv = self.value(x);
        let out: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| {
                xv.row(i)
                    .iter()
                    .zip(xv.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let len = out.len();
        self.push_checked("pair_distances", vec![len], out, Op::PairDistances { x, pairs }, &[x])
    }

    /// Cosine of the angle at `x_j` spanned by `x_i` and `x_k` for each
    /// triple `(i, j, k)`. Triples with `x_i == x_j` or `x_k == x_j` are an
    /// error; callers filter them out.
    pub fn triplet_angles(&mut self, x: Var, triples: Vec<(usize, usize, usize)>) -> Result<Var> {
        let (m, _) = self.matrix_dims(x, "triplet_angles")?;
        if triples.iter().any(|&(i, j, k)| i >= m || j >= m || k >= m) {
            return Err(Error::InvalidArgument("triplet_angles: row index out of range".into()));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(triples.len());
        for &(i, j, k) in &triples {
            let a: Vec<f64> = xv.row(i).iter().zip(xv.row(j)).map(|(p, q)| p - q).collect();
            let b: Vec<f64> = xv.row(k).iter().zip(xv.row(j)).map(|(p, q)| p - q).collect();
            let (na, nb) = (l2_norm(&a), l2_norm(&b));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::ZeroNorm("triplet_angles"));
            }
            out.push(dot(&a, &b) / (na * nb));
        }
        let len = out.len();
        self.push_checked("triplet_angles", vec![len], out, Op::TripletAngles { x, triples }, &[x])
    }

    /// Reverse sweep from a scalar `loss`, accumulating gradients into every
    /// node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        delta(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let da = matmul_nt_kernel(g, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, |s| add_into(s, &da));
                }
                if self.requires_grad(*b) {
                    let db = matmul_tn_kernel(self.value(*a).data(), g, m, k, n);
                    self.accumulate(grads, *b, |s| add_into(s, &db));
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a bᵀ, a [m×k], b [n×k]
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.requires_grad(*a) {
                    let da = matmul_kernel(g, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, |s| add_into(s, &da));
                }
                if self.requires_grad(*b) {
                    let db = matmul_tn_kernel(g, self.value(*a).data(), m, n, k);
                    self.accumulate(grads, *b, |s| add_into(s, &db));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let da = transpose_kernel(g, n, m);
                self.accumulate(grads, *a, |s| add_into(s, &da));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| s.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |s| {
                    for ((o, gv), y) in s.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for ((o, gv), x) in s.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                let n = self.value(*bias).numel();
                self.accumulate(grads, *x, |s| add_into(s, g));
                self.accumulate(grads, *bias, |s| {
                    for row in g.chunks(n.max(1)) {
                        add_into(s, row);
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |s| s.iter_mut().zip(g).for_each(|(o, v)| *o += c * v));
            }
            Op::MulScalar(x, sc) => {
                let sv = self.value(*sc).item();
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |s| s.iter_mut().zip(g).for_each(|(o, v)| *o += sv * v));
                self.accumulate(grads, *sc, |s| s[0] += dot(g, xv));
            }
            Op::DivScalar(x, sc) => {
                let sv = self.value(*sc).item();
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |s| s.iter_mut().zip(g).for_each(|(o, v)| *o += v / sv));
                self.accumulate(grads, *sc, |s| s[0] -= dot(g, xv) / (sv * sv));
            }
            Op::Exp(x) => {
                self.accumulate(grads, *x, |s| {
                    for ((o, gv), y) in s.iter_mut().zip(g).zip(out) {
                        *o += gv * y;
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |s| {
                    for ((o, gv), xi) in s.iter_mut().zip(g).zip(xv) {
                        *o += gv / xi;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |s| {
                    for ((o, gv), &xi) in s.iter_mut().zip(g).zip(xv) {
                        *o += gv * gelu_grad(xi);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |s| {
                    for ((o, gv), &xi) in s.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = self.shape(*x)[1].max(1);
                self.accumulate(grads, *x, |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let inner = dot(grow, yrow);
                        for ((o, gv), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *o += y * (gv - inner);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let n = self.shape(*x)[1].max(1);
                let gv = self.value(*gain).data();
                self.accumulate(grads, *gain, |s| {
                    for (grow, hrow) in g.chunks(n).zip(normed.chunks(n)) {
                        for ((o, gi), h) in s.iter_mut().zip(grow).zip(hrow) {
                            *o += gi * h;
                        }
                    }
                });
                self.accumulate(grads, *bias, |s| {
                    for grow in g.chunks(n) {
                        add_into(s, grow);
                    }
                });
                self.accumulate(grads, *x, |s| {
                    for (i, (grow, hrow)) in g.chunks(n).zip(normed.chunks(n)).enumerate() {
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dot(&dh, hrow) / n as f64;
                        let srow = &mut s[i * n..(i + 1) * n];
                        for j in 0..n {
                            srow[j] += inv_std[i] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |s| s.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                self.accumulate(grads, *x, |s| s.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::NormalizeRows { x, norms } => {
                let n = self.shape(*x)[1].max(1);
                self.accumulate(grads, *x, |s| {
                    for (i, (grow, yrow)) in g.chunks(n).zip(out.chunks(n)).enumerate() {
                        let inner = dot(grow, yrow);
                        let srow = &mut s[i * n..(i + 1) * n];
                        for j in 0..n {
                            srow[j] += (grow[j] - yrow[j] * inner) / norms[i];
                        }
                    }
                });
            }
            Op::RowNorms(x) => {
                let n = self.shape(*x)[1].max(1);
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |s| {
                    for (i, xrow) in xv.chunks(n).enumerate() {
                        if out[i] == 0.0 {
                            continue;
                        }
                        let srow = &mut s[i * n..(i + 1) * n];
                        for j in 0..n {
                            srow[j] += g[i] * xrow[j] / out[i];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = self.shape(*x)[1];
                self.accumulate(grads, *x, |s| add_into(&mut s[start * n..start * n + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let n = self.shape(*x)[1];
                let len = node.value.shape()[1];
                self.accumulate(grads, *x, |s| {
                    for (i, grow) in g.chunks(len.max(1)).enumerate() {
                        add_into(&mut s[i * n + start..i * n + start + len], grow);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, |s| add_into(s, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.accumulate(grads, p, |s| {
                        for (i, srow) in s.chunks_mut(w.max(1)).enumerate() {
                            add_into(srow, &g[i * total + col..i * total + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |s| add_into(s, g));
            }
            Op::Gather { x, indices } => {
                self.accumulate(grads, *x, |s| {
                    for (&i, gv) in indices.iter().zip(g) {
                        s[i] += gv;
                    }
                });
            }
            Op::LogSumExpRows { x, mask } => {
                let n = self.shape(*x)[1].max(1);
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |s| {
                    for i in 0..g.len() {
                        let row_mask = mask.as_ref().map(|mk| &mk[i * n..(i + 1) * n]);
                        if let Some((_, w)) = masked_lse(&xv[i * n..(i + 1) * n], row_mask) {
                            for (o, wj) in s[i * n..(i + 1) * n].iter_mut().zip(&w) {
                                *o += g[i] * wj;
                            }
                        }
                    }
                });
            }
            Op::Huber { x, target, delta } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |s| {
                    for (((o, gv), &a), &b) in s.iter_mut().zip(g).zip(xv).zip(target) {
                        *o += gv * huber_grad(a, b, *delta);
                    }
                });
            }
            Op::PairDistances { x, pairs } => {
                let xv = self.value(*x);
                let n = xv.cols();
                self.accumulate(grads, *x, |s| {
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        if out[p] == 0.0 {
                            continue;
                        }
                        let c = g[p] / out[p];
                        for t in 0..n {
                            let d = c * (xv.data()[i * n + t] - xv.data()[j * n + t]);
                            s[i * n + t] += d;
                            s[j * n + t] -= d;
                        }
                    }
                });
            }
            Op::TripletAngles { x, triples } => {
                let xv = self.value(*x);
                let n = xv.cols();
                self.accumulate(grads, *x, |s| {
                    for (p, &(i, j, k)) in triples.iter().enumerate() {
                        let a: Vec<f64> = xv.row(i).iter().zip(xv.row(j)).map(|(p, q)| p - q).collect();
                        let b: Vec<f64> = xv.row(k).iter().zip(xv.row(j)).map(|(p, q)| p - q).collect();
                        let (na, nb) = (l2_norm(&a), l2_norm(&b));
                        let cos = out[p];
                        for t in 0..n {
                            let (u, w) = (a[t] / na, b[t] / nb);
                            let da = g[p] * (w - cos * u) / na;
                            let db = g[p] * (u - cos * w) / nb;
                            s[i * n + t] += da;
                            s[k * n + t] += db;
                            s[j * n + t] -= da + db;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
