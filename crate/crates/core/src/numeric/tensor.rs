use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
///
/// Tensors are immutable values once handed to a [`Graph`](super::Graph);
/// gradient tracking lives on the graph node, not on the tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Callers guarantee the
    /// shape/length agreement.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("Tensor::from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a matrix; a 1-D tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols().max(1))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Self::from_parts(shape, self.data.clone()))
    }

    /// Rows `indices` of a matrix, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::from_parts(vec![indices.len(), c], data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn l2_norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Cosine similarity `<x,y> / (|x| |y|)`. Zero-norm inputs are an error.
pub fn cosine_sim(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("cosine_sim", &[x.len()], &[y.len()]));
    }
    let nx = l2_norm(x);
    let ny = l2_norm(y);
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::ZeroNorm("cosine_sim"));
    }
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Huber loss on the error `a - b`.
pub fn huber(a: f64, b: f64, delta: f64) -> f64 {
    let e = (a - b).abs();
    if e <= delta {
        0.5 * e * e
    } else {
        delta * (e - 0.5 * delta)
    }
}

/// Derivative of [`huber`] with respect to `a`.
pub fn huber_grad(a: f64, b: f64, delta: f64) -> f64 {
    (a - b).clamp(-delta, delta)
}

/// Unit-normalizes every row; zero rows are an error.
pub fn normalize_rows(t: &Tensor) -> Result<Tensor> {
    let c = t.cols();
    let mut data = t.data.clone();
    for row in data.chunks_mut(c.max(1)) {
        let n = l2_norm(row);
        if n == 0.0 {
            return Err(Error::ZeroNorm("normalize_rows"));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(Tensor::from_parts(t.shape.clone(), data))
}

/// Cosine similarity matrix between the rows of `a` and the rows of `b`.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::shape("cosine_matrix", a.shape(), b.shape()));
    }
    let an = normalize_rows(a)?;
    let bn = normalize_rows(b)?;
    let (m, n) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            out.push(dot(an.row(i), bn.row(j)).clamp(-1.0, 1.0));
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Gram-Schmidt over the rows of `t`. Fails when a row is (numerically)
/// dependent on the previous ones.
pub fn orthonormalize_rows(t: &Tensor) -> Result<Tensor> {
    let c = t.cols();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(t.rows());
    for row in t.row_iter() {
        let mut v = row.to_vec();
        // two passes keep the basis orthogonal to working precision
        for _ in 0..2 {
            for q in &out {
                let p = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(x, qv)| *x -= p * qv);
            }
        }
        let n = l2_norm(&v);
        if n < 1e-10 {
            return Err(Error::InvalidArgument(
                "rows are linearly dependent; cannot orthonormalize".into(),
            ));
        }
        v.iter_mut().for_each(|x| *x /= n);
        out.push(v);
    }
    let rows = out.len();
    Ok(Tensor::from_parts(vec![rows, c], out.into_iter().flatten().collect()))
}

// Dense kernels shared by the graph forward and backward passes.

/// `a [m×k] · b [k×n]`.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a [m×k] · bᵀ` where `b` is `[n×k]`.
pub(crate) fn matmul_nt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `aᵀ · b` where `a` is `[m×k]` and `b` is `[m×n]`; result `[k×n]`.
pub(crate) fn matmul_tn_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_kernel(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
    }

    #[test]
    fn cosine_zero_norm_is_an_error() {
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm(_))));
        assert!(matches!(cosine_sim(&[1.0], &[1.0, 0.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn huber_branches() {
        assert_eq!(huber(0.5, 0.0, 1.0), 0.125);
        assert_eq!(huber(2.0, 0.0, 1.0), 1.5);
        assert_eq!(huber(0.3, 0.3, 1.0), 0.0);
        // continuous value and slope at |e| = delta
        let d = 1.0;
        assert!((huber(d, 0.0, d) - huber(d + 1e-12, 0.0, d)).abs() < 1e-11);
        assert_eq!(huber_grad(d, 0.0, d), huber_grad(d + 1e-9, 0.0, d));
    }

    #[test]
    fn tensor_rejects_bad_shape_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(Tensor::new(vec![1], vec![f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn kernels_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let ab = matmul_kernel(&a, &b, 2, 3, 2);
        assert_eq!(ab, vec![4.0, 5.0, 10.0, 11.0]);
        let bt = transpose_kernel(&b, 3, 2);
        assert_eq!(matmul_nt_kernel(&a, &bt, 2, 3, 2), ab);
        let at = transpose_kernel(&a, 2, 3);
        assert_eq!(matmul_tn_kernel(&at, &b, 3, 2, 2), ab);
    }
}
