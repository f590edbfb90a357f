//! Dense row-major tensors of `f64`.
//!
//! Only the handful of operations the attention simulator needs are provided.
//! Every reduction accumulates strictly left to right along the contracted
//! axis, so results are bit-reproducible and match naive loop oracles exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An immutable dense array with an explicit shape.
///
/// A rank-0 tensor (empty shape) holds a single scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches, zero-sized dimensions and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::LengthMismatch { shape, len: data.len() });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        check_shape(&shape)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { index: 0, value });
        }
        let len = shape.iter().product();
        Ok(Self {
            shape,
            data: vec![value; len],
        })
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    /// Fills a tensor in row-major order from `f(flat_index)`.
    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> f64) -> Result<Self> {
        check_shape(&shape)?;
        let len = shape.iter().product();
        Self::new(shape, (0..len).map(f).collect())
    }

    /// Construction for outputs of internal operations whose inputs already
    /// satisfied the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Size of the last axis (1 for a scalar).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of slices along the leading axis.
    pub fn outer_len(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// The `i`-th slice along the leading axis as a flat row-major slice.
    pub fn outer(&self, i: usize) -> &[f64] {
        let stride = self.len() / self.outer_len();
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Rows along the last axis.
    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.last_dim())
    }

    /// Left-to-right sum of all elements.
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x)
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x * x)
    }

    /// Applies `f` elementwise. Panics if `f` produces a non-finite value.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&x| f(x)).collect();
        assert!(data.iter().all(|v| v.is_finite()), "map produced a non-finite value");
        Tensor::from_parts(self.shape.clone(), data)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|x| x * factor)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    fn zip_with(&self, op: &'static str, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(Tensor::from_parts(shape, self.data.clone()))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("stack"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::EmptyDimension(shape.to_vec()));
    }
    Ok(())
}

/// Splits a rank-2 or rank-3 shape into `(batch, rows, cols)`.
fn as_batched(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [r, c] => Ok((1, r, c)),
        [b, r, c] => Ok((b, r, c)),
        _ => Err(Error::UnsupportedRank(op, shape.len())),
    }
}

/// Matrix product `a · b` for rank-2 operands or rank-3 operands sharing a
/// leading batch axis.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, m, k) = as_batched("matmul", a.shape())?;
    let (bb, k2, n) = as_batched("matmul", b.shape())?;
    if a.rank() != b.rank() || ba != bb || k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; ba * m * n];
    for batch in 0..ba {
        let a_mat = &a.data[batch * m * k..(batch + 1) * m * k];
        let b_mat = &b.data[batch * k * n..(batch + 1) * k * n];
        let o_mat = &mut out[batch * m * n..(batch + 1) * m * n];
        for (a_row, o_row) in a_mat.chunks_exact(k).zip(o_mat.chunks_exact_mut(n)) {
            // i-k-j order: each output element still accumulates k = 0, 1, ...
            for (&a_ik, b_row) in a_row.iter().zip(b_mat.chunks_exact(n)) {
                for (o, &b_kj) in o_row.iter_mut().zip(b_row) {
                    *o += a_ik * b_kj;
                }
            }
        }
    }
    let mut shape = a.shape[..a.rank() - 1].to_vec();
    shape.push(n);
    Ok(Tensor::from_parts(shape, out))
}

/// `a · bᵀ` over the last two axes, i.e. row-by-row dot products.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, m, k) = as_batched("matmul_transposed", a.shape())?;
    let (bb, n, k2) = as_batched("matmul_transposed", b.shape())?;
    if a.rank() != b.rank() || ba != bb || k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_transposed",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = Vec::with_capacity(ba * m * n);
    for batch in 0..ba {
        let a_mat = &a.data[batch * m * k..(batch + 1) * m * k];
        let b_mat = &b.data[batch * n * k..(batch + 1) * n * k];
        for a_row in a_mat.chunks_exact(k) {
            for b_row in b_mat.chunks_exact(k) {
                out.push(dot(a_row, b_row));
            }
        }
    }
    let mut shape = a.shape[..a.rank() - 1].to_vec();
    shape.push(n);
    Ok(Tensor::from_parts(shape, out))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| acc + x * y)
}

/// Numerically stable softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let mut out = Vec::with_capacity(x.len());
    for row in x.rows() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut denom = 0.0;
        for &v in row {
            let e = (v - max).exp();
            denom += e;
            out.push(e);
        }
        for p in &mut out[start..start + n] {
            *p /= denom;
        }
    }
    Tensor::from_parts(x.shape.clone(), out)
}

/// Sums over the given axes; the remaining axes keep their order.
pub fn reduce_sum(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut reduced = vec![false; rank];
    for &axis in axes {
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        reduced[axis] = true;
    }
    let out_shape: Vec<usize> = x
        .shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    // Row-major strides of the output, zero along reduced axes.
    let mut out_strides = vec![0usize; rank];
    let mut stride = 1;
    for axis in (0..rank).rev() {
        if !reduced[axis] {
            out_strides[axis] = stride;
            stride *= x.shape[axis];
        }
    }
    let mut out = vec![0.0; out_shape.iter().product()];
    let mut index = vec![0usize; rank];
    let mut target = 0usize;
    for &v in &x.data {
        out[target] += v;
        // Odometer increment, keeping `target` in sync.
        for axis in (0..rank).rev() {
            index[axis] += 1;
            target += out_strides[axis];
            if index[axis] < x.shape[axis] {
                break;
            }
            target -= out_strides[axis] * index[axis];
            index[axis] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}
