//! Dense row-major tensors and a tape-based reverse-mode autodiff graph.
//!
//! Eager methods on [`Tensor`] are used by the inference paths; the
//! [`Graph`] records the same operations for training and gradient checks.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod scalar;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use scalar::Scalar;

use crate::error::{Error, Result};

/// Reduction / normalization axis for 2-D tensors.
///
/// `Rows` collapses the row dimension (result `[1×n]`), `Cols` collapses the
/// column dimension (result `[m×1]`), `All` collapses both (result `[1×1]`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// A `[1×1]` tensor.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn row(values: Vec<T>) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a matrix from equal-length rows of `f64` literals.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", &[cols], &[bad.len()]));
        }
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| T::lit(v))).collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| T::lit(normal.sample(rng)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    /// `max|a - b| / max(max|b|, tiny)`, with `other` as the reference.
    pub fn max_rel_diff(&self, other: &Self) -> f64 {
        let scale = other.max_abs().as_f64().max(f64::MIN_POSITIVE);
        self.max_abs_diff(other).as_f64() / scale
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(op, &self.shape, &[0, 0]));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nn_acc(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.require_matrix("matmul_t")?;
        let (n, k2) = other.require_matrix("matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt_acc(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        let (k, m) = self.require_matrix("t_matmul")?;
        let (k2, n) = other.require_matrix("t_matmul")?;
        if k != k2 {
            return Err(Error::shape("t_matmul", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_tn_acc(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.require_matrix("transpose")?;
        Ok(Self {
            shape: vec![c, r],
            data: kernels::transpose(&self.data, r, c),
        })
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self {
                shape: self.shape.clone(),
                data,
            });
        }
        if other.numel() == 1 {
            let b = other.data[0];
            return Ok(self.map(|a| f(a, b)));
        }
        if self.numel() == 1 {
            let a = self.data[0];
            return Ok(other.map(|b| f(a, b)));
        }
        Err(Error::shape(op, &self.shape, &other.shape))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sigmoid(&self) -> Self {
        self.map(kernels::sigmoid)
    }

    pub fn gelu(&self) -> Self {
        self.map(kernels::gelu)
    }

    pub fn exp(&self) -> Self {
        self.map(|v| v.exp())
    }

    pub fn log(&self) -> Result<Self> {
        if let Some(bad) = self.data.iter().find(|v| **v <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.map(|v| v.ln()))
    }

    /// Adds a `[1×n]` row to every row of an `[m×n]` matrix.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let (m, n) = self.require_matrix("add_row")?;
        if bias.numel() != n {
            return Err(Error::shape("add_row", &self.shape, &bias.shape));
        }
        let mut out = self.clone();
        for r in 0..m {
            for (o, &b) in out.data[r * n..(r + 1) * n].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn sum(&self, axis: Axis) -> Result<Self> {
        let (m, n) = self.require_matrix("sum")?;
        Ok(match axis {
            Axis::All => Self::scalar(self.data.iter().copied().sum()),
            Axis::Rows => {
                let mut out = vec![T::zero(); n];
                for r in 0..m {
                    for (o, &v) in out.iter_mut().zip(&self.data[r * n..(r + 1) * n]) {
                        *o += v;
                    }
                }
                Self {
                    shape: vec![1, n],
                    data: out,
                }
            }
            Axis::Cols => Self {
                shape: vec![m, 1],
                data: (0..m)
                    .map(|r| self.data[r * n..(r + 1) * n].iter().copied().sum())
                    .collect(),
            },
        })
    }

    pub fn mean(&self, axis: Axis) -> Result<Self> {
        let (m, n) = self.require_matrix("mean")?;
        let count = match axis {
            Axis::All => m * n,
            Axis::Rows => m,
            Axis::Cols => n,
        };
        if count == 0 {
            return Err(Error::EmptyPool);
        }
        Ok(self.sum(axis)?.scale(T::one() / T::lit(count as f64)))
    }

    /// Softmax normalizing along `axis`: `Cols` makes every row sum to one,
    /// `Rows` every column.
    pub fn softmax(&self, axis: Axis) -> Result<Self> {
        let (m, n) = self.require_matrix("softmax")?;
        match axis {
            Axis::Cols => {
                let mut out = vec![T::zero(); m * n];
                for r in 0..m {
                    kernels::softmax_row(&self.data[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n], None);
                }
                Ok(Self {
                    shape: vec![m, n],
                    data: out,
                })
            }
            Axis::Rows => self.transpose()?.softmax(Axis::Cols)?.transpose(),
            Axis::All => {
                let flat = self.clone().reshape(&[1, m * n])?.softmax(Axis::Cols)?;
                flat.reshape(&[m, n])
            }
        }
    }

    /// Row-wise layer normalization followed by the `[1×n]` affine pair.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: T) -> Result<Self> {
        let (m, n) = self.require_matrix("layer_norm")?;
        if gain.numel() != n || bias.numel() != n {
            return Err(Error::shape("layer_norm", &self.shape, gain.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        let inv_n = T::one() / T::lit(n as f64);
        for r in 0..m {
            let row = &self.data[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let inv_std = T::one() / (var + eps).sqrt();
            for (j, o) in out[r * n..(r + 1) * n].iter_mut().enumerate() {
                *o = (row[j] - mean) * inv_std * gain.data[j] + bias.data[j];
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn gather_rows(&self, ids: &[usize]) -> Result<Self> {
        let (m, n) = self.require_matrix("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(Error::Index { index: id, len: m });
            }
            data.extend_from_slice(&self.data[id * n..(id + 1) * n]);
        }
        Ok(Self {
            shape: vec![ids.len(), n],
            data,
        })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (m, n) = self.require_matrix("slice_cols")?;
        if start + len > n {
            return Err(Error::shape("slice_cols", &self.shape, &[start, len]));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&self.data[r * n + start..r * n + start + len]);
        }
        Ok(Self {
            shape: vec![m, len],
            data,
        })
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (m, n) = self.require_matrix("slice_rows")?;
        if start + len > m {
            return Err(Error::shape("slice_rows", &self.shape, &[start, len]));
        }
        Ok(Self {
            shape: vec![len, n],
            data: self.data[start * n..(start + len) * n].to_vec(),
        })
    }

    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        let m = parts.first().map_or(0, |p| p.shape[0]);
        let n: usize = parts.iter().map(|p| p.cols()).sum();
        if let Some(bad) = parts.iter().find(|p| p.rows() != m) {
            return Err(Error::shape("concat_cols", &[m], bad.shape()));
        }
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for p in parts {
                data.extend_from_slice(p.row_slice(r));
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data,
        })
    }

    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        let n = parts.first().map_or(0, |p| p.cols());
        if let Some(bad) = parts.iter().find(|p| p.cols() != n) {
            return Err(Error::shape("concat_rows", &[n], bad.shape()));
        }
        let m: usize = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(m * n);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![m, n],
            data,
        })
    }
}

/// Causal softmax attention, `o_n = softmax([q_n·k_1, …, q_n·k_n]) · [v_1 … v_n]`.
/// Reference only; the model never trains through it.
pub fn causal_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let scores = q.matmul_t(k)?;
    let t = scores.rows();
    if scores.cols() != t || v.rows() != t {
        return Err(Error::shape("causal_attention", q.shape(), v.shape()));
    }
    let mut probs = vec![T::zero(); t * t];
    for n in 0..t {
        kernels::softmax_row(
            &scores.data[n * t..n * t + n + 1],
            &mut probs[n * t..n * t + n + 1],
            None,
        );
    }
    Tensor::new(&[t, t], probs)?.matmul(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_examples() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(a.matmul(&Tensor::identity(2)).unwrap(), a);

        let id = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let swap = Tensor::<f64>::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        assert_eq!(id.matmul(&swap).unwrap(), swap);

        let row = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]).unwrap();
        let col = Tensor::<f64>::from_rows(&[&[3.0], &[5.0]]).unwrap();
        assert_eq!(row.matmul(&col).unwrap().item(), 13.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = rand::thread_rng();
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let direct = a.matmul(&b.transpose().unwrap()).unwrap();
        assert!(a.matmul_t(&b).unwrap().max_abs_diff(&direct) < 1e-12);
        let c = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let direct = a.transpose().unwrap().matmul(&c).unwrap();
        assert!(a.t_matmul(&c).unwrap().max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(Tensor::<f64>::scalar(0.0).sigmoid().item(), 0.5);
        let two = Tensor::<f64>::scalar(2.0);
        assert!((two.log().unwrap().exp().item() - 2.0).abs() < 1e-6);
        assert!(matches!(
            Tensor::<f64>::scalar(0.0).log(),
            Err(Error::Domain { op: "log", .. })
        ));
        // large-magnitude inputs stay finite
        let wide = Tensor::<f32>::row(vec![-100.0, 100.0]).sigmoid();
        assert!(wide.is_finite());
    }

    #[test]
    fn reductions_and_softmax() {
        let s = Tensor::<f64>::row(vec![0.0, 0.0, 0.0]).softmax(Axis::Cols).unwrap();
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let m = Tensor::<f64>::from_rows(&[&[1.0, 1.0], &[3.0, 3.0]]).unwrap();
        assert_eq!(m.mean(Axis::Rows).unwrap().data(), &[2.0, 2.0]);
        let big = Tensor::<f32>::row(vec![1000.0, 1000.0]).softmax(Axis::Cols).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);
    }

    #[test]
    fn gather_rows_orders_and_checks_ids() {
        let table = Tensor::<f64>::from_rows(&[&[0.0, 0.5], &[1.0, 1.5], &[2.0, 2.5]]).unwrap();
        let picked = table.gather_rows(&[2, 0]).unwrap();
        assert_eq!(picked.data(), &[2.0, 2.5, 0.0, 0.5]);
        assert!(matches!(
            table.gather_rows(&[3]),
            Err(Error::Index { index: 3, len: 3 })
        ));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = rand::thread_rng();
        let x = Tensor::<f64>::randn(&[4, 16], 3.0, &mut rng);
        let y = x
            .layer_norm(&Tensor::full(&[1, 16], 1.0), &Tensor::zeros(&[1, 16]), 1e-12)
            .unwrap();
        for r in 0..4 {
            let row = y.row_slice(r);
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_associativity_f32() {
        let mut rng = rand::thread_rng();
        for _ in 0..20 {
            let a = Tensor::<f32>::randn(&[5, 7], 1.0, &mut rng);
            let b = Tensor::<f32>::randn(&[7, 6], 1.0, &mut rng);
            let c = Tensor::<f32>::randn(&[6, 4], 1.0, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert!(left.max_rel_diff(&right) < 1e-4);
        }
    }

    #[test]
    fn causal_attention_first_row_is_first_value() {
        let mut rng = rand::thread_rng();
        let q = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let o = causal_attention(&q, &k, &v).unwrap();
        assert!((o.at(0, 0) - v.at(0, 0)).abs() < 1e-12);
        assert!((o.at(0, 1) - v.at(0, 1)).abs() < 1e-12);
    }
}
