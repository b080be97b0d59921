//! Dense row-major `f64` tensors and a reverse-mode autodiff tape.

mod check;
mod graph;

pub use check::{grad_check, grad_check_params};
pub use graph::{GradientMap, Gradients, Graph, Op, Param, ParamId, Parameterized, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense array of `f64` with a shape. Scalars have an empty shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ElementCount {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds an `[rows, cols]` matrix from row slices.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new([rows.len(), cols], data)
    }

    /// An `[n, 1]` column.
    pub fn column(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len(), 1],
            data: values.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a matrix.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Column count of a matrix; 1 for vectors and scalars.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ElementCount {
                shape,
                expected,
                actual: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    fn require_matrix(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.is_matrix() && other.is_matrix() {
            Ok(())
        } else {
            Err(self.mismatch(op, other))
        }
    }

    fn mismatch(&self, op: &'static str, other: &Tensor) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.shape.clone(),
            right: other.shape.clone(),
        }
    }

    /// `self · other` for `[n, k] · [k, m]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("matmul", other)?;
        let (n, k) = (self.shape[0], self.shape[1]);
        let m = other.shape[1];
        if other.shape[0] != k {
            return Err(self.mismatch("matmul", other));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new([n, m], out)
    }

    /// `self · otherᵀ` for `[n, k] · [m, k]ᵀ`.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("matmul_t", other)?;
        let (n, k) = (self.shape[0], self.shape[1]);
        let m = other.shape[0];
        if other.shape[1] != k {
            return Err(self.mismatch("matmul_t", other));
        }
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &other.data[j * k..(j + 1) * k];
                out.push(a_row.iter().zip(b_row).map(|(a, b)| a * b).sum());
            }
        }
        Tensor::new([n, m], out)
    }

    /// `selfᵀ · other` for `[k, n]ᵀ · [k, m]`.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("t_matmul", other)?;
        let (k, n) = (self.shape[0], self.shape[1]);
        let m = other.shape[1];
        if other.shape[0] != k {
            return Err(self.mismatch("t_matmul", other));
        }
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let a_row = &self.data[p * n..(p + 1) * n];
            let b_row = &other.data[p * m..(p + 1) * m];
            for (i, &a) in a_row.iter().enumerate() {
                for (o, &b) in out[i * m..(i + 1) * m].iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new([n, m], out)
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(self.mismatch(op, other));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    /// In-place `self += c · other`.
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(self.mismatch("axpy", other));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    /// Adds a length-`m` bias to every row of an `[n, m]` matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || bias.len() != self.shape[1] || bias.shape.len() != 1 {
            return Err(self.mismatch("add_row", bias));
        }
        let m = self.shape[1];
        let mut out = self.clone();
        for row in out.data.chunks_mut(m.max(1)) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Tensor> {
        if !self.is_matrix() || factors.len() != self.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                left: self.shape.clone(),
                right: vec![factors.len()],
            });
        }
        let m = self.shape[1];
        let mut out = self.clone();
        if m > 0 {
            for (row, f) in out.data.chunks_mut(m).zip(factors) {
                row.iter_mut().for_each(|v| *v *= f);
            }
        }
        Ok(out)
    }

    /// Column sums of an `[n, m]` matrix as a length-`m` vector.
    pub fn sum_rows(&self) -> Tensor {
        let m = self.cols();
        let mut out = vec![0.0; m];
        if m > 0 {
            for row in self.data.chunks(m) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        Tensor {
            shape: vec![m],
            data: out,
        }
    }

    /// Concatenates two matrices along the feature (column) axis.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("concat", other)?;
        if self.shape[0] != other.shape[0] {
            return Err(self.mismatch("concat", other));
        }
        let (n, p, q) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(&self.data[i * p..(i + 1) * p]);
            data.extend_from_slice(&other.data[i * q..(i + 1) * q]);
        }
        Tensor::new([n, p + q], data)
    }

    /// Splits a matrix into its first `p` columns and the rest.
    pub fn split_cols(&self, p: usize) -> Result<(Tensor, Tensor)> {
        if !self.is_matrix() || p > self.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "split_cols",
                left: self.shape.clone(),
                right: vec![p],
            });
        }
        let (n, m) = (self.shape[0], self.shape[1]);
        let q = m - p;
        let mut a = Vec::with_capacity(n * p);
        let mut b = Vec::with_capacity(n * q);
        for row in self.data.chunks(m.max(1)).take(n) {
            a.extend_from_slice(&row[..p]);
            b.extend_from_slice(&row[p..]);
        }
        Ok((Tensor::new([n, p], a)?, Tensor::new([n, q], b)?))
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
        }
    }

    /// Stacks `[1, c]`-compatible rows.
    pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
        let c = rows.first().map_or(0, Tensor::len);
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in rows {
            if r.len() != c {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    left: vec![c],
                    right: r.shape.clone(),
                });
            }
            data.extend_from_slice(&r.data);
        }
        Tensor::new([rows.len(), c], data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sq_diff_sum(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(self.mismatch("sq_diff_sum", other));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(self.mismatch("max_abs_diff", other));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Per-row index of the largest entry; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows()).map(|i| argmax(self.row(i))).collect()
    }

    /// Pads or truncates every row to `width` columns (zero fill).
    pub fn resize_cols(&self, width: usize) -> Tensor {
        let n = self.rows();
        let c = self.cols();
        let mut data = vec![0.0; n * width];
        for i in 0..n {
            let k = c.min(width);
            data[i * width..i * width + k].copy_from_slice(&self.row(i)[..k]);
        }
        Tensor {
            shape: vec![n, width],
            data,
        }
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
