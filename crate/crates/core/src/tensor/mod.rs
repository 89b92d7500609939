//! Dense row-major tensors and the reverse-mode differentiation tape.
//!
//! [`Tensor`] is an immutable-by-convention value type: a shape plus a
//! contiguous row-major buffer. Everything that needs gradients goes through
//! [`Graph`], which records operations on `f64` tensors and replays them
//! backwards.

mod graph;
pub mod gradcheck;

pub use graph::{Gradients, Graph, Var, ZERO_INDEX};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::Range;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element precision of a tensor buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// Floating-point element type. Implemented for `f32` and `f64`.
pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    const DTYPE: DType;

    /// `c = a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n` (overwrites `c`).
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    fn from_f64(v: f64) -> Self;
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            c.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        // SAFETY: slice lengths are checked by the caller (m·k, k·n, m·n) and the
        // strides describe dense row-major storage inside those slices.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn from_f64(v: f64) -> Self {
        v
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            c.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        // SAFETY: see the f64 implementation.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

/// Dense n-dimensional array in row-major order.
///
/// Invariant: `shape.iter().product() == data.len()`. A rank-0 tensor holds a
/// single element.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape_len(&shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                shape_len(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape_len(shape)] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape_len(shape)] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn diag(values: &[T]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(&[n, n]);
        for (i, &v) in values.iter().enumerate() {
            t.data[i * n + i] = v;
        }
        t
    }

    /// Builds a tensor by evaluating `f` at every flat offset.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        Tensor { shape: shape.to_vec(), data: (0..shape_len(shape)).map(f).collect() }
    }

    /// Rank-2 tensor from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Tensor { shape: vec![r, c], data: rows.iter().flatten().copied().collect() }
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

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the buffer. Tensors recorded in a [`Graph`] are copies,
    /// so mutating a tensor never affects a recorded computation.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row-major strides; the last axis has stride 1.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, s)| i >= s) {
            return Err(Error::dim(format!("index {:?} out of bounds for {:?}", index, self.shape)));
        }
        Ok(index.iter().zip(self.strides()).map(|(i, s)| i * s).sum())
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    /// Element `(i, j)` of a rank-2 tensor, unchecked beyond slice bounds.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let cols = self.shape[1];
        self.data[i * cols + j] = v;
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape_len(shape) != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    fn require_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::dim(format!("{what} needs a rank-2 tensor, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k) = self.require_matrix("matmul")?;
        let (k2, m) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(n, k, m, &self.data, &other.data, &mut out);
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    fn zip_broadcast(&self, other: &Tensor<T>, op: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            Ok(Tensor { shape: self.shape.clone(), data })
        } else if other.data.len() == 1 {
            let b = other.data[0];
            Ok(self.map(|a| f(a, b)))
        } else if self.data.len() == 1 {
            let a = self.data[0];
            Ok(other.map(|b| f(a, b)))
        } else {
            Err(Error::dim(format!("{op}: incompatible shapes {:?} and {:?}", self.shape, other.shape)))
        }
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_broadcast(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_broadcast(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_broadcast(other, "mul", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.map(|v| v * c)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    /// Population variance over all elements.
    pub fn variance(&self) -> T {
        let mu = self.mean();
        self.data.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / T::from_f64(self.data.len() as f64)
    }

    /// Mean absolute value, `E(|x|)`.
    pub fn l1mean(&self) -> T {
        self.data.iter().map(|v| v.abs()).sum::<T>() / T::from_f64(self.data.len() as f64)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn trace(&self) -> Result<T> {
        let (r, c) = self.require_matrix("trace")?;
        Ok((0..r.min(c)).map(|i| self.data[i * c + i]).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::dim(format!("compare {:?} with {:?}", self.shape, other.shape)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    /// `‖self − other‖_F / ‖other‖_F` (falls back to the absolute norm when `other` is zero).
    pub fn rel_frobenius_diff(&self, other: &Tensor<T>) -> Result<T> {
        let diff = self.sub(other)?.frobenius_norm();
        let base = other.frobenius_norm();
        Ok(if base > T::zero() { diff / base } else { diff })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(M + Mᵀ)/2` for a square matrix.
    pub fn symmetrize(&self) -> Result<Tensor<T>> {
        let (r, c) = self.require_matrix("symmetrize")?;
        if r != c {
            return Err(Error::dim(format!("symmetrize needs a square matrix, got {:?}", self.shape)));
        }
        let half = T::from_f64(0.5);
        let mut out = self.clone();
        for i in 0..r {
            for j in (i + 1)..r {
                let v = (self.data[i * r + j] + self.data[j * r + i]) * half;
                out.data[i * r + j] = v;
                out.data[j * r + i] = v;
            }
        }
        Ok(out)
    }

    pub fn slice_cols(&self, range: Range<usize>) -> Result<Tensor<T>> {
        let (r, c) = self.require_matrix("slice_cols")?;
        if range.start > range.end || range.end > c {
            return Err(Error::dim(format!("column range {range:?} outside 0..{c}")));
        }
        let w = range.len();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + range.start..i * c + range.end]);
        }
        Ok(Tensor { shape: vec![r, w], data })
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Result<Tensor<T>> {
        let (r, c) = self.require_matrix("slice_rows")?;
        if range.start > range.end || range.end > r {
            return Err(Error::dim(format!("row range {range:?} outside 0..{r}")));
        }
        Ok(Tensor { shape: vec![range.len(), c], data: self.data[range.start * c..range.end * c].to_vec() })
    }

    /// Slices along the leading axis of a tensor of any rank.
    pub fn slice_leading(&self, range: Range<usize>) -> Result<Tensor<T>> {
        let n = self.rows();
        if self.rank() == 0 || range.start > range.end || range.end > n {
            return Err(Error::dim(format!("leading range {range:?} outside 0..{n}")));
        }
        let inner = self.data.len() / n.max(1);
        let mut shape = self.shape.clone();
        shape[0] = range.len();
        Ok(Tensor { shape, data: self.data[range.start * inner..range.end * inner].to_vec() })
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn hcat(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let rows = parts.first().map_or(0, |p| p.rows());
        for p in parts {
            p.require_matrix("hcat")?;
            if p.rows() != rows {
                return Err(Error::dim("hcat: row counts differ"));
            }
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                let c = p.cols();
                data.extend_from_slice(&p.data[i * c..(i + 1) * c]);
            }
        }
        Ok(Tensor { shape: vec![rows, cols], data })
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn vcat(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let cols = parts.first().map_or(0, |p| p.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            p.require_matrix("vcat")?;
            if p.cols() != cols {
                return Err(Error::dim("vcat: column counts differ"));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape: vec![rows, cols], data })
    }

    /// Concatenation along the leading axis for tensors of equal trailing shape.
    pub fn concat_leading(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::dim("concat_leading: trailing shapes differ"));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor { shape, data })
    }

    /// Block-diagonal assembly of square blocks.
    pub fn block_diag(blocks: &[Tensor<T>]) -> Result<Tensor<T>> {
        let n: usize = blocks.iter().map(|b| b.rows()).sum();
        let mut out = Tensor::zeros(&[n, n]);
        let mut at = 0;
        for b in blocks {
            let (r, c) = b.require_matrix("block_diag")?;
            if r != c {
                return Err(Error::dim("block_diag needs square blocks"));
            }
            for i in 0..r {
                for j in 0..r {
                    out.data[(at + i) * n + at + j] = b.data[i * r + j];
                }
            }
            at += r;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (n, k, m) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.at(i, t) * b.at(t, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_products() {
        let i2 = Tensor::<f64>::eye(2);
        assert_eq!(i2.matmul(&i2).unwrap(), i2);
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(a.matmul(&i2).unwrap(), a);
        assert_eq!(i2.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        // Same products, possibly summed in a different order.
        assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-15);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Dimension(_))));
    }

    #[test]
    fn elementwise_examples() {
        let t = Tensor::new(vec![4], vec![1.0, -1.0, 2.0, -2.0]).unwrap();
        assert_eq!(t.l1mean(), 1.5);
        let r = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap().relu();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(Tensor::<f64>::full(&[3, 2], 4.25).variance(), 0.0);
    }

    #[test]
    fn broadcasting_rules() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let s = Tensor::scalar(10.0);
        assert_eq!(a.add(&s).unwrap().data(), &[11.0, 12.0]);
        assert_eq!(s.sub(&a).unwrap().data(), &[9.0, 8.0]);
        let b = Tensor::<f64>::zeros(&[3]);
        assert!(matches!(a.add(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn row_major_offsets() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.strides(), vec![12, 4, 1]);
        assert_eq!(t.get(&[1, 2, 3]).unwrap(), 23.0);
        assert!(t.get(&[2, 0, 0]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn f32_matmul() {
        let a = Tensor::<f32>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let p = a.matmul(&Tensor::eye(2)).unwrap();
        assert_eq!(p, a);
        assert_eq!(p.dtype(), DType::F32);
    }

    proptest! {
        #[test]
        fn hcat_of_column_slices_restores(r in 1usize..6, c in 1usize..7, cut in 0usize..7, seed in 0u64..1000) {
            let cut = cut.min(c);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random(&[r, c], &mut rng);
            let left = t.slice_cols(0..cut).unwrap();
            let right = t.slice_cols(cut..c).unwrap();
            prop_assert_eq!(Tensor::hcat(&[&left, &right]).unwrap(), t);
        }

        #[test]
        fn matmul_is_deterministic(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&[5, 7], &mut rng);
            let b = random(&[7, 3], &mut rng);
            let x = a.matmul(&b).unwrap();
            let y = a.matmul(&b).unwrap();
            prop_assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
