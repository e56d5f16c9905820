//! Dense row-major tensor with the handful of operations the rest of the
//! library is built from.
//!
//! Broadcasting rule: for binary elementwise ops the right-hand operand must
//! have a shape equal to a trailing suffix of the left-hand shape (a scalar,
//! i.e. rank 0, is the empty suffix). The result always has the left-hand
//! shape. There is no other implicit broadcasting.

use std::fmt;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

/// Element precision tag, used for reporting and CSV output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

impl std::str::FromStr for DType {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(format!("unknown dtype `{other}` (expected f32 or f64)")),
        }
    }
}

/// Scalar element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// Shorthand for converting an `f64` literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal conversion")
    }

    fn to_f64c(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    fn to_f64c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    fn to_f64c(self) -> f64 {
        self
    }
}

/// Dense tensor: shape metadata plus a flat row-major buffer.
///
/// Immutable after construction from the caller's point of view; all
/// operations return fresh tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument {
                op: "from_vec",
                msg: format!("shape {shape:?} wants {numel} elements, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Single element of a rank-0 or single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Number of rows of a rank-2 tensor (rank-1 counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Length of the last axis (1 for rank-0).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combine with trailing-suffix broadcast of `rhs` (see module docs).
    pub fn zip(&self, rhs: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if !broadcastable(&self.shape, &rhs.shape) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let rn = rhs.data.len().max(1);
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, rhs.data[i % rn]))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.zip(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn exp(&self) -> Self {
        self.map(|x| x.exp())
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn swish(&self) -> Self {
        self.map(|x| x * sigmoid(x))
    }

    pub fn recip(&self) -> Self {
        self.map(|x| T::one() / x)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len().max(1)).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    /// Largest absolute elementwise difference; shapes must match exactly.
    pub fn max_abs_diff(&self, rhs: &Self) -> T {
        assert_eq!(self.shape, rhs.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&rhs.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, p, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &rhs.data, m, p, n, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument {
                op: "transpose",
                msg: format!("expected rank 2, got shape {:?}", self.shape),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Softmax along `axis`, stabilized by max subtraction; every slice along
    /// the axis becomes nonnegative and sums to one.
    pub fn softmax_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: self.rank(),
            });
        }
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = T::neg_infinity();
                for j in 0..len {
                    m = m.max(out[base + j * inner]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (out[base + j * inner] - m).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= s;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// RMS normalization over the last axis: each slice is divided by
    /// `sqrt(mean(x^2) + eps)` and multiplied elementwise by `scale`.
    pub fn rms_norm(&self, scale: &Self, eps: T) -> Result<Self> {
        let d = self.last_dim();
        if scale.shape != [d] {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                lhs: self.shape.clone(),
                rhs: scale.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        let dn = T::from_usize(d).unwrap();
        for row in out.chunks_mut(d) {
            let ms = row.iter().map(|&x| x * x).sum::<T>() / dn;
            let inv = T::one() / (ms + eps).sqrt();
            for (x, &g) in row.iter_mut().zip(scale.data.iter()) {
                *x = *x * inv * g;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Cast element type (used by the benchmark harness only).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.to_f64c()).unwrap())
                .collect(),
        }
    }
}

/// True when `rhs` is a trailing suffix of `lhs` (the broadcast rule).
pub(crate) fn broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    // Split on sign so exp never sees a large positive argument.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `out += a # b` for row-major `a: m x p`, `b: p x n`. Loop order keeps the
/// innermost accesses contiguous.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], m: usize, p: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * n..(k + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bkj;
            }
        }
    }
}

/// `out += a^T # b` for `a: p x m`, `b: p x n` (both row-major), `out: m x n`.
pub(crate) fn matmul_tn_into<T: Scalar>(
    a: &[T],
    b: &[T],
    p: usize,
    m: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * n);
    for k in 0..p {
        let arow = &a[k * m..(k + 1) * m];
        let brow = &b[k * n..(k + 1) * n];
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow.iter()) {
                *o += aki * bkj;
            }
        }
    }
}

/// `out += a # b^T` for `a: m x p`, `b: n x p`, `out: m x n`.
pub(crate) fn matmul_nt_into<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    p: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..n {
            let brow = &b[j * p..(j + 1) * p];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow.iter()) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(i2.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_dot_product() {
        let a = t64(&[1, 2], &[1.0, 2.0]);
        let b = t64(&[2, 1], &[3.0, 4.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.item(), 11.0);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::Rng::new(11);
        let a: Tensor<f64> = rng.uniform(&[3, 4], -1.0, 1.0);
        let b: Tensor<f64> = rng.uniform(&[4, 2], -1.0, 1.0);
        let c = a.matmul(&b).unwrap();
        // Independent triple-loop reference in ijk order.
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                assert!((c.data()[i * 2 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t64(&[2, 3], &[0.0; 6]);
        let b = t64(&[2, 2], &[0.0; 4]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_associativity_within_tolerance() {
        let mut rng = crate::rng::Rng::new(3);
        let a: Tensor<f64> = rng.uniform(&[4, 4], -1.0, 1.0);
        let b: Tensor<f64> = rng.uniform(&[4, 4], -1.0, 1.0);
        let c: Tensor<f64> = rng.uniform(&[4, 4], -1.0, 1.0);
        let lhs = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let rhs = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let bound = 1e-10 * a.max_abs() * b.max_abs() * c.max_abs();
        assert!(lhs.max_abs_diff(&rhs) < bound.max(1e-13));
    }

    #[test]
    fn softmax_uniform_and_large_inputs() {
        let x = t64(&[2], &[0.0, 0.0]).softmax_axis(0).unwrap();
        assert_eq!(x.data(), &[0.5, 0.5]);
        let y = t64(&[2], &[1000.0, 1000.0]).softmax_axis(0).unwrap();
        assert!(y.is_finite());
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_hand_computed_ratio() {
        let x = t64(&[2], &[0.0, 3.0f64.ln()]).softmax_axis(0).unwrap();
        assert!((x.data()[0] - 0.25).abs() < 1e-15);
        assert!((x.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_slices_sum_to_one() {
        let mut rng = crate::rng::Rng::new(9);
        for _ in 0..50 {
            let x: Tensor<f64> = rng.uniform(&[4, 5], -700.0, 700.0);
            let s = x.softmax_axis(0).unwrap();
            for col in 0..5 {
                let total: f64 = (0..4).map(|r| s.data()[r * 5 + col]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
            let s1 = x.softmax_axis(1).unwrap();
            for row in 0..4 {
                let total: f64 = s1.data()[row * 5..(row + 1) * 5].iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_basics() {
        assert_eq!(t64(&[1], &[0.0]).sigmoid().item(), 0.5);
        assert_eq!(t64(&[1], &[0.0]).swish().item(), 0.0);
        let e = t64(&[2], &[0.0, 1.0]).exp();
        assert!((e.data()[0] - 1.0).abs() < 1e-15);
        assert!((e.data()[1] - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn broadcast_is_trailing_suffix_only() {
        let x = t64(&[2, 3], &[1.0; 6]);
        let row = t64(&[3], &[1.0, 2.0, 3.0]);
        let y = x.add(&row).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        let bad = t64(&[2], &[1.0, 2.0]);
        assert!(x.add(&bad).is_err());
    }

    #[test]
    fn rms_norm_hand_computed() {
        let x = t64(&[2], &[3.0, 4.0]);
        let y = x.rms_norm(&Tensor::ones(&[2]), 0.0).unwrap();
        let r = (12.5f64).sqrt();
        assert!((y.data()[0] - 3.0 / r).abs() < 1e-12);
        assert!((y.data()[1] - 4.0 / r).abs() < 1e-12);
    }

    #[test]
    fn rms_norm_constant_and_zero() {
        let x = t64(&[3], &[-2.0, -2.0, -2.0]);
        let y = x.rms_norm(&Tensor::ones(&[3]), 0.0).unwrap();
        for &v in y.data() {
            assert!((v + 1.0).abs() < 1e-12);
        }
        let z = t64(&[3], &[0.0; 3]);
        let out = z.rms_norm(&Tensor::ones(&[3]), 1e-6).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let a = t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.transpose().unwrap().transpose().unwrap(), a);
    }
}
