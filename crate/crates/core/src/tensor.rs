//! Dense row-major tensors of rank at most four.
//!
//! Images use `[batch, channels, height, width]` order. Values are `f32`
//! for training and inference; every kernel is generic over [`Scalar`] so
//! the same code runs in `f64` when checking gradients against finite
//! differences.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use thiserror::Error;

pub const MAX_RANK: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: output would be empty ({detail})")]
    EmptyOutput { op: &'static str, detail: String },
    #[error("rank {0} exceeds the maximum of {MAX_RANK}")]
    RankTooHigh(usize),
    #[error("shape {shape:?} holds {expected} values but {found} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable #{0} is not on this tape")]
    UnknownVar(usize),
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("batch_norm: train mode needs at least 2 values per channel, got {0}")]
    TooFewSamples(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Floating-point element type. `f32` is the working precision, `f64` the
/// gradient-checking precision.
pub trait Scalar: Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    /// `c = alpha * a·b + beta * c` for row/column-strided matrices
    /// (`a` is m×k, `b` is k×n, `c` is m×n).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    a: (usize, (usize, usize)),
    b: (usize, (usize, usize)),
    c: (usize, (usize, usize)),
) {
    let reach = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(reach(m, k, a.1) <= a.0, "gemm: lhs buffer too small");
    assert!(reach(k, n, b.1) <= b.0, "gemm: rhs buffer too small");
    assert!(reach(m, n, c.1) <= c.0, "gemm: output buffer too small");
}

macro_rules! impl_scalar {
    ($ty:ty, $gemm:path) => {
        impl Scalar for $ty {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_gemm_bounds(
                    m,
                    k,
                    n,
                    (a.len(), a_strides),
                    (b.len(), b_strides),
                    (c.len(), c_strides),
                );
                // SAFETY: the strided extents of all three operands were
                // checked against their buffer lengths above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }

            fn of(v: f64) -> Self {
                v as $ty
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        let head: Vec<_> = self.data.iter().take(PREVIEW).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &head)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.len() > MAX_RANK {
        return Err(TensorError::RankTooHigh(shape.len()));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected = check_shape(shape)?;
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Interprets the tensor as `[N, C, H, W]`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected a rank-4 tensor, got shape {:?}", self.shape),
            }),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected a rank-2 tensor, got shape {:?}", self.shape),
            }),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Copies channels `[start, end)` of an `[N, C, H, W]` tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4("slice_channels")?;
        if start > end || end > c {
            return Err(TensorError::ShapeMismatch {
                op: "slice_channels",
                detail: format!("range {start}..{end} outside 0..{c}"),
            });
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (end - start) * plane);
        for img in 0..n {
            let base = img * c * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Ok(Self::from_parts(vec![n, end - start, h, w], data))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Elementwise `self += other`; shapes must hold the same number of values.
    pub(crate) fn accumulate(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data_length() {
        let err = Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { expected: 6, found: 5, .. }));
    }

    #[test]
    fn rejects_rank_five() {
        assert_eq!(
            Tensor::<f32>::zeros(&[1, 1, 1, 1, 1]).unwrap_err(),
            TensorError::RankTooHigh(5)
        );
    }

    #[test]
    fn slice_channels_picks_planes() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 1, 2], |i| i as f32).unwrap();
        let s = t.slice_channels(1, 2).unwrap();
        assert_eq!(s.shape(), &[2, 1, 1, 2]);
        assert_eq!(s.data(), &[2.0, 3.0, 8.0, 9.0]);
    }

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, (3, 1), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }
}
