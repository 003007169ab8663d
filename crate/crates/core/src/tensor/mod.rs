//! Minimal NHWC tensor operations with hand-written backward passes.
//!
//! Convolutions lower onto GEMM through im2col; everything else is a
//! direct loop. All operations are generic over the scalar so training
//! runs in `f32` while gradient checks run the identical code in `f64`.
//!
//! Layout conventions, used everywhere without exception:
//! - activations: `(batch, height, width, channels)`
//! - conv kernels: `(kh * kw * c_in, c_out)` matrices
//!   (flattened from `[kh, kw, c_in, c_out]`)
//! - transposed-conv kernels: `(kh * kw * c_out, c_in)` matrices
//! - dense weights: `(inputs, outputs)`

use ndarray::{Array2, ArrayView2};
use ndarray::linalg::general_mat_mul;

pub mod conv;
pub mod norm;
pub mod ops;

/// Scalar type for all network math: `f32` in training, `f64` in
/// gradient checks.
pub trait Scalar:
    ndarray::NdFloat + num_traits::FromPrimitive + num_traits::ToPrimitive + core::iter::Sum
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Lift an exact `f64` constant into the working scalar type.
#[inline]
pub fn c<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("constant representable in scalar type")
}

/// Read a scalar back out as `f64` (for logging and reports).
#[inline]
pub fn to_f64<F: Scalar>(v: F) -> f64 {
    v.to_f64().expect("scalar convertible to f64")
}

/// Whether normalization layers use batch statistics (and update their
/// running buffers) or frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// `a @ b` on the matrixmultiply fast path.
pub fn matmul<F: Scalar>(a: &ArrayView2<'_, F>, b: &ArrayView2<'_, F>) -> Array2<F> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(F::one(), a, b, F::zero(), &mut out);
    out
}

/// `a^T @ b` without materializing the transpose.
pub fn matmul_tn<F: Scalar>(a: &ArrayView2<'_, F>, b: &ArrayView2<'_, F>) -> Array2<F> {
    let mut out = Array2::zeros((a.ncols(), b.ncols()));
    general_mat_mul(F::one(), &a.t(), b, F::zero(), &mut out);
    out
}

/// `a @ b^T` without materializing the transpose.
pub fn matmul_nt<F: Scalar>(a: &ArrayView2<'_, F>, b: &ArrayView2<'_, F>) -> Array2<F> {
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    general_mat_mul(F::one(), a, &b.t(), F::zero(), &mut out);
    out
}
