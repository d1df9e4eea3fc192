//! Numeric foundations: the [`Real`] scalar abstraction, log-space helpers,
//! a small dense [`Tensor`] and a tape-based reverse-mode [`Graph`].
//!
//! Two precisions are supported throughout: `f32` for training and `f64` for
//! verification. Every oracle test runs in `f64`.

mod gradcheck;
mod graph;
mod ops;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use ops::{channel_norm, conv1d_output_len, conv1d_strided, CHANNEL_NORM_EPS};
pub use tensor::Tensor;

/// Scalar type usable by every numeric routine in the crate.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Size in bytes of the little-endian encoding.
    const BYTES: usize;
    /// Tag stored in checkpoints.
    const DTYPE: u32;
    const NAME: &'static str;

    /// Finite stand-in for "impossible" used only by the CTC blank-row emulation.
    fn blank_log_score() -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Raw strided `C = alpha A B + beta C`; see [`gemm`] for the checked form.
    ///
    /// # Safety
    /// Every addressed element must lie inside its allocation and `c` must
    /// not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self, c: *mut Self, rsc: isize, csc: isize,
    );
}

impl Real for f32 {
    const BYTES: usize = 4;
    const DTYPE: u32 = 4;
    const NAME: &'static str = "f32";

    fn blank_log_score() -> Self {
        -1e4
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self, c: *mut Self, rsc: isize, csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const BYTES: usize = 8;
    const DTYPE: u32 = 8;
    const NAME: &'static str = "f64";

    fn blank_log_score() -> Self {
        -1e9
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self, c: *mut Self, rsc: isize, csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Log-probability of an impossible event. Negative infinity is treated as a
/// symbol by [`logsumexp`] and [`log_add_exp`], never fed to `exp`.
#[inline]
pub fn impossible<T: Real>() -> T {
    T::neg_infinity()
}

#[inline]
pub fn is_impossible<T: Real>(v: T) -> bool {
    v == T::neg_infinity()
}

/// `ln(e^a + e^b)`. An impossible operand returns the other one unchanged.
#[inline]
pub fn log_add_exp<T: Real>(a: T, b: T) -> T {
    if is_impossible(a) {
        return b;
    }
    if is_impossible(b) {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln Σ e^{v_i}` with max subtraction. All-impossible input yields
/// [`impossible`].
pub fn logsumexp<T: Real>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        return Err(Error::Empty("logsumexp of an empty vector"));
    }
    Ok(logsumexp_nonempty(values))
}

#[inline]
pub(crate) fn logsumexp_nonempty<T: Real>(values: &[T]) -> T {
    let max = values
        .iter()
        .copied()
        .fold(T::neg_infinity(), |acc, v| if v > acc { v } else { acc });
    if is_impossible(max) {
        return max;
    }
    let mut acc = T::zero();
    for &v in values {
        if !is_impossible(v) {
            acc = acc + (v - max).exp();
        }
    }
    max + acc.ln()
}

/// Dot product over eight independent accumulators so the loop vectorizes.
#[inline(always)]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + *x * *y;
    }
    let mut acc = [T::zero(); 8];
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// A strided read-only matrix view: element `(i, j)` is
/// `data[i * row_stride + j * col_stride]`. Rows may overlap.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    /// Row-major matrix with `cols` columns.
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        View { data, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn cols(data: &'a [T], cols: usize) -> Self {
        View { data, rs: 1, cs: cols }
    }

    fn fits(&self, r: usize, c: usize) -> bool {
        r == 0 || c == 0 || (r - 1) * self.rs + (c - 1) * self.cs < self.data.len()
    }
}

/// `C[m, n] = A[m, k] B[k, n] + beta C` with row-major `C`.
pub(crate) fn gemm<T: Real>(m: usize, k: usize, n: usize, a: View<T>, b: View<T>, beta: T, c: &mut [T]) {
    assert!(a.fits(m, k) && b.fits(k, n) && c.len() >= m * n, "gemm operand out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds checked above; `c` is a unique borrow distinct from `a`, `b`.
    unsafe {
        T::gemm_raw(
            m, k, n, T::one(),
            a.data.as_ptr(), a.rs as isize, a.cs as isize,
            b.data.as_ptr(), b.rs as isize, b.cs as isize,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `y += alpha * x`
#[inline(always)]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn logsumexp_of_two_zeros_is_ln2() {
        assert_abs_diff_eq!(logsumexp(&[0.0f64, 0.0]).unwrap(), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn impossible_entry_is_identity() {
        let x = -3.25f64;
        assert_eq!(logsumexp(&[impossible(), x]).unwrap(), x);
        assert_eq!(log_add_exp(impossible(), x), x);
        assert_eq!(log_add_exp(x, impossible()), x);
    }

    #[test]
    fn all_impossible_returns_sentinel() {
        let v = logsumexp::<f64>(&[impossible(), impossible()]).unwrap();
        assert!(is_impossible(v));
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(logsumexp::<f64>(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn matches_direct_summation() {
        let direct = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert_abs_diff_eq!(logsumexp(&[1.0f64, 2.0, 3.0]).unwrap(), direct, epsilon = 1e-14);
        assert_abs_diff_eq!(logsumexp(&[1.0f64, 2.0, 3.0]).unwrap(), 3.40760596444438, epsilon = 1e-13);
    }

    #[test]
    fn large_values_do_not_overflow() {
        let v = logsumexp(&[1000.0f64, 1000.0]).unwrap();
        assert_abs_diff_eq!(v, 1000.0 + 2f64.ln(), epsilon = 1e-12);
        let v32 = logsumexp(&[-1e4f32, 0.0]).unwrap();
        assert_eq!(v32, 0.0);
    }

    #[test]
    fn gemm_matches_triple_loop() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..n * k).map(|i| (i as f64 * 1.3).cos()).collect();
        // b is stored [n, k], used transposed
        let mut c = vec![1.0; m * n];
        gemm(m, k, n, View::rows(&a, k), View::cols(&b, k), 2.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let s: f64 = (0..k).map(|l| a[i * k + l] * b[j * k + l]).sum();
                assert!((c[i * n + j] - (s + 2.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..7).map(|i| i as f64).collect();
        let b = vec![1.0; 7];
        assert_eq!(dot(&a, &b), 21.0);
    }

    proptest::proptest! {
        #[test]
        fn logsumexp_shift_equivariance(
            v in proptest::collection::vec(-50.0f64..50.0, 1..20),
            c in -100.0f64..100.0,
        ) {
            let base = logsumexp(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let s = logsumexp(&shifted).unwrap();
            proptest::prop_assert!((s - c - base).abs() < 1e-12 * (1.0 + c.abs()));
        }

        #[test]
        fn log_add_exp_agrees_with_logsumexp(a in -30.0f64..30.0, b in -30.0f64..30.0) {
            let x = log_add_exp(a, b);
            let y = logsumexp(&[a, b]).unwrap();
            proptest::prop_assert!((x - y).abs() < 1e-13);
        }
    }
}
