//! Scalar abstraction shared by every numeric module.
//!
//! All tensor arithmetic is written against [`Scalar`], implemented for
//! `f32` and `f64`. The trait carries a dense matrix-multiply hook so the
//! hot path can dispatch to the matching `matrixmultiply` kernel.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Name used in checkpoints and run metadata.
    const NAME: &'static str;

    /// Lossy conversion from an `f64` literal.
    fn of(x: f64) -> Self;

    fn to_f64c(self) -> f64;

    /// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`. A transposed operand is
    /// stored in its untransposed row-major layout (`k x m` for `a`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn to_f64c(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs buffer too small");
                assert!(b.len() >= k * n, "gemm: rhs buffer too small");
                assert!(c.len() >= m * n, "gemm: output buffer too small");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for v in c[..m * n].iter_mut() {
                        *v *= beta;
                    }
                    return;
                }
                // (row stride, col stride) of op(a) and op(b).
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: the asserts above bound every index the kernel
                // touches: op(a) spans m*k elements, op(b) k*n and c m*n.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f64, "f64", matrixmultiply::dgemm);
impl_scalar!(f32, "f32", matrixmultiply::sgemm);
