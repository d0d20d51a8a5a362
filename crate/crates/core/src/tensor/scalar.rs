use std::fmt::{Debug, Display};
use std::iter::Sum;

use rand_distr::uniform::SampleUniform;
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of a [`Tensor`](super::Tensor).
///
/// Training runs in `f32`; gradient oracles use `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + SampleUniform
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Central finite-difference step used by the gradient checker.
    const FD_STEP: f64;
    /// Relative-error threshold accepted by the gradient checker.
    const FD_TOLERANCE: f64;
    const NAME: &'static str;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 fits every scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// `c = alpha * op(a) * op(b) + beta * c` for row/column strided operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path, $step:expr, $tol:expr) => {
        impl Scalar for $t {
            const FD_STEP: f64 = $step;
            const FD_TOLERANCE: f64 = $tol;
            const NAME: &'static str = stringify!($t);

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                beta: Self,
                c: &mut [Self],
                (rsc, csc): (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // Extents of the furthest element touched, for the bounds checks below.
                let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    (rows.saturating_sub(1) as isize * rs + cols.saturating_sub(1) as isize * cs)
                        as usize
                };
                if k > 0 {
                    assert!(a.len() > last(m, k, rsa, csa));
                    assert!(b.len() > last(k, n, rsb, csb));
                }
                assert!(c.len() > last(m, n, rsc, csc));
                // SAFETY: every index reachable through the given strides was bounds
                // checked above, and `c` does not alias `a` or `b`.
                unsafe {
                    $gemm(
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
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm, 1e-3, 1e-2);
impl_scalar!(f64, matrixmultiply::dgemm, 1e-6, 1e-6);
