//! Scalar abstraction: all dense math is generic over [`Real`], instantiated
//! at `f64` through the crate-root aliases and at `f32` for reduced-precision
//! experiments.

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar for dense-array math (`f32` or `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::fmt::LowerExp
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal into the scalar type.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 literal converts to scalar")
    }

    /// Widens to `f64` (exact for both supported scalars).
    fn widen(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// `c := alpha * op(a) * op(b) + beta * c` with row-major storage.
    ///
    /// `a` is `m x k` after the optional transpose, `b` is `k x n`, `c` is
    /// `m x n`. The default is a plain triple loop; `f32`/`f64` override it
    /// with SIMD kernels.
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    ) {
        assert_eq!(a.len(), m * k, "gemm: lhs length");
        assert_eq!(b.len(), k * n, "gemm: rhs length");
        assert_eq!(c.len(), m * n, "gemm: out length");
        let at = |i: usize, l: usize| if trans_a { a[l * m + i] } else { a[i * k + l] };
        let bt = |l: usize, j: usize| if trans_b { b[j * k + l] } else { b[l * n + j] };
        for i in 0..m {
            for j in 0..n {
                let mut acc = Self::zero();
                for l in 0..k {
                    acc = acc + at(i, l) * bt(l, j);
                }
                c[i * n + j] = alpha * acc + beta * c[i * n + j];
            }
        }
    }
}

macro_rules! impl_real_gemm {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs length");
                assert_eq!(b.len(), k * n, "gemm: rhs length");
                assert_eq!(c.len(), m * n, "gemm: out length");
                if m == 0 || n == 0 || k == 0 {
                    return;
                }
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
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

impl_real_gemm!(f32, matrixmultiply::sgemm);
impl_real_gemm!(f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_loops() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm(false, false, 2, 3, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_transpose_flags() {
        // a^T where a is stored 3x2: logical 2x3 lhs.
        let a_t = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0]; // stored 3x2
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm(true, false, 2, 3, 2, 1.0, &a_t, &b, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // b^T where b is stored 2x3: logical 3x2 rhs.
        let b_t = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0]; // stored 2x3
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c2 = [0.0f64; 4];
        f64::gemm(false, true, 2, 3, 2, 1.0, &a, &b_t, 0.0, &mut c2);
        assert_eq!(c2, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn generic_fallback_agrees_with_f64_kernel() {
        // Exercise the default implementation through a thin wrapper type is
        // overkill; instead check the f32 kernel against the f64 one on the
        // same integers, which both represent exactly.
        let a32 = [1.0f32, 2.0, 3.0, 4.0];
        let b32 = [5.0f32, 6.0, 7.0, 8.0];
        let mut c32 = [0.0f32; 4];
        f32::gemm(false, false, 2, 2, 2, 1.0, &a32, &b32, 0.0, &mut c32);
        assert_eq!(c32, [19.0, 22.0, 43.0, 50.0]);
    }
}
