use std::fmt::Debug;
use std::iter::Sum;

/// Element type of a tensor.
///
/// Training runs in `f32`. The `f64` instantiation exists so gradient checks
/// can run the exact same graph code with a finite-difference noise floor far
/// below the tolerance being asserted.
pub trait Float:
    num_traits::Float + num_traits::FromPrimitive + Default + Debug + Send + Sync + Sum + 'static
{
    /// `c = alpha * a·b + beta * c` with explicit row/column strides.
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

    fn of(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite conversion")
    }
}

fn check_gemm_bounds<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    c: &[T],
    (rsc, csc): (isize, isize),
) {
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) as usize * rs as usize + (cols as isize - 1) as usize * cs as usize
        }
    };
    assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
    if m > 0 && k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
    }
    if k > 0 && n > 0 {
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    }
    if m > 0 && n > 0 {
        assert!(last(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    }
}

impl Float for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        a_strides: (isize, isize),
        b: &[f32],
        b_strides: (isize, isize),
        beta: f32,
        c: &mut [f32],
        c_strides: (isize, isize),
    ) {
        check_gemm_bounds(m, k, n, a, a_strides, b, b_strides, c, c_strides);
        // SAFETY: every index touched by the kernel was bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                c_strides.0,
                c_strides.1,
            );
        }
    }
}

impl Float for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        a_strides: (isize, isize),
        b: &[f64],
        b_strides: (isize, isize),
        beta: f64,
        c: &mut [f64],
        c_strides: (isize, isize),
    ) {
        check_gemm_bounds(m, k, n, a, a_strides, b, b_strides, c, c_strides);
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                c_strides.0,
                c_strides.1,
            );
        }
    }
}

/// Row-major `c[m×n] (+)= a[m×k] · b[k×n]`.
pub(crate) fn matmul_into<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, (k as isize, 1), b, (n as isize, 1), beta, c, (n as isize, 1));
}

/// Row-major `c[m×n] (+)= a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt_into<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, (k as isize, 1), b, (1, k as isize), beta, c, (n as isize, 1));
}

/// Row-major `c[m×n] (+)= a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_tn_into<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, (1, m as isize), b, (n as isize, 1), beta, c, (n as isize, 1));
}
