//! Safe wrappers over the `matrixmultiply` kernels for row-major operands.

macro_rules! gemm_impl {
    ($name:ident, $ty:ty, $kernel:path) => {
        #[allow(clippy::too_many_arguments)]
        pub(super) fn $name(
            m: usize,
            k: usize,
            n: usize,
            a: &[$ty],
            trans_a: bool,
            b: &[$ty],
            trans_b: bool,
            beta: $ty,
            c: &mut [$ty],
        ) {
            assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
            if m == 0 || n == 0 {
                return;
            }
            if k == 0 {
                c[..m * n].iter_mut().for_each(|v| *v *= beta);
                return;
            }
            let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
            let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
            // SAFETY: bounds were checked above and the strides describe
            // exactly the row-major layouts of `a`, `b` and `c`.
            unsafe {
                $kernel(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    rsa as isize,
                    csa as isize,
                    b.as_ptr(),
                    rsb as isize,
                    csb as isize,
                    beta,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    };
}

gemm_impl!(sgemm, f32, matrixmultiply::sgemm);
gemm_impl!(dgemm, f64, matrixmultiply::dgemm);
