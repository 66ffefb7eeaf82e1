//! Thin strided GEMM wrapper plus the small dense routines the editor and
//! adapter code need.

use nalgebra::{DMatrix, Dyn, Matrix, RawStorage};

/// `c = alpha * op(a) * op(b) + beta * c`, where `op` optionally transposes.
///
/// Works on any dynamically sized storage (owned matrices or views) by
/// handing the raw strides to `matrixmultiply`.
pub fn gemm<SA, SB>(
    alpha: f64,
    a: &Matrix<f64, Dyn, Dyn, SA>,
    trans_a: bool,
    b: &Matrix<f64, Dyn, Dyn, SB>,
    trans_b: bool,
    beta: f64,
    c: &mut DMatrix<f64>,
) where
    SA: RawStorage<f64, Dyn, Dyn>,
    SB: RawStorage<f64, Dyn, Dyn>,
{
    let (mut m, mut k) = a.shape();
    let (mut rsa, mut csa) = a.strides();
    if trans_a {
        std::mem::swap(&mut m, &mut k);
        std::mem::swap(&mut rsa, &mut csa);
    }
    let (mut kb, mut n) = b.shape();
    let (mut rsb, mut csb) = b.strides();
    if trans_b {
        std::mem::swap(&mut kb, &mut n);
        std::mem::swap(&mut rsb, &mut csb);
    }
    assert_eq!(k, kb, "gemm: inner dimensions differ");
    assert_eq!(c.shape(), (m, n), "gemm: output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            *c *= beta;
        }
        return;
    }
    let (rsc, csc) = c.strides();
    // SAFETY: the shapes and strides above describe the three buffers
    // exactly; `c` is uniquely borrowed and cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.ptr(),
            rsa as isize,
            csa as isize,
            b.data.ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `op(a) * op(b)` into a fresh matrix.
pub fn matmul<SA, SB>(
    a: &Matrix<f64, Dyn, Dyn, SA>,
    trans_a: bool,
    b: &Matrix<f64, Dyn, Dyn, SB>,
    trans_b: bool,
) -> DMatrix<f64>
where
    SA: RawStorage<f64, Dyn, Dyn>,
    SB: RawStorage<f64, Dyn, Dyn>,
{
    let m = if trans_a { a.ncols() } else { a.nrows() };
    let n = if trans_b { b.nrows() } else { b.ncols() };
    let mut c = DMatrix::zeros(m, n);
    gemm(1.0, a, trans_a, b, trans_b, 0.0, &mut c);
    c
}

/// Numerical rank: count of singular values above `rel_tol * s_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}
