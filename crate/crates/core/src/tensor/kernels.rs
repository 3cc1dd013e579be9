//! Thin wrappers over `matrixmultiply::sgemm`. Every product accumulates
//! into `c` (`c += a·b`).

/// Row/column strides of a matrix view.
pub(crate) type Strides = (usize, usize);

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    strided(m, k, n, a, (k, 1), b, (n, 1), c, (n, 1));
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    strided(m, k, n, a, (k, 1), b, (1, k), c, (n, 1));
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    strided(m, k, n, a, (1, m), b, (n, 1), c, (n, 1));
}

fn extent(rows: usize, cols: usize, (rs, cs): Strides) -> usize {
    (rows - 1) * rs + (cols - 1) * cs + 1
}

/// General strided product `c += a·b` over views into flat buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: Strides,
    b: &[f32],
    sb: Strides,
    c: &mut [f32],
    sc: Strides,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= extent(m, k, sa), "lhs view out of bounds");
    assert!(b.len() >= extent(k, n, sb), "rhs view out of bounds");
    assert!(c.len() >= extent(m, n, sc), "output view out of bounds");
    // SAFETY: the asserts above keep every index the kernel touches in bounds,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}
