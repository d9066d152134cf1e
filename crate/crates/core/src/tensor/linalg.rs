/// `c (+)= op(a) · op(b)` for row-major `m×k` and `k×n` operands.
///
/// `a_t`/`b_t` mean the stored buffer is the transpose (`k×m` / `n×k`).
/// Panics on buffer-length mismatch; callers validate shapes first.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer too small");
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    strided_gemm(m, k, n, a, rsa, csa, b, rsb, csb, c, n as isize, 1, accumulate);
}

/// General strided GEMM. Strides are in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn strided_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
        }
    };
    assert!(extent(m, k, rsa, csa) <= a.len(), "gemm: a out of bounds");
    assert!(extent(k, n, rsb, csb) <= b.len(), "gemm: b out of bounds");
    assert!(extent(m, n, rsc, csc) <= c.len(), "gemm: c out of bounds");
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[(i as isize * rsc + j as isize * csc) as usize] = 0.0;
                }
            }
        }
        return;
    }
    // SAFETY: all strided accesses were bounds-checked above against the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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
