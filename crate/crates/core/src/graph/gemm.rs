/// `c = op(a) * op(b) + beta * c` for row-major storage, where `a` is
/// logically `[m, k]` and `b` is logically `[k, n]`. A `true` transpose flag
/// means the operand is stored transposed (`[k, m]` or `[n, k]`).
#[allow(clippy::too_many_arguments)]
pub(super) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index addressed by the strides.
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
            n as isize,
            1,
        );
    }
}
