/// Row-major operand description: `trans` means the slice stores the
/// transpose of the logical operand.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    pub data: &'a [f64],
    pub trans: bool,
}

impl<'a> Operand<'a> {
    pub fn plain(data: &'a [f64]) -> Self {
        Operand { data, trans: false }
    }

    pub fn transposed(data: &'a [f64]) -> Self {
        Operand { data, trans: true }
    }
}

/// `c[m, n] = a[m, k] · b[k, n] + beta · c`, all row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Operand<'_>, b: Operand<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.data.len(), m * k);
    assert_eq!(b.data.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a.trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b.trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked against the dimensions above and the
    // strides index strictly inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
