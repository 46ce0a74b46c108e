//! Thin row-major wrapper over `matrixmultiply::dgemm`.

/// Matrix operand: row-major storage with an optional logical transpose.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    pub data: &'a [f64],
    /// Leading dimension of the stored (untransposed) matrix.
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Operand<'a> {
    pub fn n(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            cols,
            transposed: false,
        }
    }

    pub fn t(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            cols,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a · b + beta · c` where `a` is logically `m × k`, `b` is `k × n`
/// and `c` is a dense row-major `m × n` buffer.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Operand, b: Operand, beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    assert!(a.data.len() >= m * k);
    assert!(b.data.len() >= k * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above bound every index the kernel touches given the
    // strides derived from each operand's stored layout.
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
