//! Dense matrix product on row-major slices.

/// Row-major `rows × cols` operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    transposed: bool,
}

pub(crate) fn view(data: &[f64], rows: usize, cols: usize, transposed: bool) -> Operand<'_> {
    assert_eq!(data.len(), rows * cols);
    Operand {
        data,
        rows,
        cols,
        transposed,
    }
}

impl Operand<'_> {
    // (rows, cols, row stride, column stride) of the logical matrix.
    fn layout(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `c ← a·b + beta·c` with `c` row-major.
pub(crate) fn gemm(c: &mut [f64], a: Operand<'_>, b: Operand<'_>, beta: f64) {
    let (m, k, rsa, csa) = a.layout();
    let (kb, n, rsb, csb) = b.layout();
    assert_eq!(k, kb);
    assert_eq!(c.len(), m * n);
    // SAFETY: the layouts above address exactly the checked slice lengths.
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
