//! Strided matrix multiply on flat buffers, backed by `matrixmultiply`.

use crate::tensor::Elem;

/// A strided read-only matrix view into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [Elem],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    /// Contiguous row-major `[rows, cols]` matrix starting at `offset`.
    pub fn dense(data: &'a [Elem], offset: usize, rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
        assert!(last < self.data.len(), "matrix view out of bounds");
    }
}

/// Mutable strided destination.
pub(crate) struct MatMut<'a> {
    pub data: &'a mut [Elem],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatMut<'a> {
    pub fn dense(data: &'a mut [Elem], offset: usize, rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }
}

/// `c = alpha * a @ b + beta * c`.
pub(crate) fn gemm(alpha: Elem, a: MatRef<'_>, b: MatRef<'_>, beta: Elem, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        let last = c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
        assert!(last < c.data.len(), "gemm destination out of bounds");
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every pointer/stride combination was bounds-checked above and
    // the destination is uniquely borrowed.
    unsafe {
        let ap = a.data.as_ptr().add(a.offset);
        let bp = b.data.as_ptr().add(b.offset);
        let cp = c.data.as_mut_ptr().add(c.offset);
        gemm_raw(
            m,
            k,
            n,
            alpha,
            ap,
            a.rs as isize,
            a.cs as isize,
            bp,
            b.rs as isize,
            b.cs as isize,
            beta,
            cp,
            c.rs as isize,
            c.cs as isize,
        );
    }
}

#[cfg(not(feature = "single-precision"))]
use matrixmultiply::dgemm as gemm_raw;
#[cfg(feature = "single-precision")]
use matrixmultiply::sgemm as gemm_raw;
