//! Bounds-checked front end to the strided matrix multiply.

/// Strided view of a matrix inside a flat buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Layout {
    pub fn new(offset: usize, row_stride: usize, col_stride: usize) -> Self {
        Self { offset, row_stride, col_stride }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `C[m×n] += A[m×k] · B[k×n]`.
///
/// Each element of C is accumulated as `c + Σ_k a·b`, with the inner sum
/// taken in increasing `k`, independent of where the element sits in the
/// matrix. Tiled forward passes rely on this to reproduce untiled results
/// bit for bit.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    lc: Layout,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(la.last(m, k) < a.len(), "gemm: A view out of bounds");
    assert!(lb.last(k, n) < b.len(), "gemm: B view out of bounds");
    assert!(lc.last(m, n) < c.len(), "gemm: C view out of bounds");
    let (rs, cs) = (lc.row_stride, lc.col_stride);
    let disjoint = m == 1 && (n == 1 || cs >= 1)
        || n == 1 && rs >= 1
        || cs >= 1 && rs >= n * cs
        || rs >= 1 && cs >= m * rs;
    assert!(disjoint, "gemm: C strides alias");
    // SAFETY: every element touched lies inside the slices (checked above)
    // and the C view has distinct addresses for distinct elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(la.offset),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr().add(lb.offset),
            lb.row_stride as isize,
            lb.col_stride as isize,
            1.0,
            c.as_mut_ptr().add(lc.offset),
            lc.row_stride as isize,
            lc.col_stride as isize,
        );
    }
}
