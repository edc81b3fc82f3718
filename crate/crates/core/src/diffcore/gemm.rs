//! Safe wrapper over `matrixmultiply::dgemm`.

/// Strides of a logical `rows x cols` operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl Layout {
    pub(crate) fn row_major(rows: usize, cols: usize) -> Self {
        Layout {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Logical `rows x cols` view of a row-major `cols x rows` buffer.
    pub(crate) fn transposed(rows: usize, cols: usize) -> Self {
        Layout {
            rows,
            cols,
            rs: 1,
            cs: rows as isize,
        }
    }
}

/// `c (m x n) = a (m x k) · b (k x n) + beta · c`, with `c` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    beta: f64,
) {
    assert!(la.rows == m && la.cols == k && a.len() >= m * k);
    assert!(lb.rows == k && lb.cols == n && b.len() >= k * n);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n]
            .iter_mut()
            .for_each(|v| *v = if beta == 0.0 { 0.0 } else { *v * beta });
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches by the
    // slice lengths; `c` is exclusively borrowed and does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
