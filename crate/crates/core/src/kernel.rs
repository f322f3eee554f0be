//! Dense f64 kernels shared by the tensor type and the compute graph.

/// A strided read-only view of a matrix stored inside a flat slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

/// A strided mutable view of a matrix stored inside a flat slice.
pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

fn last_index(offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    offset + (rows - 1) * rs + (cols - 1) * cs
}

impl<'a> MatRef<'a> {
    /// Row-major `rows x cols` matrix occupying the whole slice.
    pub fn dense(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` matrix, as a `cols x rows` view.
    pub fn dense_t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            rows: cols,
            cols: rows,
            rs: 1,
            cs: cols,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

impl<'a> MatMut<'a> {
    pub fn dense(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        MatMut {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }
}

/// `c = alpha * a * b + beta * c`. With `beta == 0` the previous contents of `c` are ignored.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] = if beta == 0.0 { 0.0 } else { beta * c.data[idx] };
            }
        }
        return;
    }
    assert!(
        last_index(a.offset, m, k, a.rs, a.cs) < a.data.len(),
        "gemm: a out of bounds"
    );
    assert!(
        last_index(b.offset, k, n, b.rs, b.cs) < b.data.len(),
        "gemm: b out of bounds"
    );
    assert!(
        last_index(c.offset, m, n, c.rs, c.cs) < c.data.len(),
        "gemm: c out of bounds"
    );
    // SAFETY: every index touched by dgemm is bounded by the asserts above, and `c`
    // is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Numerically stable in-place softmax over one row.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub(crate) fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}
