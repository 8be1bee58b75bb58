use faer::linalg::matmul::matmul;
use faer::{Accum, MatMut, MatRef, Par};

/// Storage order of a row-major `rows x cols` operand as seen by the product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Trans {
    No,
    Yes,
}

/// `c = alpha * op(a) * op(b) + beta * c` over row-major buffers.
///
/// `a` is stored as `a_rows x a_cols`; `op` transposes it when requested.
/// Single-threaded, so results depend only on the operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    alpha: f64,
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    ta: Trans,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    tb: Trans,
    beta: f64,
    c: &mut [f64],
) {
    let av = MatRef::from_row_major_slice(&a[..a_rows * a_cols], a_rows, a_cols);
    let bv = MatRef::from_row_major_slice(&b[..b_rows * b_cols], b_rows, b_cols);
    let av = if ta == Trans::Yes { av.transpose() } else { av };
    let bv = if tb == Trans::Yes { bv.transpose() } else { bv };
    let (m, n) = (av.nrows(), bv.ncols());
    assert_eq!(av.ncols(), bv.nrows(), "gemm: inner dimensions differ");
    assert_eq!(c.len(), m * n, "gemm: output buffer size");
    let accum = if beta == 0.0 {
        Accum::Replace
    } else {
        if beta != 1.0 {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        Accum::Add
    };
    let cv = MatMut::from_row_major_slice_mut(c, m, n);
    matmul(cv, accum, av, bv, alpha, Par::Seq);
}
