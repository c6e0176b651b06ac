/// Strided matrix view descriptor: `(row_stride, col_stride)`.
pub type Strides = (isize, isize);

/// `c = alpha * a · b + beta * c` over strided row/column views.
///
/// `a` is `m × k`, `b` is `k × n`, `c` is `m × n`. Strides let callers pass
/// transposed views without copying. Panics if any view reaches outside its
/// slice.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    check_view(a.len(), m, k, sa, "a");
    check_view(b.len(), k, n, sb, "b");
    check_view(c.len(), m, n, sc, "c");
    // SAFETY: every view was bounds-checked above; `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            sc.0,
            sc.1,
        );
    }
}

fn check_view(len: usize, rows: usize, cols: usize, s: Strides, name: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(s.0 >= 0 && s.1 >= 0, "negative stride for {name}");
    let last = (rows - 1) as isize * s.0 + (cols - 1) as isize * s.1;
    assert!(
        (last as usize) < len,
        "gemm view {name} ({rows}x{cols}, strides {s:?}) exceeds buffer of {len}"
    );
}
