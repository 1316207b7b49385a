//! Data-parallel kernels with a sequential fallback.
//!
//! With the `parallel` feature (on by default) the dense matrix product and
//! the per-sample maps used by dataset generation and scoring run on the rayon
//! global pool. Without it, the same code paths run on the calling thread.
//! Both paths partition work by output row / output element, so every output
//! value is computed by the same sequence of floating-point operations and
//! results are bitwise identical regardless of thread count.

/// Rows below which the matrix product is never split.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_ROWS: usize = 16;

/// Operand layout for [`gemm`]: whether the stored matrix is transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Normal,
    Transposed,
}

/// `out[n×m] (+)= op(a)[n×k] · op(b)[k×m]`, dispatching to the parallel
/// implementation when the `parallel` feature is enabled.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    n: usize,
    k: usize,
    m: usize,
    out: &mut [f64],
    accumulate: bool,
) {
    #[cfg(feature = "parallel")]
    gemm_parallel(a, a_layout, b, b_layout, n, k, m, out, accumulate);
    #[cfg(not(feature = "parallel"))]
    gemm_sequential(a, a_layout, b, b_layout, n, k, m, out, accumulate);
}

fn strides(layout: Layout, rows: usize, cols: usize) -> (isize, isize) {
    // (row stride, column stride) of op(x) where op(x) is rows×cols.
    match layout {
        Layout::Normal => (cols as isize, 1),
        Layout::Transposed => (1, rows as isize),
    }
}

fn check_gemm_lengths(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &[f64]) {
    assert_eq!(a.len(), n * k, "gemm: lhs has {} values, want {n}×{k}", a.len());
    assert_eq!(b.len(), k * m, "gemm: rhs has {} values, want {k}×{m}", b.len());
    assert_eq!(out.len(), n * m, "gemm: out has {} values, want {n}×{m}", out.len());
}

/// Single-threaded matrix product.
#[allow(clippy::too_many_arguments)]
pub fn gemm_sequential(
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    n: usize,
    k: usize,
    m: usize,
    out: &mut [f64],
    accumulate: bool,
) {
    check_gemm_lengths(a, b, n, k, m, out);
    gemm_rows(a, a_layout, b, b_layout, 0, n, n, k, m, out, accumulate);
}

/// Matrix product split over blocks of output rows on the rayon pool.
#[cfg(feature = "parallel")]
#[allow(clippy::too_many_arguments)]
pub fn gemm_parallel(
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    n: usize,
    k: usize,
    m: usize,
    out: &mut [f64],
    accumulate: bool,
) {
    use rayon::prelude::*;

    check_gemm_lengths(a, b, n, k, m, out);
    let threads = rayon::current_num_threads();
    if threads <= 1 || n < 2 * MIN_PARALLEL_ROWS || m == 0 {
        gemm_rows(a, a_layout, b, b_layout, 0, n, n, k, m, out, accumulate);
        return;
    }
    let rows_per_chunk = n.div_ceil(threads).max(MIN_PARALLEL_ROWS);
    out.par_chunks_mut(rows_per_chunk * m).enumerate().for_each(|(chunk, block)| {
        let row0 = chunk * rows_per_chunk;
        let rows = block.len() / m;
        gemm_rows(a, a_layout, b, b_layout, row0, rows, n, k, m, block, accumulate);
    });
}

#[allow(clippy::too_many_arguments)]
fn gemm_rows(
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    row0: usize,
    rows: usize,
    n: usize,
    k: usize,
    m: usize,
    out: &mut [f64],
    accumulate: bool,
) {
    if rows == 0 || m == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = strides(a_layout, n, k);
    let (rsb, csb) = strides(b_layout, k, m);
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert_eq!(out.len(), rows * m);
    // SAFETY: the strides describe op(a) as n×k and op(b) as k×m inside the
    // slices whose lengths were checked; `row0 + rows <= n` so the offset
    // pointer stays in bounds, and `out` is a contiguous rows×m block.
    unsafe {
        let a_ptr = a.as_ptr().offset(row0 as isize * rsa);
        matrixmultiply::dgemm(
            rows,
            k,
            m,
            1.0,
            a_ptr,
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// Apply `f` to every index in `0..n`, collecting results in order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Apply `f` to every element of `items`, collecting results in order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
