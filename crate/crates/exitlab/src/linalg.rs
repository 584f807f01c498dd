//! Small dense-vector helpers shared by the model and the distance code.
//!
//! Everything here works on plain `&[f64]` slices; matrices are row-major.

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = W x` for a row-major `rows x cols` matrix.
pub(crate) fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    (0..rows).map(|r| dot(&w[r * cols..(r + 1) * cols], x)).collect()
}

/// `out = W^T x` for a row-major `rows x cols` matrix (`x` has length `rows`).
pub(crate) fn matvec_t(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        axpy(x[r], &w[r * cols..(r + 1) * cols], &mut out);
    }
    out
}

/// Rank-one accumulate: `W += a x^T` (`W` is `rows x cols`, `a` len `rows`).
pub(crate) fn outer_acc(w: &mut [f64], a: &[f64], x: &[f64]) {
    debug_assert_eq!(w.len(), a.len() * x.len());
    let cols = x.len();
    for (r, &ar) in a.iter().enumerate() {
        axpy(ar, x, &mut w[r * cols..(r + 1) * cols]);
    }
}
