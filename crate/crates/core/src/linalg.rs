//! Small dense-vector helpers shared across modules.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `out = M·x` for a row-major `rows × x.len()` matrix.
pub fn matvec(m: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    debug_assert_eq!(m.len(), rows * cols);
    m.chunks_exact(cols).map(|row| dot(row, x)).collect()
}

/// `out = Mᵀ·y` for a row-major `y.len() × cols` matrix.
pub fn matvec_t(m: &[f64], cols: usize, y: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), y.len() * cols);
    let mut out = vec![0.0; cols];
    for (row, yi) in m.chunks_exact(cols).zip(y) {
        out.iter_mut().zip(row).for_each(|(o, r)| *o += r * yi);
    }
    out
}
