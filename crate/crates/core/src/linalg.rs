//! Small dense linear-algebra helpers shared by the fitters.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Base jitter relative to the mean of the diagonal.
pub const JITTER_BASE: f64 = 1e-8;
/// Number of times the jitter is doubled before giving up.
pub const JITTER_DOUBLINGS: usize = 6;

/// Cholesky factorization with diagonal jitter repair.
///
/// Tries the plain factorization first, then adds `1e-8 * mean(diag)` to the
/// diagonal, doubling up to six times. Returns the factor and the jitter that
/// was finally applied (zero when none was needed).
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    if let Some(ch) = Cholesky::new(a.clone()) {
        return Some((ch, 0.0));
    }
    let n = a.nrows();
    if n == 0 {
        return None;
    }
    let mean_diag = (a.diagonal().sum() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = JITTER_BASE * mean_diag;
    for _ in 0..=JITTER_DOUBLINGS {
        let mut b = a.clone();
        for i in 0..n {
            b[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(b) {
            return Some((ch, jitter));
        }
        jitter *= 2.0;
    }
    None
}

pub fn chol_logdet(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Greedy in-order column selection: a column is kept when its residual after
/// projection onto the already kept columns retains more than `tol` of its norm.
/// Returns `(kept, dropped)` column indices.
pub fn independent_columns(x: &DMatrix<f64>, tol: f64) -> (Vec<usize>, Vec<usize>) {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        if norm == 0.0 {
            dropped.push(j);
            continue;
        }
        let mut v = col;
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let rn = v.norm();
        if rn > tol * norm {
            basis.push(v / rn);
            kept.push(j);
        } else {
            dropped.push(j);
        }
    }
    (kept, dropped)
}

pub fn select_columns(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), cols.len(), |i, j| x[(i, cols[j])])
}

/// Symmetric eigendecomposition with eigenvalues sorted in decreasing order.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Projects a symmetric matrix onto the cone of matrices with eigenvalues `>= floor`.
pub fn floor_eigenvalues(a: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    if a.nrows() == 0 {
        return (a.clone(), false);
    }
    let (vals, vecs) = sym_eigen_desc(a);
    let clipped = vals.iter().any(|&v| v < floor);
    if !clipped {
        return ((a + a.transpose()) * 0.5, false);
    }
    let fixed = DVector::from_iterator(vals.len(), vals.iter().map(|&v| v.max(floor)));
    let out = &vecs * DMatrix::from_diagonal(&fixed) * vecs.transpose();
    (out, true)
}

/// Unique elements of a symmetric `r x r` matrix in upper-triangle row-major order.
pub fn sym_pairs(r: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(r * (r + 1) / 2);
    for u in 0..r {
        for v in u..r {
            out.push((u, v));
        }
    }
    out
}

pub fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_repairs_singular_psd() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (_, jitter) = cholesky_with_jitter(&a).expect("repairable");
        assert!(jitter > 0.0 && jitter <= 1e-8 * 64.0);
    }

    #[test]
    fn jitter_gives_up_on_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky_with_jitter(&a).is_none());
    }

    #[test]
    fn independent_columns_flags_duplicates() {
        let x = DMatrix::from_row_slice(4, 3, &[1., 1., 2., 1., 2., 2., 1., 3., 2., 1., 4., 2.]);
        let (kept, dropped) = independent_columns(&x, 1e-9);
        assert_eq!(kept, vec![0, 1]);
        assert_eq!(dropped, vec![2]);
    }

    #[test]
    fn eigen_sorted_descending_and_reconstructs() {
        let a = DMatrix::from_row_slice(3, 3, &[2., 0.5, 0.1, 0.5, 1., 0.2, 0.1, 0.2, 3.]);
        let (vals, vecs) = sym_eigen_desc(&a);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        let rec = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!((rec - a).abs().max() < 1e-12);
    }
}
