//! Small dense linear-algebra helpers shared by the solvers and the landscape code.

use nalgebra::{DMatrix, DVector};

pub fn frob_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x * x).sum()
}

pub fn outer_self(u: &DMatrix<f64>) -> DMatrix<f64> {
    u * u.transpose()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Singular values sorted in descending order.
pub fn singular_values_desc(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Number of singular values above `rel_tol * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let s = singular_values_desc(m);
    match s.first() {
        Some(&top) if top > 0.0 => s.iter().filter(|&&x| x > rel_tol * top).count(),
        _ => 0,
    }
}

/// Symmetric eigendecomposition with eigenvalues in ascending order and the
/// eigenvectors permuted to match.
pub fn sym_eigen_sorted(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = symmetrize(m).symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn min_eigenpair(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let (vals, vecs) = sym_eigen_sorted(m);
    (vals[0], vecs.column(0).into_owned())
}

/// Orthonormal basis of the right null space of `m`: right singular vectors
/// whose singular value is at most `rel_tol * sigma_max`.
pub fn null_space(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    // Pad so the thin SVD returns a full set of right singular vectors.
    let padded = if rows < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (rows, cols)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let top = svd.singular_values.iter().copied().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= rel_tol * top.max(f64::MIN_POSITIVE))
        .collect();
    DMatrix::from_fn(cols, keep.len(), |r, c| v_t[(keep[c], r)])
}

/// Count of eigenvalues below `-tol`.
pub fn negative_count(m: &DMatrix<f64>, tol: f64) -> usize {
    let (vals, _) = sym_eigen_sorted(m);
    vals.iter().filter(|&&v| v < -tol).count()
}

pub fn column_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.as_slice().to_vec()
}
