//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
/// Columns of the returned matrix are the matching unit eigenvectors.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let sym = 0.5 * (a + a.transpose());
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        // sign convention: largest-magnitude entry positive
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

pub fn singular_values(a: &DMatrix<f64>) -> DVector<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DVector::zeros(0);
    }
    a.clone().svd(false, false).singular_values
}

pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    singular_values(a).iter().cloned().fold(0.0, f64::max)
}

/// Smallest of the `min(rows, cols)` singular values.
pub fn min_singular_value(a: &DMatrix<f64>) -> f64 {
    singular_values(a).iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Pseudo-inverse of a symmetric positive semidefinite matrix; eigenvalues
/// below `rel_cutoff * max_eigenvalue` are treated as zero.
pub fn pinv_psd(a: &DMatrix<f64>, rel_cutoff: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let (vals, vecs) = sym_eigen_desc(a);
    let top = vals.iter().cloned().fold(0.0, f64::max);
    let mut out = DMatrix::zeros(n, n);
    if top <= 0.0 {
        return out;
    }
    for i in 0..n {
        if vals[i] > rel_cutoff * top {
            let q = vecs.column(i);
            out += (q * q.transpose()) / vals[i];
        }
    }
    out
}

/// Orthonormal basis of the complement of a unit vector, as the trailing
/// columns of the Householder reflector sending `v` to `e1`.
pub fn orthonormal_complement(v: &DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    let mut u = v.clone();
    let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
    u[0] += sign * v.norm();
    let un = u.norm_squared();
    let mut h = DMatrix::identity(n, n);
    if un > 0.0 {
        h -= (&u * u.transpose()) * (2.0 / un);
    }
    h.columns(1, n - 1).into_owned()
}

/// Frobenius-norm relative error `||a - b|| / ||b||`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    a.is_square() && (a - a.transpose()).amax() <= tol * a.amax().max(1.0)
}
