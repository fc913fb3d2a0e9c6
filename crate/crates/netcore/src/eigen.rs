//! Symmetric eigendecomposition with a fixed ordering and sign convention.
//!
//! Eigenpairs come back in descending eigenvalue order. Each eigenvector is
//! flipped so that its largest-magnitude component is positive; when several
//! components tie for the largest magnitude the lowest index decides.

use nalgebra::SymmetricEigen;

use crate::Mat;

/// Relative tolerance used when deciding that two components tie in magnitude.
const SIGN_TIE_RTOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SortedEigen {
    /// Eigenvalues, descending.
    pub values: Vec<f64>,
    /// Eigenvectors as columns, matching `values`.
    pub vectors: Mat,
}

/// Decomposes the symmetric matrix `a` (only symmetric inputs are meaningful).
pub fn sym_eigen(a: &Mat) -> SortedEigen {
    assert!(a.is_square(), "sym_eigen needs a square matrix");
    let n = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .total_cmp(&eig.eigenvalues[i])
            .then(i.cmp(&j))
    });
    let mut vectors = Mat::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(eig.eigenvalues[src]);
        let mut col = eig.eigenvectors.column(src).into_owned();
        if sign_flip_needed(col.as_slice()) {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    SortedEigen { values, vectors }
}

/// True when the vector's dominant component (lowest index on ties) is negative.
pub fn sign_flip_needed(v: &[f64]) -> bool {
    let max_abs = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max_abs == 0.0 {
        return false;
    }
    let lead = v
        .iter()
        .find(|x| x.abs() >= max_abs * (1.0 - SIGN_TIE_RTOL))
        .copied()
        .unwrap_or(0.0);
    lead < 0.0
}
