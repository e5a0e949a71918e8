//! Small dense linear-algebra helpers shared by the graph and covariance code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative asymmetry tolerance used by [`is_symmetric`].
pub const SYMMETRY_TOL: f64 = 1e-10;

pub fn is_symmetric(m: &DMatrix<f64>) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = 1.0 + m.amax();
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return false;
            }
        }
    }
    true
}

/// Replaces `m` with `(m + mᵀ) / 2`.
pub fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Ascending eigenvalues of a symmetric matrix.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    vals
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// `log|A|` from a Cholesky factor.
pub fn chol_logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Lower Cholesky factor as a plain matrix.
/// Inverse of a lower-triangular matrix with nonzero diagonal.
pub fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let ls = l.as_slice();
    let mut x = DMatrix::zeros(n, n);
    let xs = x.as_mut_slice();
    for j in 0..n {
        let col = &mut xs[j * n..(j + 1) * n];
        col[j] = 1.0;
        for k in j..n {
            let lk = &ls[k * n..(k + 1) * n];
            let xk = col[k] / lk[k];
            col[k] = xk;
            if xk != 0.0 {
                for (c, lv) in col[k + 1..].iter_mut().zip(&lk[k + 1..]) {
                    *c -= lv * xk;
                }
            }
        }
    }
    x
}

/// `A⁻¹` from the Cholesky factor `A = LLᵀ`, as `L⁻ᵀ L⁻¹`.
pub fn spd_inverse(chol: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    let li = lower_triangular_inverse(&chol.l());
    let mut inv = li.transpose() * &li;
    symmetrize_in_place(&mut inv);
    inv
}

/// `(A ⊗ B) X` without forming the Kronecker product.
pub fn kron_apply(a: &DMatrix<f64>, b: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let (w, r) = (a.nrows(), b.nrows());
    assert_eq!(x.nrows(), w * r, "kron_apply dimension mismatch");
    let m = x.ncols();
    let bx: Vec<DMatrix<f64>> = (0..w).map(|u| b * x.view((u * r, 0), (r, m))).collect();
    let mut out = DMatrix::zeros(w * r, m);
    for s in 0..w {
        let mut blk = out.view_mut((s * r, 0), (r, m));
        for (u, bxu) in bx.iter().enumerate() {
            let c = a[(s, u)];
            if c != 0.0 {
                blk += bxu * c;
            }
        }
    }
    out
}

pub fn chol_lower(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(cholesky(m, what)?.l())
}

pub fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_inverse_matches_nalgebra() {
        let a = DMatrix::from_fn(7, 7, |i, j| ((i * 7 + j) as f64 * 0.37).sin());
        let m = &a * a.transpose() + DMatrix::identity(7, 7);
        let chol = cholesky(&m, "test").unwrap();
        let inv = spd_inverse(&chol);
        assert!((&inv * &m - DMatrix::identity(7, 7)).amax() < 1e-12);
        assert!((inv - chol.inverse()).amax() < 1e-12);
    }

    #[test]
    fn kron_apply_matches_dense_product() {
        let a = DMatrix::from_fn(3, 3, |i, j| (i as f64 + 1.0) * 0.3 - j as f64 * 0.7);
        let b = DMatrix::from_fn(2, 2, |i, j| (i * 2 + j) as f64 - 1.5);
        let x = DMatrix::from_fn(6, 4, |i, j| ((i * 4 + j) as f64).sin());
        let dense = kron(&a, &b) * &x;
        assert!((kron_apply(&a, &b, &x) - dense).amax() < 1e-14);
    }

    #[test]
    fn symmetric_detection() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(is_symmetric(&a));
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.5, 1.0]);
        assert!(!is_symmetric(&b));
        assert!(!is_symmetric(&DMatrix::zeros(2, 3)));
    }

    #[test]
    fn logdet_matches_product_of_eigenvalues() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let c = cholesky(&a, "a").unwrap();
        assert!((chol_logdet(&c) - 11.0f64.ln()).abs() < 1e-14);
    }
}
