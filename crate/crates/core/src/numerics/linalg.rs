use super::DenseMatrix;
use crate::error::{CondaError, Result};

const SYMMETRY_TOL: f64 = 1e-9;

fn check_symmetric(op: &'static str, s: &DenseMatrix) -> Result<()> {
    if !s.is_square() {
        return Err(CondaError::shape(
            op,
            format!("{}x{} is not square", s.rows(), s.cols()),
        ));
    }
    let tol = SYMMETRY_TOL * s.max_abs().max(1.0);
    let asym = s.asymmetry();
    if asym > tol {
        return Err(CondaError::InvalidInput(format!(
            "{op}: matrix not symmetric (max |a_ij - a_ji| = {asym:e})"
        )));
    }
    Ok(())
}

/// Lower-triangular Cholesky factor `L` with `s = L Lᵀ`.
pub fn cholesky(s: &DenseMatrix) -> Result<DenseMatrix> {
    check_symmetric("cholesky", s)?;
    let n = s.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut diag = s.get(j, j);
        for k in 0..j {
            diag -= l.get(j, k) * l.get(j, k);
        }
        if !(diag.is_finite() && diag > 0.0) {
            return Err(CondaError::NotPositiveDefinite { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut v = s.get(i, j);
            for k in 0..j {
                v -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, v / ljj);
        }
    }
    Ok(l)
}

/// Solves `L x = b` in place for lower-triangular `L`.
pub fn cholesky_solve_lower(l: &DenseMatrix, b: &mut [f64]) {
    let n = l.rows();
    for i in 0..n {
        let mut v = b[i];
        let row = l.row(i);
        for k in 0..i {
            v -= row[k] * b[k];
        }
        b[i] = v / row[i];
    }
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky factor.
/// The result is exactly symmetric.
pub fn cholesky_inverse(s: &DenseMatrix) -> Result<DenseMatrix> {
    let l = cholesky(s)?;
    let n = l.rows();
    // Columns of L⁻¹, computed by forward substitution on unit vectors.
    let mut linv = DenseMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for c in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[c] = 1.0;
        cholesky_solve_lower(&l, &mut e);
        for r in 0..n {
            linv.set(r, c, e[r]);
        }
    }
    // s⁻¹ = L⁻ᵀ L⁻¹
    let mut inv = linv.matmul_transa(&linv)?;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (inv.get(i, j) + inv.get(j, i));
            inv.set(i, j, v);
            inv.set(j, i, v);
        }
    }
    Ok(inv)
}
