//! Calibration Hessian `H = X X^T + lambda I` and its Cholesky-derived inverses.

use nalgebra::DMatrix;

use crate::error::{QuantError, Result};
use crate::quant::QuantConfig;
use crate::ActivationMatrix;

/// Relative tolerance for the symmetry check in [`cholesky_factor`].
const SYMMETRY_TOL: f64 = 1e-10;

/// Damped calibration Hessian together with the inverse information the
/// solvers need. Immutable once built.
#[derive(Debug, Clone)]
pub struct HessianInfo {
    pub dim: usize,
    /// `X X^T + lambda I`.
    pub damped: DMatrix<f64>,
    /// `damped^-1`.
    pub inverse: DMatrix<f64>,
    /// Upper-triangular `U` with `U^T U = damped^-1`. Row `j` of `U` restricted
    /// to columns `>= j` is proportional to row `j` of the inverse of the
    /// trailing block `damped[j.., j..]`, which is what column-by-column error
    /// compensation needs.
    pub inverse_upper: DMatrix<f64>,
    pub lambda: f64,
}

impl HessianInfo {
    /// Build from an already-formed symmetric matrix plus the damping that was
    /// added to it.
    pub fn from_damped(damped: DMatrix<f64>, lambda: f64) -> Result<Self> {
        let dim = damped.nrows();
        if damped.ncols() != dim {
            return Err(QuantError::shape(
                "Hessian",
                "square matrix",
                format!("{} x {}", damped.nrows(), damped.ncols()),
            ));
        }
        let l = cholesky_factor(&damped)?;
        let inverse = inverse_from_cholesky(&l);
        let inverse_upper = cholesky_factor(&inverse)?.transpose();
        Ok(HessianInfo {
            dim,
            damped,
            inverse,
            inverse_upper,
            lambda,
        })
    }

    /// Diagonal Hessian; off-diagonal compensation terms vanish exactly.
    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag));
        Self::from_damped(d, 0.0)
    }
}

/// Form `X X^T`, add `damping_ratio * mean(diag)` (or `epsilon` when the mean
/// diagonal is zero) and factor it.
pub fn compute_hessian(x_hat: &ActivationMatrix, cfg: &QuantConfig) -> Result<HessianInfo> {
    cfg.validate()?;
    let (dim, n) = x_hat.shape();
    if dim == 0 || n == 0 {
        return Err(QuantError::InvalidInput(format!(
            "calibration activations must be non-empty, got {dim} x {n}"
        )));
    }
    if let Some(v) = x_hat.iter().find(|v| !v.is_finite()) {
        return Err(QuantError::InvalidInput(format!(
            "non-finite calibration activation {v}"
        )));
    }
    let mut h = x_hat * x_hat.transpose();
    symmetrize(&mut h);
    let mean_diag = h.diagonal().sum() / dim as f64;
    let lambda = if mean_diag > 0.0 {
        cfg.damping_ratio * mean_diag
    } else {
        cfg.epsilon
    };
    for i in 0..dim {
        h[(i, i)] += lambda;
    }
    HessianInfo::from_damped(h, lambda).map_err(|e| match e {
        QuantError::NotPositiveDefinite { .. } => QuantError::SingularHessian {
            lambda,
            damping_ratio: cfg.damping_ratio,
        },
        other => other,
    })
}

fn symmetrize(h: &mut DMatrix<f64>) {
    let n = h.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
}

/// Lower-triangular `L` with `L L^T = h` and a strictly positive diagonal.
///
/// Pivots that are not comfortably above rounding noise relative to the
/// original diagonal entry are treated as a loss of definiteness.
pub fn cholesky_factor(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = h.nrows();
    if h.ncols() != n {
        return Err(QuantError::shape(
            "Cholesky input",
            "square matrix",
            format!("{} x {}", h.nrows(), h.ncols()),
        ));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (h[(i, j)], h[(j, i)]);
            if !a.is_finite() || !b.is_finite() {
                return Err(QuantError::NonFinite("Cholesky factorization".into()));
            }
            if (a - b).abs() > SYMMETRY_TOL * (1.0 + a.abs().max(b.abs())) {
                return Err(QuantError::NotSymmetric { row: i, col: j });
            }
        }
    }

    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut pivot = h[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        let floor = 4.0 * f64::EPSILON * (n as f64) * h[(j, j)].abs();
        if !pivot.is_finite() || pivot <= floor {
            return Err(QuantError::NotPositiveDefinite { index: j, pivot });
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut v = h[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / d;
        }
    }
    Ok(l)
}

/// Inverse of a lower-triangular matrix by forward substitution.
pub fn invert_lower(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::<f64>::zeros(n, n);
    for c in 0..n {
        inv[(c, c)] = 1.0 / l[(c, c)];
        for i in (c + 1)..n {
            let mut acc = 0.0;
            for k in c..i {
                acc += l[(i, k)] * inv[(k, c)];
            }
            inv[(i, c)] = -acc / l[(i, i)];
        }
    }
    inv
}

/// `(L L^T)^-1 = L^-T L^-1`, symmetrized.
pub fn inverse_from_cholesky(l: &DMatrix<f64>) -> DMatrix<f64> {
    let linv = invert_lower(l);
    let mut inv = linv.transpose() * &linv;
    symmetrize(&mut inv);
    inv
}
