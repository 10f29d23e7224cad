use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SpbError};

/// Ordinary least squares `(X'X)^{-1} X'Z`, computed through a thin QR.
pub fn ols_beta(x: &DMatrix<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
    let (n, p) = x.shape();
    if z.len() != n {
        return Err(SpbError::LengthMismatch { left: z.len(), right: n });
    }
    if n < p || p == 0 {
        return Err(SpbError::Singular { context: format!("design is {n}x{p}") });
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let rmax = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if r.diagonal().iter().any(|v| !(v.abs() > 1e-10 * rmax)) {
        return Err(SpbError::Singular { context: "design matrix is rank deficient".into() });
    }
    let qtz = qr.q().transpose() * z;
    r.solve_upper_triangular(&qtz)
        .ok_or_else(|| SpbError::Singular { context: "design matrix is rank deficient".into() })
}

/// `Z - X beta`.
pub fn residuals(x: &DMatrix<f64>, z: &DVector<f64>, beta: &DVector<f64>) -> DVector<f64> {
    z - x * beta
}

/// Sample variance with denominator `n - 1` (0 for `n < 2`).
pub fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / n as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64
}
