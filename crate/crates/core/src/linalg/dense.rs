use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, SpbError};

/// Relative jitter added to the diagonal after a failed factorization.
pub const JITTER_SCALE: f64 = 1e-8;

/// Lower-triangular Cholesky factor `L` with `L L' = A (+ jitter I)`.
#[derive(Clone, Debug)]
pub struct CholFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(SpbError::InvalidInput(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    for j in 0..a.ncols() {
        for i in (j + 1)..a.nrows() {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-10 * scale {
                return Err(SpbError::InvalidInput(format!(
                    "matrix not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(SpbError::InvalidInput("matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Factors a symmetric matrix. On failure, adds `1e-8 * mean(diag)` once and
/// retries; a second failure is reported as [`SpbError::NotPositiveDefinite`].
pub fn chol_factor(a: &DMatrix<f64>) -> Result<CholFactor> {
    check_symmetric(a)?;
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok(CholFactor { chol, jitter: 0.0 });
    }
    let n = a.nrows().max(1);
    let jitter = JITTER_SCALE * (a.diagonal().sum() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut b = a.clone();
    for i in 0..a.nrows() {
        b[(i, i)] += jitter;
    }
    match Cholesky::new(b) {
        Some(chol) => Ok(CholFactor { chol, jitter }),
        None => Err(SpbError::NotPositiveDefinite {
            context: format!("dense {}x{} after jitter {jitter:e}", a.nrows(), a.ncols()),
        }),
    }
}

/// Factors without the jitter retry.
pub fn chol_factor_strict(a: &DMatrix<f64>) -> Result<CholFactor> {
    check_symmetric(a)?;
    Cholesky::new(a.clone())
        .map(|chol| CholFactor { chol, jitter: 0.0 })
        .ok_or_else(|| SpbError::NotPositiveDefinite {
            context: format!("dense {}x{}", a.nrows(), a.ncols()),
        })
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Jitter that was added to the diagonal (0 when none was needed).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Solves `L x = b` only.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut x);
        x
    }

    /// `b' A^{-1} b`.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        self.solve_lower(b).norm_squared()
    }

    /// `log |A| = 2 sum log L_ii`.
    pub fn logdet(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `L z`, used to draw from `N(0, A)`.
    pub fn mul_lower(&self, z: &DVector<f64>) -> DVector<f64> {
        let l = self.chol.l_dirty();
        let n = l.nrows();
        let mut out = DVector::zeros(n);
        for j in 0..n {
            let zj = z[j];
            if zj == 0.0 {
                continue;
            }
            for i in j..n {
                out[i] += l[(i, j)] * zj;
            }
        }
        out
    }

    /// Solves `L' x = b`, used to draw from `N(0, A^{-1})`.
    pub fn solve_upper_transposed(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.chol.l_dirty().tr_solve_lower_triangular_mut(&mut x);
        x
    }
}
