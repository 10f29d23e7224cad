use nalgebra::{DMatrix, DVector};

use super::dense::{chol_factor, CholFactor};
use crate::error::{Result, SpbError};

/// `Sigma = S K S' + diag(d)` with `S` an `n x r` matrix, `K` an `r x r` SPD
/// matrix and `d` strictly positive.
#[derive(Clone, Debug)]
pub struct LowRankPlusDiag {
    pub s: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl LowRankPlusDiag {
    pub fn new(s: DMatrix<f64>, k: DMatrix<f64>, d: DVector<f64>) -> Result<Self> {
        if s.nrows() != d.len() {
            return Err(SpbError::LengthMismatch { left: s.nrows(), right: d.len() });
        }
        if k.nrows() != s.ncols() || k.ncols() != s.ncols() {
            return Err(SpbError::InvalidInput(format!(
                "K must be {r}x{r}, got {}x{}",
                k.nrows(),
                k.ncols(),
                r = s.ncols()
            )));
        }
        if d.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(SpbError::InvalidInput("diagonal entries must be positive".into()));
        }
        Ok(Self { s, k, d })
    }

    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    pub fn rank(&self) -> usize {
        self.s.ncols()
    }

    /// Dense `Sigma`; only for tests and small problems.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut sigma = &self.s * &self.k * self.s.transpose();
        for i in 0..self.n() {
            sigma[(i, i)] += self.d[i];
        }
        sigma
    }

    /// Precomputes the `r x r` factorizations. Cost `O(n r^2 + r^3)`.
    pub fn factor(&self) -> Result<SmwFactor> {
        let dinv = self.d.map(|x| 1.0 / x);
        let r = self.rank();
        if r == 0 {
            let logdet = self.d.iter().map(|x| x.ln()).sum();
            return Ok(SmwFactor { dinv, s: self.s.clone(), k_chol: None, m_chol: None, logdet });
        }
        // S' D^{-1} S
        let mut sd = self.s.clone();
        for (i, mut row) in sd.row_iter_mut().enumerate() {
            row *= dinv[i];
        }
        let t = self.s.transpose() * &sd;
        let k_chol = chol_factor(&self.k)?;
        let mut m = k_chol.inverse() + t;
        m = (&m + m.transpose()) * 0.5;
        let m_chol = chol_factor(&m).map_err(|_| SpbError::Singular {
            context: "inner r x r system K^{-1} + S' D^{-1} S".into(),
        })?;
        let logdet = self.d.iter().map(|x| x.ln()).sum::<f64>() + k_chol.logdet() + m_chol.logdet();
        Ok(SmwFactor {
            dinv,
            s: self.s.clone(),
            k_chol: Some(k_chol),
            m_chol: Some(m_chol),
            logdet,
        })
    }
}

/// Factored form of `Sigma^{-1} = D^{-1} - D^{-1} S (K^{-1} + S' D^{-1} S)^{-1} S' D^{-1}`.
#[derive(Clone, Debug)]
pub struct SmwFactor {
    dinv: DVector<f64>,
    s: DMatrix<f64>,
    k_chol: Option<CholFactor>,
    m_chol: Option<CholFactor>,
    logdet: f64,
}

impl SmwFactor {
    /// `Sigma^{-1} b` in `O(n r + r^2)`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let db = b.component_mul(&self.dinv);
        match &self.m_chol {
            None => db,
            Some(m) => {
                let inner = m.solve(&(self.s.transpose() * &db));
                let corr = (&self.s * inner).component_mul(&self.dinv);
                db - corr
            }
        }
    }

    /// `(K^{-1} + S' D^{-1} S)^{-1} S' D^{-1} b`, the posterior mean of the
    /// random effects when `b` holds detrended data.
    pub fn inner_solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.m_chol {
            None => DVector::zeros(0),
            Some(m) => m.solve(&(self.s.transpose() * b.component_mul(&self.dinv))),
        }
    }

    /// Factor of `M = K^{-1} + S' D^{-1} S`.
    pub fn inner(&self) -> Option<&CholFactor> {
        self.m_chol.as_ref()
    }

    pub fn k_factor(&self) -> Option<&CholFactor> {
        self.k_chol.as_ref()
    }

    /// `log |S K S' + D|` via the matrix determinant lemma.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn dinv(&self) -> &DVector<f64> {
        &self.dinv
    }

    /// Diagonal entry `(Sigma^{-1})_{ii}` in `O(r^2)`.
    pub fn inverse_diag(&self, i: usize) -> f64 {
        let di = self.dinv[i];
        match &self.m_chol {
            None => di,
            Some(m) => {
                let si = self.s.row(i).transpose();
                di - di * di * m.quad_form(&si)
            }
        }
    }
}

/// Returns `Sigma^{-1} b` for `Sigma = S K S' + D`.
pub fn smw_solve(m: &LowRankPlusDiag, b: &DVector<f64>) -> Result<DVector<f64>> {
    if b.len() != m.n() {
        return Err(SpbError::LengthMismatch { left: b.len(), right: m.n() });
    }
    Ok(m.factor()?.solve(b))
}

/// Returns `log |S K S' + D|` using only `r x r` factorizations.
pub fn smw_quadform_logdet(m: &LowRankPlusDiag) -> Result<f64> {
    Ok(m.factor()?.logdet())
}
