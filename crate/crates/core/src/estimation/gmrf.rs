//! Gaussian algebra for `Z - X beta = S eta + eps`, `eta ~ Gau(0, Q^{-1})`,
//! `eps ~ Gau(0, sigma_eps^2 V)`, with sparse `S` and `Q`.
//!
//! With `W = V^{-1} / sigma_eps^2` and `Q_post = Q + S'WS`:
//! `log|Sigma| = log|Q_post| - log|Q| - log|W|` and
//! `r' Sigma^{-1} r = r'Wr - b' Q_post^{-1} b`, `b = S'Wr`.

use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::linalg::{CsrMatrix, SparseCholesky, SymbolicCholesky};

pub struct GmrfProblem {
    s: CsrMatrix,
    /// `1 / V_i`.
    vinv: Vec<f64>,
    /// `S' V^{-1} S`.
    stvs: CsrMatrix,
    /// `S' V^{-1} r`.
    stvr: Vec<f64>,
    /// `r' V^{-1} r`.
    rvr: f64,
    sum_log_v: f64,
    symbolic: SymbolicCholesky,
}

pub struct GmrfEval {
    pub loglik: f64,
    /// Factor of `Q_post`.
    pub post: SparseCholesky,
    /// Posterior mean of `eta`.
    pub mu: Vec<f64>,
}

impl GmrfProblem {
    /// `q_pattern` must share its sparsity pattern with every precision later
    /// passed to [`GmrfProblem::evaluate`].
    pub fn new(s: CsrMatrix, resid: &[f64], v: Option<&[f64]>, q_pattern: &CsrMatrix) -> Result<Self> {
        let n = s.nrows();
        if resid.len() != n || q_pattern.nrows() != s.ncols() {
            return invalid("GMRF problem dimensions disagree");
        }
        let vinv: Vec<f64> = match v {
            Some(v) => v.iter().map(|x| 1.0 / x).collect(),
            None => vec![1.0; n],
        };
        let mut sv = s.clone();
        sv.scale_rows(&vinv);
        let st = s.transpose();
        let stvs = st.matmul(&sv);
        let stvr = sv.transpose_matvec(resid);
        let rvr = resid.iter().zip(&vinv).map(|(r, w)| r * r * w).sum();
        let sum_log_v = vinv.iter().map(|w| -w.ln()).sum();
        let symbolic = SymbolicCholesky::analyze(&q_pattern.add_scaled(1.0, &stvs, 1.0))?;
        Ok(Self { s, vinv, stvs, stvr, rvr, sum_log_v, symbolic })
    }

    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    pub fn basis(&self) -> &CsrMatrix {
        &self.s
    }

    pub fn noise_weights(&self) -> &[f64] {
        &self.vinv
    }

    /// Gaussian log-likelihood of the residuals and the posterior of `eta`,
    /// given the prior precision `q` and its log-determinant.
    pub fn evaluate(&self, q: &CsrMatrix, q_logdet: f64, sigma_eps_sq: f64) -> Result<GmrfEval> {
        if !(sigma_eps_sq > 0.0) {
            return invalid("noise variance must be positive");
        }
        let n = self.n() as f64;
        let q_post = q.add_scaled(1.0, &self.stvs, 1.0 / sigma_eps_sq);
        let post = self.symbolic.factor(&q_post)?;
        let b: Vec<f64> = self.stvr.iter().map(|x| x / sigma_eps_sq).collect();
        let mu = post.solve(&b);
        let quad = self.rvr / sigma_eps_sq - b.iter().zip(&mu).map(|(a, c)| a * c).sum::<f64>();
        let logdet = post.logdet() - q_logdet + n * sigma_eps_sq.ln() + self.sum_log_v;
        let loglik = -0.5 * (n * (2.0 * PI).ln() + logdet + quad);
        Ok(GmrfEval { loglik, post, mu })
    }
}
