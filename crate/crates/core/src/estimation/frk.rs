//! EM estimation of `(K, sigma_xi^2)` for `Sigma = S K S' + sigma_xi^2 I + sigma_eps^2 V`.
//!
//! Every step works with `r x r` matrices only. Writing `K = L L'`,
//! `D = sigma_xi^2 I + sigma_eps^2 V`, `T = S'D^{-1}S` and `B = I + L'TL`,
//! the posterior of `eta` has covariance `L B^{-1} L'` and mean
//! `L B^{-1} L' S'D^{-1} r`, and `log|Sigma| = log|D| + log|B|`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::trend::{ols_beta, residuals, sample_variance};
use crate::data::{SpatialDataset, TrendSpec};
use crate::error::{invalid, Result, SpbError};
use crate::kernels::{build_basis_matrix, Basis};
use crate::linalg::chol_factor_strict;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrkParams {
    pub beta: Vec<f64>,
    pub k: DMatrix<f64>,
    pub sigma_xi_sq: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EmOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { max_iter: 500, rel_tol: 1e-6 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrkFit {
    pub params: FrkParams,
    /// Log-likelihood at the start of every iteration, ending with the
    /// returned parameters.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// Sufficient statistics of the detrended data for a fixed basis matrix.
pub struct EmProblem {
    s: DMatrix<f64>,
    r: DVector<f64>,
    v: Option<Vec<f64>>,
    sigma_eps_sq: f64,
    /// `S'S`, `S'r`, `r'r` when `V = I`.
    homo: Option<(DMatrix<f64>, DVector<f64>, f64)>,
}

/// Quantities of one E-step.
#[derive(Clone, Debug)]
pub struct EmState {
    pub loglik: f64,
    /// `Cov(eta | Z)`.
    pub post_cov: DMatrix<f64>,
    /// `E(eta | Z)`.
    pub post_mean: DVector<f64>,
    /// `|| Sigma^{-1} r ||^2`.
    pub sinv_r_sq: f64,
    /// `tr Sigma^{-1}`.
    pub trace_sinv: f64,
}

impl EmProblem {
    pub fn new(s: DMatrix<f64>, r: DVector<f64>, v: Option<Vec<f64>>, sigma_eps_sq: f64) -> Result<Self> {
        if s.nrows() != r.len() || v.as_ref().is_some_and(|v| v.len() != r.len()) {
            return invalid("EM problem dimensions disagree");
        }
        if !(sigma_eps_sq >= 0.0) {
            return invalid("sigma_eps^2 must be >= 0");
        }
        let homo = v.is_none().then(|| (s.tr_mul(&s), s.tr_mul(&r), r.norm_squared()));
        Ok(Self { s, r, v, sigma_eps_sq, homo })
    }

    pub fn n(&self) -> usize {
        self.r.len()
    }

    pub fn rank(&self) -> usize {
        self.s.ncols()
    }

    fn d(&self, sigma_xi_sq: f64) -> DVector<f64> {
        match &self.v {
            Some(v) => DVector::from_iterator(v.len(), v.iter().map(|w| sigma_xi_sq + self.sigma_eps_sq * w)),
            None => DVector::from_element(self.n(), sigma_xi_sq + self.sigma_eps_sq),
        }
    }

    /// E-step at `(K, sigma_xi^2)`.
    pub fn e_step(&self, k: &DMatrix<f64>, sigma_xi_sq: f64) -> Result<EmState> {
        let n = self.n();
        let d = self.d(sigma_xi_sq);
        if d.iter().any(|x| !(*x > 0.0)) {
            return Err(SpbError::Singular { context: "diagonal variance is not positive".into() });
        }
        let dinv = d.map(|x| 1.0 / x);
        let (t, g, rdr, u) = match &self.homo {
            Some((sts, str_, rr)) => {
                let a = dinv[0];
                (sts * a, str_ * a, rr * a, sts * (a * a))
            }
            None => {
                let mut sd = self.s.clone();
                for (i, mut row) in sd.row_iter_mut().enumerate() {
                    row *= dinv[i];
                }
                let t = self.s.tr_mul(&sd);
                let g = sd.tr_mul(&self.r);
                let rdr = self.r.iter().zip(dinv.iter()).map(|(a, w)| a * a * w).sum();
                let mut sd2 = sd.clone();
                for (i, mut row) in sd2.row_iter_mut().enumerate() {
                    row *= dinv[i];
                }
                (t, g, rdr, self.s.tr_mul(&sd2))
            }
        };
        let l = psd_sqrt(k)?;
        let r = self.rank();
        let mut b = l.tr_mul(&(&t * &l));
        for i in 0..r {
            b[(i, i)] += 1.0;
        }
        let b = (&b + b.transpose()) * 0.5;
        let bf = chol_factor_strict(&b)?;
        let post_cov = {
            let c = &l * bf.solve_mat(&l.transpose());
            (&c + c.transpose()) * 0.5
        };
        let post_mean = &post_cov * &g;
        let logdet = d.iter().map(|x| x.ln()).sum::<f64>() + bf.logdet();
        let quad = rdr - g.dot(&post_mean);
        let loglik = -0.5 * (n as f64 * (2.0 * PI).ln() + logdet + quad);
        let trace_sinv = dinv.sum() - post_cov.component_mul(&u).sum();
        let sinv_r_sq = match &self.homo {
            Some((sts, str_, rr)) => {
                let a = dinv[0];
                (rr - 2.0 * post_mean.dot(str_) + post_mean.dot(&(sts * &post_mean))) * a * a
            }
            None => {
                let e = &self.r - &self.s * &post_mean;
                e.iter().zip(dinv.iter()).map(|(x, w)| (x * w).powi(2)).sum()
            }
        };
        Ok(EmState { loglik, post_cov, post_mean, sinv_r_sq, trace_sinv })
    }

    /// M-step: new `(K, sigma_xi^2)` from the E-step at the current values.
    pub fn m_step(&self, state: &EmState, sigma_xi_sq: f64) -> (DMatrix<f64>, f64) {
        let mm = &state.post_mean * state.post_mean.transpose();
        let k = &state.post_cov + mm;
        let k = (&k + k.transpose()) * 0.5;
        let n = self.n() as f64;
        let s2 = sigma_xi_sq + sigma_xi_sq * sigma_xi_sq / n * (state.sinv_r_sq - state.trace_sinv);
        (k, s2.max(0.0))
    }

    pub fn loglik(&self, k: &DMatrix<f64>, sigma_xi_sq: f64) -> Result<f64> {
        Ok(self.e_step(k, sigma_xi_sq)?.loglik)
    }

    /// Iterates EM from `(k0, s0)`.
    pub fn run(&self, k0: DMatrix<f64>, s0: f64, opts: &EmOptions) -> Result<(DMatrix<f64>, f64, Vec<f64>, bool, Vec<String>)> {
        let mut k = k0;
        let mut s2 = s0;
        let mut trace = Vec::new();
        let mut warnings = Vec::new();
        let floor = if self.sigma_eps_sq > 0.0 { 0.0 } else { 1e-12 * self.r.norm_squared() / self.n() as f64 + 1e-300 };
        let mut converged = false;
        for it in 0..=opts.max_iter {
            let state = self.e_step(&k, s2)?;
            if let Some(&prev) = trace.last() {
                let change: f64 = state.loglik - prev;
                if change < -1e-8 * f64::abs(prev) {
                    warnings.push(format!("log-likelihood decreased by {change:e} at iteration {it}"));
                }
                trace.push(state.loglik);
                if change.abs() < opts.rel_tol * f64::abs(prev) {
                    converged = true;
                    break;
                }
            } else {
                trace.push(state.loglik);
            }
            if it == opts.max_iter {
                break;
            }
            let (k_new, s_new) = self.m_step(&state, s2);
            if chol_factor_strict(&k_new).is_err() {
                warnings.push(format!("K lost positive definiteness at iteration {it}; projected"));
                k = project_psd(&k_new);
            } else {
                k = k_new;
            }
            s2 = s_new.max(floor);
        }
        Ok((k, s2, trace, converged, warnings))
    }
}

/// `L` with `L L' = K`; falls back to the eigen square root with negative
/// eigenvalues clipped when `K` is only semidefinite.
fn psd_sqrt(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if k.iter().any(|x| !x.is_finite()) {
        return Err(SpbError::NotPositiveDefinite { context: "K has non-finite entries".into() });
    }
    if let Ok(c) = chol_factor_strict(k) {
        return Ok(c.l());
    }
    let e = nalgebra::SymmetricEigen::new((k + k.transpose()) * 0.5);
    let sq = e.eigenvalues.map(|x| x.max(0.0).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&sq))
}

/// Nearest (Frobenius) positive semidefinite matrix, with a tiny ridge.
pub fn project_psd(k: &DMatrix<f64>) -> DMatrix<f64> {
    let e = nalgebra::SymmetricEigen::new((k + k.transpose()) * 0.5);
    let top = e.eigenvalues.iter().fold(0.0f64, |m, x| m.max(*x));
    let vals = e.eigenvalues.map(|x| x.max(1e-10 * top));
    let p = &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose();
    (&p + p.transpose()) * 0.5
}

/// Default starting point: the non-noise residual variance split 80/20
/// between the basis term and the fine-scale term.
pub fn em_initial(s: &DMatrix<f64>, r: &DVector<f64>, v_mean: f64, sigma_eps_sq: f64) -> (DMatrix<f64>, f64) {
    let var = sample_variance(r.as_slice()).max(1e-12);
    let avail = (var - sigma_eps_sq * v_mean).max(0.05 * var);
    let mean_s2 = s.row_iter().map(|row| row.norm_squared()).sum::<f64>() / s.nrows() as f64;
    let k0 = DMatrix::identity(s.ncols(), s.ncols()) * (0.8 * avail / mean_s2.max(1e-12));
    (k0, 0.2 * avail)
}

/// OLS trend, then EM for `(K, sigma_xi^2)` on the detrended data.
pub fn em_fit_frk(
    data: &SpatialDataset,
    trend: TrendSpec,
    basis: &dyn Basis,
    sigma_eps_sq: f64,
    opts: &EmOptions,
) -> Result<FrkFit> {
    let n = data.len();
    if basis.dim() >= n {
        return invalid(format!("FRK needs fewer basis functions ({}) than data ({n})", basis.dim()));
    }
    let locs = data.locations();
    let x = trend.design(&locs);
    let z = data.values();
    let beta = ols_beta(&x, &z)?;
    let r = residuals(&x, &z, &beta);
    let s = build_basis_matrix(basis, &locs)?;
    let v = data.het_weights().map(|w| w.to_vec());
    let v_mean = v.as_ref().map_or(1.0, |w| w.iter().sum::<f64>() / n as f64);
    let (k0, s0) = em_initial(&s, &r, v_mean, sigma_eps_sq);
    let prob = EmProblem::new(s, r, v, sigma_eps_sq)?;
    let (k, sigma_xi_sq, trace, converged, warnings) = prob.run(k0, s0, opts)?;
    for w in &warnings {
        log::warn!("FRK EM: {w}");
    }
    Ok(FrkFit {
        params: FrkParams { beta: beta.iter().copied().collect(), k, sigma_xi_sq },
        iterations: trace.len().saturating_sub(1),
        loglik_trace: trace,
        converged,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::chol_factor;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn random_problem(seed: u64, n: usize, r: usize, hetero: bool) -> EmProblem {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s = DMatrix::from_fn(n, r, |_, _| rng.random_range(0.0..1.0));
        let res = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0);
        let v = hetero.then(|| (0..n).map(|_| rng.random_range(0.5..2.0)).collect());
        EmProblem::new(s, res, v, 0.5).unwrap()
    }

    fn dense_loglik(p: &EmProblem, k: &DMatrix<f64>, s2: f64) -> f64 {
        let mut sigma = &p.s * k * p.s.transpose();
        let d = p.d(s2);
        for i in 0..p.n() {
            sigma[(i, i)] += d[i];
        }
        let c = chol_factor(&sigma).unwrap();
        -0.5 * (p.n() as f64 * (2.0 * PI).ln() + c.logdet() + c.quad_form(&p.r))
    }

    #[test]
    fn e_step_matches_dense() {
        for hetero in [false, true] {
            let p = random_problem(3, 25, 4, hetero);
            let k = DMatrix::from_fn(4, 4, |i, j| if i == j { 2.0 } else { 0.3 });
            let st = p.e_step(&k, 0.8).unwrap();
            let want = dense_loglik(&p, &k, 0.8);
            assert!((st.loglik - want).abs() < 1e-9 * want.abs());

            let mut sigma = &p.s * &k * p.s.transpose();
            let d = p.d(0.8);
            for i in 0..p.n() {
                sigma[(i, i)] += d[i];
            }
            let sinv = sigma.try_inverse().unwrap();
            assert!((st.trace_sinv - sinv.trace()).abs() < 1e-9);
            assert!((st.sinv_r_sq - (&sinv * &p.r).norm_squared()).abs() < 1e-9);
            let mean = &k * p.s.transpose() * &sinv * &p.r;
            assert!((st.post_mean - mean).amax() < 1e-9);
        }
    }

    /// One step on three points with a single basis function, worked out with
    /// scalar formulas: posterior of eta, then the closed-form updates.
    #[test]
    fn single_step_by_hand() {
        let s = DMatrix::from_column_slice(3, 1, &[1.0, 0.5, 0.0]);
        let r = DVector::from_vec(vec![2.0, 1.0, -1.0]);
        let p = EmProblem::new(s, r, None, 1.0).unwrap();
        let (k, s2) = (2.0, 1.0);
        // D = 2 I; M = 1/2 + (1 + 0.25)/2 = 1.125; S'D^-1 r = (2 + 0.5)/2 = 1.25
        let m: f64 = 1.125;
        let mu = 1.25 / m;
        let post_var = 1.0 / m;
        let k_new = post_var + mu * mu;
        // Sigma^{-1} r = D^{-1}(r - S mu)
        let e = [2.0 - mu, 1.0 - 0.5 * mu, -1.0];
        let sinv_r_sq: f64 = e.iter().map(|x| (x / 2.0).powi(2)).sum();
        let trace = 1.5 - post_var * (1.0 + 0.25) / 4.0;
        let s2_new = s2 + s2 * s2 / 3.0 * (sinv_r_sq - trace);
        let st = p.e_step(&DMatrix::from_element(1, 1, k), s2).unwrap();
        let (kn, sn) = p.m_step(&st, s2);
        assert!((kn[(0, 0)] - k_new).abs() < 1e-14);
        assert!((sn - s2_new).abs() < 1e-14);
    }

    #[test]
    fn em_is_monotone() {
        for seed in 0..5 {
            let p = random_problem(seed, 60, 5, seed % 2 == 1);
            let (k0, s0) = em_initial(&p.s, &p.r, 1.0, 0.5);
            let (_, _, trace, _, warnings) = p.run(k0, s0, &EmOptions { max_iter: 200, rel_tol: 1e-9 }).unwrap();
            assert!(warnings.is_empty(), "{warnings:?}");
            for w in trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-10 * w[0].abs(), "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn semidefinite_k_is_handled() {
        let p = random_problem(9, 20, 3, false);
        let mut k = DMatrix::zeros(3, 3);
        k[(0, 0)] = 1.0;
        let st = p.e_step(&k, 0.3).unwrap();
        assert!((st.loglik - dense_loglik(&p, &k, 0.3)).abs() < 1e-9 * st.loglik.abs());
        let proj = project_psd(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(chol_factor_strict(&proj).is_ok());
    }
}
