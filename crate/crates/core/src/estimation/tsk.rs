use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::trend::{ols_beta, residuals, sample_variance};
use crate::data::{Location, SpatialDataset, TrendSpec};
use crate::error::{invalid, Result, SpbError};
use crate::linalg::chol_factor;
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::par;

/// Largest training size the dense kriging predictors accept.
pub const DENSE_LIMIT: usize = 3000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TskParams {
    pub beta: Vec<f64>,
    pub theta: f64,
    pub sigma0_sq: f64,
    pub sigma_xi_sq: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TskFit {
    pub params: TskParams,
    pub loglik: f64,
    pub initial_loglik: f64,
    pub evals: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TskOptions {
    pub optimizer: NelderMeadOptions,
    /// Initial range as a fraction of the data diameter.
    pub theta_init_fraction: f64,
    /// Initial nugget as a fraction of the residual variance.
    pub nugget_init_fraction: f64,
}

impl Default for TskOptions {
    fn default() -> Self {
        Self {
            optimizer: NelderMeadOptions { max_evals: 300, f_tol: 1e-8, x_tol: 1e-4, initial_step: 0.7 },
            theta_init_fraction: 0.1,
            nugget_init_fraction: 0.1,
        }
    }
}

pub fn check_dense_size(method: &'static str, n: usize) -> Result<()> {
    if n > DENSE_LIMIT {
        return Err(SpbError::TooLarge { method: method.to_string(), n, limit: DENSE_LIMIT });
    }
    Ok(())
}

pub fn distance_matrix(locs: &[Location]) -> DMatrix<f64> {
    let n = locs.len();
    let mut d = DMatrix::zeros(n, n);
    // column-major: column j is contiguous
    par::for_each_chunk_mut(d.as_mut_slice(), n.max(1), |j, col| {
        for (i, v) in col.iter_mut().enumerate() {
            *v = locs[i].dist(&locs[j]);
        }
    });
    d
}

/// `sigma0^2 exp(-D/theta) + (sigma_xi^2 + sigma_eps^2) I`.
pub fn tsk_covariance(dist: &DMatrix<f64>, theta: f64, sigma0_sq: f64, sigma_xi_sq: f64, sigma_eps_sq: f64) -> DMatrix<f64> {
    let mut c = dist.map(|h| sigma0_sq * (-h / theta).exp());
    for i in 0..c.nrows() {
        c[(i, i)] += sigma_xi_sq + sigma_eps_sq;
    }
    c
}

/// Zero-mean Gaussian log-likelihood of `resid` under [`tsk_covariance`].
pub fn tsk_loglik(
    dist: &DMatrix<f64>,
    resid: &DVector<f64>,
    theta: f64,
    sigma0_sq: f64,
    sigma_xi_sq: f64,
    sigma_eps_sq: f64,
) -> Result<f64> {
    let c = chol_factor(&tsk_covariance(dist, theta, sigma0_sq, sigma_xi_sq, sigma_eps_sq))?;
    let n = resid.len() as f64;
    Ok(-0.5 * (n * (2.0 * PI).ln() + c.logdet() + c.quad_form(resid)))
}

/// OLS trend, then maximum likelihood for `(theta, sigma0^2, sigma_xi^2)` on
/// the detrended data with `sigma_eps^2` known.
pub fn ml_fit_tsk(data: &SpatialDataset, trend: TrendSpec, sigma_eps_sq: f64, opts: &TskOptions) -> Result<TskFit> {
    check_dense_size("TSK", data.len())?;
    if !(sigma_eps_sq >= 0.0) {
        return invalid("sigma_eps^2 must be >= 0");
    }
    let locs = data.locations();
    let x = trend.design(&locs);
    let z = data.values();
    let beta = ols_beta(&x, &z)?;
    let r = residuals(&x, &z, &beta);
    let dist = distance_matrix(&locs);
    let diam = data.bbox()?.diameter().max(1e-6);
    let var = sample_variance(r.as_slice()).max(1e-12);

    let x0 = [
        (opts.theta_init_fraction * diam).ln(),
        var.ln(),
        (opts.nugget_init_fraction * var).ln(),
    ];
    let (lo_theta, hi_theta) = ((1e-4 * diam).ln(), (1e3 * diam).ln());
    let objective = |p: &[f64]| {
        if p[0] < lo_theta || p[0] > hi_theta || p[1] > (1e6 * var).ln() || p[2] > (1e6 * var).ln() {
            return f64::INFINITY;
        }
        match tsk_loglik(&dist, &r, p[0].exp(), p[1].exp(), p[2].exp(), sigma_eps_sq) {
            Ok(ll) => -ll,
            Err(_) => f64::INFINITY,
        }
    };
    let res = nelder_mead(objective, &x0, &opts.optimizer);
    if !res.value.is_finite() {
        return Err(SpbError::NotPositiveDefinite { context: "TSK covariance at every trial point".into() });
    }
    if !res.converged {
        log::warn!("TSK likelihood search stopped after {} evaluations without converging", res.evals);
    }
    Ok(TskFit {
        params: TskParams {
            beta: beta.iter().copied().collect(),
            theta: res.x[0].exp(),
            sigma0_sq: res.x[1].exp(),
            sigma_xi_sq: res.x[2].exp(),
        },
        loglik: -res.value,
        initial_loglik: -res.initial_value,
        evals: res.evals,
        converged: res.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{simulate, BBox, SimulationConfig};

    fn sim(seed: u64, n: usize) -> SpatialDataset {
        simulate(&SimulationConfig {
            domain: BBox { lon_min: 0.0, lon_max: 20.0, lat_min: 0.0, lat_max: 20.0 },
            n_points: n,
            beta: vec![380.0, 0.1],
            trend: TrendSpec::Latitude,
            sigma0_sq: 9.0,
            theta: 5.0,
            sigma_xi_sq: 1.0,
            sigma_eps_sq: 1.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn likelihood_ascends_from_initial_point() {
        let d = sim(1, 150);
        let f = ml_fit_tsk(&d, TrendSpec::Latitude, 1.0, &TskOptions::default()).unwrap();
        assert!(f.loglik >= f.initial_loglik);
        assert!(f.params.theta > 0.5 && f.params.theta < 50.0, "{:?}", f.params);
    }

    #[test]
    fn guard_refuses_large_n() {
        assert!(matches!(check_dense_size("TSK", DENSE_LIMIT + 1), Err(SpbError::TooLarge { .. })));
        assert!(check_dense_size("TSK", DENSE_LIMIT).is_ok());
    }

    #[test]
    fn loglik_matches_closed_form_for_diagonal() {
        // far-apart points: covariance is (sigma0^2 + nugget + noise) I up to exp(-1000)
        let locs: Vec<Location> = (0..4).map(|i| Location { lon: i as f64 * 50.0, lat: 0.0 }).collect();
        let dist = distance_matrix(&locs);
        let r = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let s = 2.0 + 0.5 + 0.25;
        let want = -0.5 * (4.0 * (2.0 * PI).ln() + 4.0 * f64::ln(s) + r.norm_squared() / s);
        let got = tsk_loglik(&dist, &r, 0.05, 2.0, 0.5, 0.25).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}
