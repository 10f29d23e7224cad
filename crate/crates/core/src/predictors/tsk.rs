use std::collections::HashMap;

use nalgebra::DVector;

use super::{index_by_location, Engine};
use crate::data::{Location, SpatialDataset, TrendSpec};
use crate::error::Result;
use crate::estimation::{check_dense_size, distance_matrix, residuals, tsk_covariance, TskParams};
use crate::linalg::{chol_factor, CholFactor};
use crate::par;

/// Simple kriging with a plug-in OLS trend.
pub(super) struct TskEngine {
    trend: TrendSpec,
    params: TskParams,
    beta: DVector<f64>,
    locs: Vec<Location>,
    index: HashMap<(i64, i64), usize>,
    chol: CholFactor,
    /// `Sigma^{-1} (Z - X beta)`.
    alpha: DVector<f64>,
}

impl TskEngine {
    pub fn new(train: &SpatialDataset, trend: TrendSpec, params: &TskParams, sigma_eps_sq: f64) -> Result<Self> {
        check_dense_size("TSK", train.len())?;
        let locs = train.locations();
        let beta = DVector::from_vec(params.beta.clone());
        let r = residuals(&trend.design(&locs), &train.values(), &beta);
        let mut sigma = tsk_covariance(&distance_matrix(&locs), params.theta, params.sigma0_sq, params.sigma_xi_sq, 0.0);
        for i in 0..locs.len() {
            sigma[(i, i)] += sigma_eps_sq * train.weight(i);
        }
        let chol = chol_factor(&sigma)?;
        let alpha = chol.solve(&r);
        Ok(Self { trend, params: params.clone(), beta, index: index_by_location(&locs), locs, chol, alpha })
    }

    /// `cov(Z, Y(u))`: the exponential term plus the nugget at a coincident datum.
    fn cov_vector(&self, u: &Location) -> DVector<f64> {
        let p = &self.params;
        let mut c = DVector::from_iterator(
            self.locs.len(),
            self.locs.iter().map(|s| p.sigma0_sq * (-s.dist(u) / p.theta).exp()),
        );
        if let Some(&i) = self.index.get(&u.key()) {
            c[i] += p.sigma_xi_sq;
        }
        c
    }
}

impl Engine for TskEngine {
    fn predict(&self, locs: &[Location], with_variance: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let prior = self.params.sigma0_sq + self.params.sigma_xi_sq;
        let out = par::map_slice(locs, |u| {
            let c = self.cov_vector(u);
            let mean = self.trend.mean(u, &self.beta) + c.dot(&self.alpha);
            let var = with_variance.then(|| (prior - self.chol.quad_form(&c)).max(0.0));
            (mean, var)
        });
        let mean = out.iter().map(|o| o.0).collect();
        let var = with_variance.then(|| out.iter().map(|o| o.1.unwrap_or(0.0)).collect());
        Ok((mean, var))
    }
}
