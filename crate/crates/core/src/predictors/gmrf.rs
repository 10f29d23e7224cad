use nalgebra::DVector;

use super::Engine;
use crate::data::{Location, SpatialDataset, TrendSpec};
use crate::error::Result;
use crate::estimation::{residuals, GmrfProblem, LtkParams, SarPrecision, SpdOperator, SpdParams};
use crate::kernels::{build_basis_sparse, Basis, PiecewiseLinearBasis, RegularGrid, WendlandBasis};
use crate::linalg::{CsrMatrix, SparseCholesky};
use crate::par;

/// Gaussian conditioning for `Y(u) = x(u)'beta + S(u)'eta` with a sparse prior
/// precision `Q` on `eta`; shared by SPD (SPDE mesh) and LTK (SAR lattice).
pub(super) struct GmrfEngine {
    trend: TrendSpec,
    basis: Box<dyn Basis>,
    beta: DVector<f64>,
    /// Factor of `Q + S' V^{-1} S / sigma_eps^2`.
    post: SparseCholesky,
    /// Posterior mean of `eta`.
    mu: Vec<f64>,
}

impl GmrfEngine {
    pub fn spd(train: &SpatialDataset, trend: TrendSpec, params: &SpdParams, mesh: &RegularGrid) -> Result<Self> {
        let mesh = PiecewiseLinearBasis::new(*mesh)?;
        let (q, logdet) = SpdOperator::new(&mesh)?.precision(params.kappa, params.sigma_nu_sq)?;
        Self::build(train, trend, &params.beta, Box::new(mesh), &q, logdet, params.sigma_eps_sq)
    }

    pub fn ltk(
        train: &SpatialDataset,
        trend: TrendSpec,
        params: &LtkParams,
        basis: &WendlandBasis,
        sigma_eps_sq: f64,
    ) -> Result<Self> {
        let (q, logdet) = SarPrecision::new(*basis.grid())?.precision(params.kappa, params.sigma_eta_sq)?;
        Self::build(train, trend, &params.beta, Box::new(basis.clone()), &q, logdet, sigma_eps_sq)
    }

    fn build(
        train: &SpatialDataset,
        trend: TrendSpec,
        beta: &[f64],
        basis: Box<dyn Basis>,
        q: &CsrMatrix,
        q_logdet: f64,
        sigma_eps_sq: f64,
    ) -> Result<Self> {
        let locs = train.locations();
        let beta = DVector::from_vec(beta.to_vec());
        let resid = residuals(&trend.design(&locs), &train.values(), &beta);
        let s = build_basis_sparse(basis.as_ref(), &locs)?;
        let prob = GmrfProblem::new(s, resid.as_slice(), train.het_weights(), q)?;
        let ev = prob.evaluate(q, q_logdet, sigma_eps_sq)?;
        Ok(Self { trend, basis, beta, post: ev.post, mu: ev.mu })
    }

    fn predict_one(&self, u: &Location, with_variance: bool) -> Result<(f64, Option<f64>)> {
        let row = self.basis.eval_sparse(u)?;
        let mean = self.trend.mean(u, &self.beta) + row.iter().map(|&(j, v)| v * self.mu[j]).sum::<f64>();
        let var = with_variance.then(|| {
            let mut dense = vec![0.0; self.basis.dim()];
            row.iter().for_each(|&(j, v)| dense[j] = v);
            self.post.quad_form(&dense)
        });
        Ok((mean, var))
    }
}

impl Engine for GmrfEngine {
    fn predict(&self, locs: &[Location], with_variance: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let out = par::map_slice(locs, |u| self.predict_one(u, with_variance));
        let mut mean = Vec::with_capacity(locs.len());
        let mut var = Vec::with_capacity(locs.len());
        for o in out {
            let (m, v) = o?;
            mean.push(m);
            var.push(v.unwrap_or(0.0));
        }
        Ok((mean, with_variance.then_some(var)))
    }
}
