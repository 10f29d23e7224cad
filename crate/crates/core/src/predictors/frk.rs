use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use super::{index_by_location, Engine};
use crate::data::{Location, SpatialDataset, TrendSpec};
use crate::error::Result;
use crate::estimation::{residuals, FrkParams};
use crate::kernels::{build_basis_matrix, Basis, BisquareBasis};
use crate::linalg::{LowRankPlusDiag, SmwFactor};
use crate::par;

/// Kriging under `Sigma = S K S' + diag(sigma_xi^2 + sigma_eps^2 V)`, applied
/// through the Sherman-Morrison-Woodbury factor; nothing `n x n` is formed.
pub(super) struct FrkEngine {
    trend: TrendSpec,
    basis: BisquareBasis,
    beta: DVector<f64>,
    k: DMatrix<f64>,
    sigma_xi_sq: f64,
    index: HashMap<(i64, i64), usize>,
    smw: SmwFactor,
    /// `Sigma^{-1} (Z - X beta)`.
    alpha: DVector<f64>,
    /// `K S' alpha`.
    g: DVector<f64>,
    /// `Sigma^{-1} S`, `n x r`.
    p: DMatrix<f64>,
    /// `K S' Sigma^{-1} S K`.
    a: DMatrix<f64>,
}

impl FrkEngine {
    pub fn new(
        train: &SpatialDataset,
        trend: TrendSpec,
        params: &FrkParams,
        basis: &BisquareBasis,
        sigma_eps_sq: f64,
    ) -> Result<Self> {
        let locs = train.locations();
        let beta = DVector::from_vec(params.beta.clone());
        let resid = residuals(&trend.design(&locs), &train.values(), &beta);
        let s = build_basis_matrix(basis, &locs)?;
        let d = DVector::from_fn(locs.len(), |i, _| params.sigma_xi_sq + sigma_eps_sq * train.weight(i));
        let smw = LowRankPlusDiag::new(s.clone(), params.k.clone(), d)?.factor()?;
        let alpha = smw.solve(&resid);
        let g = &params.k * s.tr_mul(&alpha);
        let cols = par::map_range(s.ncols(), |j| smw.solve(&s.column(j).into_owned()));
        let p = DMatrix::from_columns(&cols);
        let a = &params.k * s.tr_mul(&p) * &params.k;
        Ok(Self {
            trend,
            basis: basis.clone(),
            beta,
            k: params.k.clone(),
            sigma_xi_sq: params.sigma_xi_sq,
            index: index_by_location(&locs),
            smw,
            alpha,
            g,
            p,
            a,
        })
    }

    fn predict_one(&self, u: &Location, with_variance: bool) -> Result<(f64, Option<f64>)> {
        let su = self.basis.eval(u)?;
        let hit = self.index.get(&u.key()).copied();
        let s2 = self.sigma_xi_sq;
        let mut mean = self.trend.mean(u, &self.beta) + su.dot(&self.g);
        if let Some(i) = hit {
            mean += s2 * self.alpha[i];
        }
        if !with_variance {
            return Ok((mean, None));
        }
        let ksu = &self.k * &su;
        let prior = su.dot(&ksu) + s2;
        let mut reduction = su.dot(&(&self.a * &su));
        if let Some(i) = hit {
            reduction += 2.0 * s2 * self.p.row(i).transpose().dot(&ksu) + s2 * s2 * self.smw.inverse_diag(i);
        }
        Ok((mean, Some((prior - reduction).max(0.0))))
    }
}

impl Engine for FrkEngine {
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
