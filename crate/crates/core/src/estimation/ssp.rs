//! Smoothing-parameter selection for the thin-plate smoother
//! `x(u)'beta + W(u)'(W + theta I)^{-1}(Z - X beta)` with GLS `beta`.
//!
//! With `A = W + theta I` and `P = A^{-1} - A^{-1}X(X'A^{-1}X)^{-1}X'A^{-1}`,
//! the leave-one-out residual at `s_i` is `(PZ)_i / P_ii`. One symmetric
//! eigendecomposition of `W` makes each trial `theta` cost `O(n^2)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::tsk::check_dense_size;
use crate::data::{Location, SpatialDataset, TrendSpec};
use crate::error::{invalid, Result, SpbError};
use crate::kernels::tps_kernel;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SspParam {
    pub theta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SspFit {
    pub theta: f64,
    pub grid: Vec<f64>,
    /// LOOCV score per grid value; `None` where `W + theta I` is singular.
    pub scores: Vec<Option<f64>>,
}

pub fn tps_matrix(locs: &[Location]) -> DMatrix<f64> {
    let n = locs.len();
    let mut w = DMatrix::zeros(n, n);
    par::for_each_chunk_mut(w.as_mut_slice(), n.max(1), |j, col| {
        for (i, v) in col.iter_mut().enumerate() {
            *v = tps_kernel(&locs[i], &locs[j]);
        }
    });
    w
}

/// `mean |W_ij| x 10^k` for 49 values of `k` evenly spaced in `[-8, 4]`.
pub fn default_ssp_grid(w: &DMatrix<f64>) -> Vec<f64> {
    let n = w.nrows();
    let scale = if n > 1 { w.iter().map(|x| x.abs()).sum::<f64>() / (n * (n - 1)) as f64 } else { 1.0 };
    let scale = if scale > 0.0 { scale } else { 1.0 };
    (0..49).map(|i| scale * 10f64.powf(-8.0 + 12.0 * i as f64 / 48.0)).collect()
}

pub struct LoocvSystem {
    u: DMatrix<f64>,
    lambda: DVector<f64>,
    utx: DMatrix<f64>,
    utz: DVector<f64>,
    usq: DMatrix<f64>,
    lambda_scale: f64,
}

impl LoocvSystem {
    pub fn new(w: &DMatrix<f64>, x: &DMatrix<f64>, z: &DVector<f64>) -> Self {
        let e = SymmetricEigen::new(w.clone());
        let u = e.eigenvectors;
        let utx = u.tr_mul(x);
        let utz = u.tr_mul(z);
        let usq = u.map(|v| v * v);
        let lambda_scale = e.eigenvalues.amax().max(f64::MIN_POSITIVE);
        Self { u, lambda: e.eigenvalues, utx, utz, usq, lambda_scale }
    }

    /// Mean squared leave-one-out residual, `None` when `A` or `X'A^{-1}X`
    /// is numerically singular.
    pub fn score(&self, theta: f64) -> Option<f64> {
        let wk: Vec<f64> = self.lambda.iter().map(|l| l + theta).collect();
        if wk.iter().any(|v| v.abs() <= 1e-12 * self.lambda_scale.max(theta.abs())) {
            return None;
        }
        let inv = DVector::from_iterator(wk.len(), wk.iter().map(|v| 1.0 / v));
        let mut scaled_x = self.utx.clone();
        for (k, mut row) in scaled_x.row_iter_mut().enumerate() {
            row *= inv[k];
        }
        let ainv_x = &self.u * &scaled_x;
        let ainv_z = &self.u * self.utz.component_mul(&inv);
        let diag_ainv = &self.usq * &inv;
        let g = self.utx.tr_mul(&scaled_x);
        let g = (&g + g.transpose()) * 0.5;
        let gf = g.lu();
        let beta = gf.solve(&scaled_x.tr_mul(&self.utz))?;
        let pz = &ainv_z - &ainv_x * &beta;
        let ginv_xt = gf.solve(&ainv_x.transpose())?;
        let n = pz.len();
        let mut total = 0.0;
        for i in 0..n {
            let pii = diag_ainv[i] - ainv_x.row(i).dot(&ginv_xt.column(i).transpose());
            if !(pii.abs() > 1e-300) {
                return None;
            }
            total += (pz[i] / pii).powi(2);
        }
        let s = total / n as f64;
        s.is_finite().then_some(s)
    }
}

/// Picks `theta` minimising leave-one-out error over `grid`
/// (default [`default_ssp_grid`]).
pub fn loocv_select_ssp(data: &SpatialDataset, trend: TrendSpec, grid: Option<&[f64]>) -> Result<SspFit> {
    check_dense_size("SSP", data.len())?;
    if data.len() < trend.p() + 2 {
        return invalid(format!("SSP needs more than {} points", trend.p() + 1));
    }
    let locs = data.locations();
    let w = tps_matrix(&locs);
    let grid: Vec<f64> = match grid {
        Some(g) if !g.is_empty() => g.to_vec(),
        Some(_) => return invalid("empty SSP grid"),
        None => default_ssp_grid(&w),
    };
    if grid.iter().any(|t| !(*t > 0.0)) {
        return invalid("SSP grid values must be positive");
    }
    let z = data.values();
    let largest = grid.iter().copied().fold(f64::MIN, f64::max);
    if grid.len() == 1 {
        return Ok(SspFit { theta: grid[0], scores: vec![None], grid });
    }
    let (lo, hi) = z.iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
    if hi - lo <= 1e-12 * hi.abs().max(lo.abs()).max(1.0) {
        return Ok(SspFit { theta: largest, scores: vec![Some(0.0); grid.len()], grid });
    }
    let sys = LoocvSystem::new(&w, &trend.design(&locs), &z);
    let scores: Vec<Option<f64>> = par::map_slice(&grid, |&t| sys.score(t));
    let best = scores
        .iter()
        .zip(&grid)
        .filter_map(|(s, t)| s.map(|s| (s, *t)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .ok_or_else(|| SpbError::Singular { context: "W + theta I singular at every grid value".into() })?;
    Ok(SspFit { theta: best.1, grid, scores })
}

/// GLS trend and smoother weights `(beta, A^{-1}(Z - X beta))` at `theta`.
pub fn ssp_coefficients(
    w: &DMatrix<f64>,
    x: &DMatrix<f64>,
    z: &DVector<f64>,
    theta: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = w.nrows();
    let mut a = w.clone();
    for i in 0..n {
        a[(i, i)] += theta;
    }
    let lu = a.lu();
    let singular = || SpbError::Singular { context: format!("W + theta I at theta = {theta}") };
    let ainv_x = lu.solve(x).ok_or_else(singular)?;
    let ainv_z = lu.solve(z).ok_or_else(singular)?;
    let g = x.tr_mul(&ainv_x);
    let beta = g.lu().solve(&x.tr_mul(&ainv_z)).ok_or_else(singular)?;
    let c = ainv_z - ainv_x * &beta;
    Ok((beta, c))
}
