//! SPDE model on a triangulated regular mesh: with lumped mass `C` and
//! stiffness `G`, `Q = (kappa^2 C + G) C^{-1} (kappa^2 C + G) / sigma_nu^2`,
//! whose field has a Matérn covariance with smoothness 1 and marginal
//! variance about `sigma_nu^2 / (4 pi kappa^2)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::gmrf::GmrfProblem;
use super::trend::{ols_beta, residuals, sample_variance};
use crate::data::{BBox, SpatialDataset, TrendSpec};
use crate::error::{invalid, Result, SpbError};
use crate::kernels::{build_basis_sparse, PiecewiseLinearBasis, RegularGrid};
use crate::linalg::{CsrMatrix, SymbolicCholesky};
use crate::optim::{nelder_mead, NelderMeadOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdParams {
    pub beta: Vec<f64>,
    pub kappa: f64,
    pub sigma_nu_sq: f64,
    pub sigma_eps_sq: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpdFit {
    pub params: SpdParams,
    pub loglik: f64,
    pub initial_loglik: f64,
    pub evals: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SpdOptions {
    /// Hold `sigma_eps^2` at this value instead of estimating it.
    pub sigma_eps_sq: Option<f64>,
    /// Initial correlation range as a fraction of the data diameter.
    pub range_init_fraction: f64,
    pub optimizer: NelderMeadOptions,
}

impl Default for SpdOptions {
    fn default() -> Self {
        Self {
            sigma_eps_sq: None,
            range_init_fraction: 0.2,
            optimizer: NelderMeadOptions { max_evals: 150, f_tol: 1e-9, x_tol: 1e-4, initial_step: 0.4 },
        }
    }
}

/// Mesh node count used for `n` training points.
pub fn spd_mesh_target(n: usize) -> usize {
    (2 * n).clamp(900, 10_000)
}

/// Square-cell mesh over `region` extended by 10% of its diameter per side.
pub fn spd_default_mesh(region: &BBox, n: usize) -> Result<PiecewiseLinearBasis> {
    let ext = region.expand(0.1 * region.diameter().max(1e-3));
    PiecewiseLinearBasis::new(RegularGrid::with_node_target(&ext, spd_mesh_target(n), 0)?)
}

/// Finite-element matrices of the mesh and the cached symbolic analysis.
pub struct SpdOperator {
    /// Lumped mass.
    c: Vec<f64>,
    g: CsrMatrix,
    gcg: CsrMatrix,
    sum_log_c: f64,
    m_symbolic: SymbolicCholesky,
}

impl SpdOperator {
    pub fn new(mesh: &PiecewiseLinearBasis) -> Result<Self> {
        let grid = mesh.grid();
        let r = grid.len();
        let mut c = vec![0.0; r];
        let mut trip = Vec::with_capacity(18 * r);
        for j in 0..grid.ny - 1 {
            for i in 0..grid.nx - 1 {
                let k00 = grid.index(i, j);
                let k10 = grid.index(i + 1, j);
                let k01 = grid.index(i, j + 1);
                let k11 = grid.index(i + 1, j + 1);
                let (dx, dy) = (grid.dx, grid.dy);
                let local = [[(0.0, 0.0), (dx, 0.0), (dx, dy)], [(0.0, 0.0), (dx, dy), (0.0, dy)]];
                for (tri, p) in [[k00, k10, k11], [k00, k11, k01]].into_iter().zip(local) {
                    let area = 0.5 * ((p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1)).abs();
                    // gradients of the barycentric coordinates times 2A
                    let b = [p[1].1 - p[2].1, p[2].1 - p[0].1, p[0].1 - p[1].1];
                    let cc = [p[2].0 - p[1].0, p[0].0 - p[2].0, p[1].0 - p[0].0];
                    for a in 0..3 {
                        c[tri[a]] += area / 3.0;
                        for bb in 0..3 {
                            trip.push((tri[a], tri[bb], (b[a] * b[bb] + cc[a] * cc[bb]) / (4.0 * area)));
                        }
                    }
                }
            }
        }
        let g = CsrMatrix::from_triplets(r, r, &trip).pruned();
        let cinv: Vec<f64> = c.iter().map(|x| 1.0 / x).collect();
        let mut cg = g.clone();
        cg.scale_rows(&cinv);
        let gcg = g.matmul(&cg);
        let sum_log_c = c.iter().map(|x| x.ln()).sum();
        let m_symbolic = SymbolicCholesky::analyze(&g.add_scaled(1.0, &CsrMatrix::from_diag(&c), 1.0))?;
        Ok(Self { c, g, gcg, sum_log_c, m_symbolic })
    }

    pub fn mass(&self) -> &[f64] {
        &self.c
    }

    pub fn stiffness(&self) -> &CsrMatrix {
        &self.g
    }

    /// `Q(kappa, sigma_nu^2)` and `log|Q|`.
    pub fn precision(&self, kappa: f64, sigma_nu_sq: f64) -> Result<(CsrMatrix, f64)> {
        if !(kappa > 0.0 && sigma_nu_sq > 0.0) {
            return invalid("SPD needs kappa > 0 and sigma_nu^2 > 0");
        }
        let k2 = kappa * kappa;
        let kc: Vec<f64> = self.c.iter().map(|x| k2 * x).collect();
        let m = self.g.add_scaled(1.0, &CsrMatrix::from_diag(&kc), 1.0);
        let logdet_m = self.m_symbolic.factor(&m)?.logdet();
        let k4c: Vec<f64> = self.c.iter().map(|x| k2 * k2 * x).collect();
        let inv = 1.0 / sigma_nu_sq;
        let q = self
            .gcg
            .add_scaled(inv, &self.g, 2.0 * k2 * inv)
            .add_scaled(1.0, &CsrMatrix::from_diag(&k4c), inv);
        let logdet = -(self.c.len() as f64) * sigma_nu_sq.ln() + 2.0 * logdet_m - self.sum_log_c;
        Ok((q, logdet))
    }
}

/// OLS trend, then maximum marginal likelihood for `(kappa, sigma_nu^2,
/// sigma_eps^2)`: a coarse grid followed by simplex refinement in log space.
pub fn eb_fit_spd(data: &SpatialDataset, trend: TrendSpec, mesh: &PiecewiseLinearBasis, opts: &SpdOptions) -> Result<SpdFit> {
    let locs = data.locations();
    let x = trend.design(&locs);
    let z = data.values();
    let beta = ols_beta(&x, &z)?;
    let r = residuals(&x, &z, &beta);
    let s = build_basis_sparse(mesh, &locs)?;
    let op = SpdOperator::new(mesh)?;
    let (q1, _) = op.precision(1.0, 1.0)?;
    let prob = GmrfProblem::new(s, r.as_slice(), data.het_weights(), &q1)?;
    let var = sample_variance(r.as_slice()).max(1e-12);
    let diam = data.bbox()?.diameter().max(1e-3);
    let h = mesh.grid().dx.max(mesh.grid().dy);
    let (kappa_lo, kappa_hi) = (8f64.sqrt() / (4.0 * diam), 8f64.sqrt() / (2.0 * h));
    let kappa0 = (8f64.sqrt() / (opts.range_init_fraction * diam)).clamp(kappa_lo, kappa_hi);

    let loglik = |kappa: f64, snu: f64, seps: f64| -> Result<f64> {
        let (q, ld) = op.precision(kappa, snu)?;
        Ok(prob.evaluate(&q, ld, seps)?.loglik)
    };
    let fixed_eps = opts.sigma_eps_sq;
    if let Some(e) = fixed_eps {
        if !(e > 0.0) {
            return invalid("fixed sigma_eps^2 must be positive");
        }
    }
    let start = |kappa: f64, noise_frac: f64| -> (f64, f64) {
        match fixed_eps {
            Some(e) => ((var - e).max(0.1 * var) * noise_frac * 4.0 * PI * kappa * kappa, e),
            None => ((1.0 - noise_frac) * var * 4.0 * PI * kappa * kappa, noise_frac * var),
        }
    };
    let (s0, e0) = start(kappa0, if fixed_eps.is_some() { 1.0 } else { 0.2 });
    let initial_loglik = loglik(kappa0, s0, e0)?;
    let mut best = (initial_loglik, kappa0, s0, e0);
    let mut evals = 1;
    let fracs: &[f64] = if fixed_eps.is_some() { &[0.3, 1.0, 3.0] } else { &[0.05, 0.2, 0.5] };
    for mult in [0.25, 0.5, 1.0, 2.0, 4.0] {
        let kappa = (kappa0 * mult).clamp(kappa_lo, kappa_hi);
        for &f in fracs {
            let (sn, se) = start(kappa, f);
            evals += 1;
            if let Ok(ll) = loglik(kappa, sn, se) {
                if ll > best.0 {
                    best = (ll, kappa, sn, se);
                }
            }
        }
    }
    let unpack = |p: &[f64]| -> (f64, f64, f64) {
        (p[0].exp(), p[1].exp(), fixed_eps.unwrap_or_else(|| p.get(2).copied().unwrap_or(0.0).exp()))
    };
    let objective = |p: &[f64]| {
        let (kappa, sn, se) = unpack(p);
        if kappa < kappa_lo || kappa > kappa_hi || se < 1e-8 * var {
            return f64::INFINITY;
        }
        loglik(kappa, sn, se).map_or(f64::INFINITY, |ll| -ll)
    };
    let mut x0 = vec![best.1.ln(), best.2.ln()];
    if fixed_eps.is_none() {
        x0.push(best.3.ln());
    }
    let res = nelder_mead(objective, &x0, &opts.optimizer);
    evals += res.evals;
    let (ll, kappa, sn, se) = if -res.value >= best.0 {
        let (k, s, e) = unpack(&res.x);
        (-res.value, k, s, e)
    } else {
        best
    };
    if !ll.is_finite() {
        return Err(SpbError::NotPositiveDefinite { context: "SPD likelihood".into() });
    }
    Ok(SpdFit {
        params: SpdParams { beta: beta.iter().copied().collect(), kappa, sigma_nu_sq: sn, sigma_eps_sq: se },
        loglik: ll,
        initial_loglik,
        evals,
        converged: res.converged,
    })
}
