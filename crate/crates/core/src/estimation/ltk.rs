//! Lattice kriging: Wendland basis on a regular grid with SAR precision
//! `Q = B'B / sigma_eta^2`, `B = (4 + kappa^2) I - (4-neighbour adjacency)`.

use serde::{Deserialize, Serialize};

use super::gmrf::GmrfProblem;
use super::trend::{ols_beta, residuals, sample_variance};
use crate::data::{SpatialDataset, TrendSpec};
use crate::error::{invalid, Result, SpbError};
use crate::kernels::{build_basis_sparse, RegularGrid, WendlandBasis};
use crate::linalg::{CsrMatrix, SparseCholesky, SymbolicCholesky};
use crate::optim::{nelder_mead, NelderMeadOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtkParams {
    pub beta: Vec<f64>,
    pub sigma_eta_sq: f64,
    pub kappa: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LtkFit {
    pub params: LtkParams,
    pub loglik: f64,
    pub initial_loglik: f64,
    pub evals: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LtkOptions {
    pub kappa_grid: Vec<f64>,
    /// Multipliers applied to the variance-matching `sigma_eta^2` for each `kappa`.
    pub sigma_multipliers: Vec<f64>,
    pub optimizer: NelderMeadOptions,
}

impl Default for LtkOptions {
    fn default() -> Self {
        Self {
            kappa_grid: (0..8).map(|i| 0.02 * 150f64.powf(i as f64 / 7.0)).collect(),
            sigma_multipliers: vec![0.1, 0.3, 1.0, 3.0, 10.0],
            optimizer: NelderMeadOptions { max_evals: 120, f_tol: 1e-9, x_tol: 1e-4, initial_step: 0.4 },
        }
    }
}

pub fn sar_matrix(grid: &RegularGrid, kappa: f64) -> CsrMatrix {
    let mut trip = Vec::with_capacity(5 * grid.len());
    for k in 0..grid.len() {
        trip.push((k, k, 4.0 + kappa * kappa));
        trip.extend(grid.neighbors4(k).map(|l| (k, l, -1.0)));
    }
    CsrMatrix::from_triplets(grid.len(), grid.len(), &trip)
}

/// Builds `Q(kappa, sigma_eta^2)` and its log-determinant, reusing the
/// symbolic analysis of `B` across calls.
pub struct SarPrecision {
    grid: RegularGrid,
    b_symbolic: SymbolicCholesky,
}

impl SarPrecision {
    pub fn new(grid: RegularGrid) -> Result<Self> {
        let b_symbolic = SymbolicCholesky::analyze(&sar_matrix(&grid, 1.0))?;
        Ok(Self { grid, b_symbolic })
    }

    pub fn grid(&self) -> &RegularGrid {
        &self.grid
    }

    pub fn precision(&self, kappa: f64, sigma_eta_sq: f64) -> Result<(CsrMatrix, f64)> {
        if !(kappa >= 0.0 && sigma_eta_sq > 0.0) {
            return invalid("LTK needs kappa >= 0 and sigma_eta^2 > 0");
        }
        let b = sar_matrix(&self.grid, kappa);
        let logdet_b = self.b_symbolic.factor(&b)?.logdet();
        let mut q = b.matmul(&b);
        q.scale(1.0 / sigma_eta_sq);
        let logdet = 2.0 * logdet_b - self.grid.len() as f64 * sigma_eta_sq.ln();
        Ok((q, logdet))
    }
}

/// OLS trend, then maximum likelihood for `(kappa, sigma_eta^2)` with
/// `sigma_eps^2` known: a log grid followed by simplex refinement.
pub fn ml_fit_ltk(
    data: &SpatialDataset,
    trend: TrendSpec,
    basis: &WendlandBasis,
    sigma_eps_sq: f64,
    opts: &LtkOptions,
) -> Result<LtkFit> {
    if !(sigma_eps_sq > 0.0) {
        return invalid("LTK needs sigma_eps^2 > 0");
    }
    if opts.kappa_grid.is_empty() || opts.sigma_multipliers.is_empty() {
        return invalid("LTK search grids must be nonempty");
    }
    let locs = data.locations();
    let x = trend.design(&locs);
    let z = data.values();
    let beta = ols_beta(&x, &z)?;
    let r = residuals(&x, &z, &beta);
    let s = build_basis_sparse(basis, &locs)?;
    let sar = SarPrecision::new(*basis.grid())?;
    let (q1, _) = sar.precision(1.0, 1.0)?;
    let prob = GmrfProblem::new(s, r.as_slice(), data.het_weights(), &q1)?;
    let var = sample_variance(r.as_slice()).max(1e-12);
    let signal = (var - sigma_eps_sq).max(0.1 * var);

    let loglik = |kappa: f64, s2: f64| -> Result<f64> {
        let (q, ld) = sar.precision(kappa, s2)?;
        Ok(prob.evaluate(&q, ld, sigma_eps_sq)?.loglik)
    };
    // sigma_eta^2 matching the average prior variance at the data to `signal`
    let base = |kappa: f64| -> Result<f64> {
        let (q, _) = sar.precision(kappa, 1.0)?;
        let f = SparseCholesky::new(&q)?;
        let s = prob.basis();
        let step = (s.nrows() / 25).max(1);
        let mut total = 0.0;
        let mut count = 0;
        for i in (0..s.nrows()).step_by(step) {
            let mut row = vec![0.0; s.ncols()];
            let (c, v) = s.row(i);
            c.iter().zip(v).for_each(|(&j, &a)| row[j] = a);
            total += f.quad_form(&row);
            count += 1;
        }
        Ok(signal / (total / count as f64).max(1e-300))
    };

    let kappa0 = opts.kappa_grid[opts.kappa_grid.len() / 2];
    let s0 = base(kappa0)?;
    let initial_loglik = loglik(kappa0, s0)?;
    let mut best = (initial_loglik, kappa0, s0);
    let mut evals = 1;
    for &kappa in &opts.kappa_grid {
        let b = base(kappa)?;
        for &m in &opts.sigma_multipliers {
            evals += 1;
            if let Ok(ll) = loglik(kappa, b * m) {
                if ll > best.0 {
                    best = (ll, kappa, b * m);
                }
            }
        }
    }
    let kmin = opts.kappa_grid.iter().copied().fold(f64::MAX, f64::min) * 0.1;
    let objective = |p: &[f64]| {
        let kappa = p[0].exp();
        if kappa < kmin || kappa > 100.0 {
            return f64::INFINITY;
        }
        loglik(kappa, p[1].exp()).map_or(f64::INFINITY, |ll| -ll)
    };
    let res = nelder_mead(objective, &[best.1.ln(), best.2.ln()], &opts.optimizer);
    evals += res.evals;
    let (ll, kappa, s2) = if -res.value >= best.0 { (-res.value, res.x[0].exp(), res.x[1].exp()) } else { best };
    if !ll.is_finite() {
        return Err(SpbError::NotPositiveDefinite { context: "LTK likelihood".into() });
    }
    Ok(LtkFit {
        params: LtkParams { beta: beta.iter().copied().collect(), sigma_eta_sq: s2, kappa },
        loglik: ll,
        initial_loglik,
        evals,
        converged: res.converged,
    })
}
