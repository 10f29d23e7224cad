//! Metropolis-within-Gibbs sampler for the modified predictive-process model
//! `Z = X beta + S(kappa) eta + xi + eps` with `eta ~ Gau(0, sigma_nu^2 R*(kappa))`,
//! `xi_i ~ Gau(0, sigma_nu^2 delta_i(kappa))` and `eps_i ~ Gau(0, sigma_eps^2)`.
//!
//! One sweep: `(beta, eta) | xi` jointly; `kappa` by random-walk Metropolis
//! on `log kappa` with `xi` integrated out; `xi | rest`; then the two
//! inverse-gamma variance updates.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::trend::{ols_beta, residuals, sample_variance};
use crate::data::{BBox, Location, SpatialDataset, TrendSpec};
use crate::error::{invalid, Result, SpbError};
use crate::kernels::PredictiveProcessBasis;
use crate::linalg::{chol_factor, CholFactor};

/// Below this, `delta_i` is treated as 0 and `xi_i` pinned to 0.
pub const DELTA_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MppPriors {
    /// `sigma_nu^2 ~ IG(a_eta, b_eta)`.
    pub a_eta: f64,
    pub b_eta: f64,
    /// `kappa ~ U(a_kappa, b_kappa)`.
    pub a_kappa: f64,
    pub b_kappa: f64,
    /// `sigma_eps^2 ~ IG(a_eps, b_eps)`.
    pub a_eps: f64,
    pub b_eps: f64,
}

impl MppPriors {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.a_eta, self.b_eta, self.a_kappa, self.b_kappa, self.a_eps, self.b_eps];
        if pos.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || self.a_kappa >= self.b_kappa {
            return invalid(format!("degenerate MPP priors {self:?}"));
        }
        Ok(())
    }

    /// Shape 2 for both variances; scales half the residual variance and
    /// half the noise guess; `kappa` uniform on `(3/d_max, 3/d_min)`.
    pub fn defaults(locs: &[Location], resid_var: f64, sigma_eps_guess: f64) -> Result<Self> {
        let (dmin, dmax) = min_max_distance(locs)?;
        Ok(Self {
            a_eta: 2.0,
            b_eta: resid_var.max(1e-12) / 2.0,
            a_kappa: 3.0 / dmax,
            b_kappa: 3.0 / dmin,
            a_eps: 2.0,
            b_eps: sigma_eps_guess.max(1e-12) / 2.0,
        })
    }
}

fn min_max_distance(locs: &[Location]) -> Result<(f64, f64)> {
    if locs.len() < 2 {
        return invalid("need at least two locations for distance-based priors");
    }
    let mut dmin = f64::INFINITY;
    let mut dmax = 0.0f64;
    for i in 0..locs.len() {
        for j in i + 1..locs.len() {
            let d = locs[i].dist(&locs[j]);
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
    }
    Ok((dmin, dmax))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MppMode {
    Full,
    /// Likelihood switched off and `beta` held at its start value.
    PriorOnly,
    /// Only `(beta, eta)` and `xi` are sampled.
    FixedHyper { kappa: f64, sigma_nu_sq: f64, sigma_eps_sq: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MppOptions {
    pub samples: usize,
    pub burn_in: usize,
    pub knots_per_side: usize,
    pub initial_log_step: f64,
    pub mode: MppMode,
    pub priors: Option<MppPriors>,
}

impl Default for MppOptions {
    fn default() -> Self {
        Self {
            samples: 2000,
            burn_in: 500,
            knots_per_side: 8,
            initial_log_step: 0.3,
            mode: MppMode::Full,
            priors: None,
        }
    }
}

/// Post-burn-in draws, one entry per iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MppChain {
    pub beta: Vec<Vec<f64>>,
    pub eta: Vec<Vec<f64>>,
    pub kappa: Vec<f64>,
    pub sigma_nu_sq: Vec<f64>,
    pub sigma_eps_sq: Vec<f64>,
}

impl MppChain {
    pub fn len(&self) -> usize {
        self.kappa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappa.is_empty()
    }
}

/// Posterior means of the hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MppParams {
    pub beta: Vec<f64>,
    pub kappa: f64,
    pub sigma_nu_sq: f64,
    pub sigma_eps_sq: f64,
    pub priors: MppPriors,
    pub knots: Vec<Location>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MppFit {
    pub params: MppParams,
    pub chain: MppChain,
    pub kappa_acceptance: f64,
    pub final_log_step: f64,
    pub rhat_kappa: f64,
    pub rhat_sigma_nu_sq: f64,
}

/// Everything that depends on `kappa` only.
struct KappaCache {
    kappa: f64,
    rstar: CholFactor,
    rstar_inv: DMatrix<f64>,
    logdet_r: f64,
    s: DMatrix<f64>,
    delta: Vec<f64>,
    sts: DMatrix<f64>,
    stx: DMatrix<f64>,
}

impl KappaCache {
    fn new(knots: &[Location], locs: &[Location], x: &DMatrix<f64>, kappa: f64, with_products: bool) -> Result<Self> {
        let pp = PredictiveProcessBasis::new(knots.to_vec(), kappa)?;
        let r = knots.len();
        let mut kt = DMatrix::zeros(r, locs.len());
        for (i, u) in locs.iter().enumerate() {
            kt.set_column(i, &pp.cross_correlation(u));
        }
        let st = pp.kstar().solve_mat(&kt);
        let delta = (0..locs.len()).map(|i| (1.0 - st.column(i).dot(&kt.column(i))).max(0.0)).collect();
        let s = st.transpose();
        let (sts, stx) = if with_products { (&st * &s, &st * x) } else { (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)) };
        let rstar = pp.kstar().clone();
        Ok(Self { kappa, rstar_inv: rstar.inverse(), logdet_r: rstar.logdet(), rstar, s, delta, sts, stx })
    }
}

fn inv_gamma(rng: &mut ChaCha8Rng, shape: f64, scale: f64) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / scale).map_err(|e| SpbError::InvalidInput(format!("gamma({shape}, {scale}): {e}")))?;
    Ok(1.0 / g.sample(rng))
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Split-half potential scale reduction of one scalar chain.
pub fn split_rhat(x: &[f64]) -> f64 {
    let half = x.len() / 2;
    if half < 2 {
        return f64::NAN;
    }
    let parts = [&x[..half], &x[half..2 * half]];
    let means: Vec<f64> = parts.iter().map(|p| p.iter().sum::<f64>() / half as f64).collect();
    let vars: Vec<f64> = parts.iter().map(|p| sample_variance(p)).collect();
    let w = (vars[0] + vars[1]) / 2.0;
    let grand = (means[0] + means[1]) / 2.0;
    let b = half as f64 * ((means[0] - grand).powi(2) + (means[1] - grand).powi(2));
    let nf = half as f64;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    (((nf - 1.0) / nf * w + b / nf) / w).sqrt()
}

/// Knots on a `k x k` grid over the data box.
pub fn default_knots(bbox: &BBox, per_side: usize) -> Vec<Location> {
    PredictiveProcessBasis::grid_knots(bbox, per_side)
}

pub fn mcmc_fit_mpp(
    data: &SpatialDataset,
    trend: TrendSpec,
    knots: &[Location],
    sigma_eps_guess: f64,
    opts: &MppOptions,
    seed: u64,
) -> Result<MppFit> {
    if opts.samples < 100 {
        return Err(SpbError::ChainTooShort { available: opts.samples, required: 100 });
    }
    if knots.is_empty() {
        return invalid("MPP needs at least one knot");
    }
    let locs = data.locations();
    let n = locs.len();
    let p = trend.p();
    let r = knots.len();
    let x = trend.design(&locs);
    let z = data.values();
    let beta_ols = ols_beta(&x, &z)?;
    let resid_var = sample_variance(residuals(&x, &z, &beta_ols).as_slice());
    let priors = match opts.priors {
        Some(pr) => pr,
        None => MppPriors::defaults(&locs, resid_var, sigma_eps_guess)?,
    };
    priors.validate()?;
    let likelihood = !matches!(opts.mode, MppMode::PriorOnly);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let diam = data.bbox()?.diameter().max(1e-6);
    let (mut kappa, mut snu, mut seps) = match opts.mode {
        MppMode::FixedHyper { kappa, sigma_nu_sq, sigma_eps_sq } => {
            if !(kappa > 0.0 && sigma_nu_sq > 0.0 && sigma_eps_sq > 0.0) {
                return invalid("fixed MPP hyperparameters must be positive");
            }
            (kappa, sigma_nu_sq, sigma_eps_sq)
        }
        _ => (
            (9.0 / diam).clamp(priors.a_kappa * 1.0001, priors.b_kappa * 0.9999),
            resid_var.max(1e-8),
            sigma_eps_guess.max(1e-8 * resid_var.max(1e-8)),
        ),
    };
    let mut cache = KappaCache::new(knots, &locs, &x, kappa, likelihood)?;
    let xtx = x.tr_mul(&x);
    let mut beta = beta_ols.clone();
    let mut eta: DVector<f64>;
    let mut xi = DVector::zeros(n);
    let mut log_step = opts.initial_log_step;
    let (mut acc_window, mut tries_window) = (0usize, 0usize);
    let (mut acc_total, mut tries_total) = (0usize, 0usize);
    let mut chain = MppChain { beta: vec![], eta: vec![], kappa: vec![], sigma_nu_sq: vec![], sigma_eps_sq: vec![] };
    let sample_hyper = !matches!(opts.mode, MppMode::FixedHyper { .. });

    // log target of kappa given everything but xi
    let kappa_target = |c: &KappaCache, beta: &DVector<f64>, eta: &DVector<f64>, snu: f64, seps: f64| -> f64 {
        let quad = c.rstar.quad_form(eta);
        let mut lt = -0.5 * (r as f64 * snu.ln() + c.logdet_r + quad / snu) + c.kappa.ln();
        if likelihood {
            let e = &z - &x * beta - &c.s * eta;
            for i in 0..n {
                let v = snu * c.delta[i] + seps;
                lt -= 0.5 * ((2.0 * PI * v).ln() + e[i] * e[i] / v);
            }
        }
        lt
    };

    let total = opts.burn_in + opts.samples;
    for it in 0..total {
        // (beta, eta) | xi
        if likelihood {
            let y = &z - &xi;
            let dim = p + r;
            let mut prec = DMatrix::zeros(dim, dim);
            prec.view_mut((0, 0), (p, p)).copy_from(&(&xtx / seps));
            prec.view_mut((p, 0), (r, p)).copy_from(&(&cache.stx / seps));
            prec.view_mut((0, p), (p, r)).copy_from(&(cache.stx.transpose() / seps));
            prec.view_mut((p, p), (r, r)).copy_from(&(&cache.rstar_inv / snu + &cache.sts / seps));
            let prec = (&prec + prec.transpose()) * 0.5;
            let mut rhs = DVector::zeros(dim);
            rhs.rows_mut(0, p).copy_from(&(x.tr_mul(&y) / seps));
            rhs.rows_mut(p, r).copy_from(&(cache.s.tr_mul(&y) / seps));
            let f = chol_factor(&prec)?;
            let draw = f.solve(&rhs) + f.solve_upper_transposed(&normals(&mut rng, dim));
            beta = draw.rows(0, p).into_owned();
            eta = draw.rows(p, r).into_owned();
        } else {
            eta = cache.rstar.mul_lower(&normals(&mut rng, r)) * snu.sqrt();
        }

        // kappa
        if sample_hyper {
            let prop = (kappa.ln() + log_step * rng.sample::<f64, _>(StandardNormal)).exp();
            tries_window += 1;
            if prop > priors.a_kappa && prop < priors.b_kappa {
                if let Ok(pc) = KappaCache::new(knots, &locs, &x, prop, likelihood) {
                    let log_ratio = kappa_target(&pc, &beta, &eta, snu, seps) - kappa_target(&cache, &beta, &eta, snu, seps);
                    if log_ratio.is_finite() && rng.random::<f64>().ln() < log_ratio {
                        cache = pc;
                        kappa = prop;
                        acc_window += 1;
                    }
                }
            }
        }

        // xi | rest
        let e = if likelihood { &z - &x * &beta - &cache.s * &eta } else { DVector::zeros(n) };
        for i in 0..n {
            let d = cache.delta[i];
            xi[i] = if d < DELTA_EPS {
                0.0
            } else {
                let prior_v = snu * d;
                let (m, v) = if likelihood {
                    let v = 1.0 / (1.0 / prior_v + 1.0 / seps);
                    (v * e[i] / seps, v)
                } else {
                    (0.0, prior_v)
                };
                m + v.sqrt() * rng.sample::<f64, _>(StandardNormal)
            };
        }

        if sample_hyper {
            let mut n_eff = 0usize;
            let mut ss = cache.rstar.quad_form(&eta);
            for i in 0..n {
                if cache.delta[i] >= DELTA_EPS {
                    n_eff += 1;
                    ss += xi[i] * xi[i] / cache.delta[i];
                }
            }
            snu = inv_gamma(&mut rng, priors.a_eta + (r + n_eff) as f64 / 2.0, priors.b_eta + ss / 2.0)?;
            seps = if likelihood {
                let res = &z - &x * &beta - &cache.s * &eta - &xi;
                inv_gamma(&mut rng, priors.a_eps + n as f64 / 2.0, priors.b_eps + res.norm_squared() / 2.0)?
            } else {
                inv_gamma(&mut rng, priors.a_eps, priors.b_eps)?
            };
        }

        if it < opts.burn_in {
            if sample_hyper && tries_window == 50 {
                let rate = acc_window as f64 / tries_window as f64;
                if rate > 0.44 {
                    log_step *= 1.25;
                } else if rate < 0.23 {
                    log_step /= 1.25;
                }
                acc_window = 0;
                tries_window = 0;
            }
            if it + 1 == opts.burn_in {
                acc_window = 0;
                tries_window = 0;
            }
        } else {
            acc_total += acc_window;
            tries_total += tries_window;
            acc_window = 0;
            tries_window = 0;
            chain.beta.push(beta.iter().copied().collect());
            chain.eta.push(eta.iter().copied().collect());
            chain.kappa.push(kappa);
            chain.sigma_nu_sq.push(snu);
            chain.sigma_eps_sq.push(seps);
        }
    }

    let l = chain.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / l;
    let beta_mean = (0..p).map(|j| chain.beta.iter().map(|b| b[j]).sum::<f64>() / l).collect();
    let params = MppParams {
        beta: beta_mean,
        kappa: mean(&chain.kappa),
        sigma_nu_sq: mean(&chain.sigma_nu_sq),
        sigma_eps_sq: mean(&chain.sigma_eps_sq),
        priors,
        knots: knots.to_vec(),
    };
    let kappa_acceptance = if tries_total > 0 { acc_total as f64 / tries_total as f64 } else { 0.0 };
    Ok(MppFit {
        rhat_kappa: split_rhat(&chain.kappa),
        rhat_sigma_nu_sq: split_rhat(&chain.sigma_nu_sq),
        params,
        chain,
        kappa_acceptance,
        final_log_step: log_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{simulate, SimulationConfig};

    fn sim(n: usize, seed: u64) -> SpatialDataset {
        simulate(&SimulationConfig {
            domain: BBox { lon_min: 0.0, lon_max: 10.0, lat_min: 0.0, lat_max: 10.0 },
            n_points: n,
            beta: vec![10.0, 0.2],
            trend: TrendSpec::Latitude,
            sigma0_sq: 4.0,
            theta: 3.0,
            sigma_xi_sq: 0.0,
            sigma_eps_sq: 0.5,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn chain_is_deterministic() {
        let d = sim(40, 1);
        let knots = default_knots(&d.bbox().unwrap(), 3);
        let opts = MppOptions { samples: 100, burn_in: 50, ..Default::default() };
        let a = mcmc_fit_mpp(&d, TrendSpec::Latitude, &knots, 0.5, &opts, 4).unwrap();
        let b = mcmc_fit_mpp(&d, TrendSpec::Latitude, &knots, 0.5, &opts, 4).unwrap();
        assert_eq!(a.chain, b.chain);
        assert!(a.kappa_acceptance > 0.0 && a.kappa_acceptance < 1.0);
    }

    #[test]
    fn short_chain_rejected() {
        let d = sim(20, 2);
        let knots = default_knots(&d.bbox().unwrap(), 2);
        let opts = MppOptions { samples: 99, ..Default::default() };
        assert!(matches!(
            mcmc_fit_mpp(&d, TrendSpec::Latitude, &knots, 0.5, &opts, 0),
            Err(SpbError::ChainTooShort { .. })
        ));
    }

    #[test]
    fn degenerate_priors_rejected() {
        let pr = MppPriors { a_eta: 2.0, b_eta: 1.0, a_kappa: 2.0, b_kappa: 1.0, a_eps: 2.0, b_eps: 1.0 };
        assert!(pr.validate().is_err());
    }

    #[test]
    fn rhat_of_stationary_noise_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..4000).map(|_| rng.sample(StandardNormal)).collect();
        assert!((split_rhat(&x) - 1.0).abs() < 0.01);
        let trend: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert!(split_rhat(&trend) > 1.5);
    }
}
