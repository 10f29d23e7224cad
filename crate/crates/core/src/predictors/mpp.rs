use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Engine;
use crate::data::{Location, SpatialDataset, TrendSpec};
use crate::error::{Result, SpbError};
use crate::estimation::{MppChain, MppFit};
use crate::kernels::PredictiveProcessBasis;
use crate::par;

const MIN_DRAWS: usize = 100;
const CHUNK: usize = 512;

/// Posterior predictive draws `Z(u)_l = x(u)'beta_l + S_l(u)'eta_l + xi_l(u) + eps_l(u)`
/// summarized by their sample mean and variance. Observed locations return
/// the datum itself.
pub(super) struct MppEngine {
    trend: TrendSpec,
    knots: Vec<Location>,
    chain: MppChain,
    /// Draw indices sharing a `kappa` value (the sampler repeats rejected values).
    groups: Vec<(f64, Vec<usize>)>,
    observed: HashMap<(i64, i64), f64>,
    seed: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-location stream, so a location's draws do not depend on the batch it is in.
fn location_rng(seed: u64, u: &Location) -> ChaCha8Rng {
    let (a, b) = u.key();
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ a as u64) ^ b as u64))
}

impl MppEngine {
    pub fn new(train: &SpatialDataset, trend: TrendSpec, fit: &MppFit, seed: u64) -> Result<Self> {
        let chain = fit.chain.clone();
        if chain.len() < MIN_DRAWS {
            return Err(SpbError::ChainTooShort { available: chain.len(), required: MIN_DRAWS });
        }
        let mut by_kappa: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (l, k) in chain.kappa.iter().enumerate() {
            by_kappa.entry(k.to_bits()).or_default().push(l);
        }
        let groups = by_kappa.into_iter().map(|(bits, idx)| (f64::from_bits(bits), idx)).collect();
        let observed = train.points().iter().map(|p| (p.loc.key(), p.value)).collect();
        Ok(Self { trend, knots: fit.params.knots.clone(), chain, groups, observed, seed })
    }

    /// Sample mean and variance of the predictive draws at each location.
    fn summarize(&self, locs: &[Location]) -> Result<(Vec<f64>, Vec<f64>)> {
        let l_total = self.chain.len();
        let mc = locs.len();
        let x = self.trend.design(locs);
        let betas = DMatrix::from_fn(self.trend.p(), l_total, |i, l| self.chain.beta[l][i]);
        // mc x L, column l holds draw l
        let mut draws = &x * betas;
        let mut z_xi = DMatrix::zeros(mc, l_total);
        let mut z_eps = DMatrix::zeros(mc, l_total);
        for (j, u) in locs.iter().enumerate() {
            let mut rng = location_rng(self.seed, u);
            for l in 0..l_total {
                z_xi[(j, l)] = rng.sample::<f64, _>(StandardNormal);
                z_eps[(j, l)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let r = self.knots.len();
        for (kappa, idx) in &self.groups {
            let pp = PredictiveProcessBasis::new(self.knots.clone(), *kappa)?;
            let mut kt = DMatrix::zeros(r, mc);
            for (j, u) in locs.iter().enumerate() {
                kt.set_column(j, &pp.cross_correlation(u));
            }
            let st = pp.kstar().solve_mat(&kt);
            let delta: Vec<f64> = (0..mc).map(|j| (1.0 - st.column(j).dot(&kt.column(j))).max(0.0)).collect();
            let eta = DMatrix::from_fn(idx.len(), r, |a, i| self.chain.eta[idx[a]][i]);
            let field = eta * &st;
            for (a, &l) in idx.iter().enumerate() {
                let sd_xi = self.chain.sigma_nu_sq[l].sqrt();
                for j in 0..mc {
                    draws[(j, l)] += field[(a, j)] + sd_xi * delta[j].sqrt() * z_xi[(j, l)];
                }
            }
        }
        for l in 0..l_total {
            let sd_eps = self.chain.sigma_eps_sq[l].sqrt();
            for j in 0..mc {
                draws[(j, l)] += sd_eps * z_eps[(j, l)];
            }
        }
        let mut mean = Vec::with_capacity(mc);
        let mut var = Vec::with_capacity(mc);
        for j in 0..mc {
            let row: DVector<f64> = draws.row(j).transpose();
            let m = row.mean();
            mean.push(m);
            var.push(row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (l_total - 1) as f64);
        }
        Ok((mean, var))
    }
}

impl Engine for MppEngine {
    fn predict(&self, locs: &[Location], with_variance: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let mut mean = vec![0.0; locs.len()];
        let mut var = vec![0.0; locs.len()];
        let mut pending = Vec::new();
        for (i, u) in locs.iter().enumerate() {
            match self.observed.get(&u.key()) {
                Some(&z) => mean[i] = z,
                None => pending.push(i),
            }
        }
        let chunks: Vec<&[usize]> = pending.chunks(CHUNK).collect();
        let results = par::map_slice(&chunks, |chunk| {
            let sub: Vec<Location> = chunk.iter().map(|&i| locs[i]).collect();
            self.summarize(&sub)
        });
        for (chunk, res) in chunks.iter().zip(results) {
            let (m, v) = res?;
            for (k, &i) in chunk.iter().enumerate() {
                mean[i] = m[k];
                var[i] = v[k];
            }
        }
        Ok((mean, with_variance.then_some(var)))
    }
}
