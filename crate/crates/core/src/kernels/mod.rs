//! Covariance functions and basis-function families.

mod basis;
mod bessel;
mod grid;

pub use basis::{
    bisquare, build_basis_matrix, build_basis_sparse, eval_basis, wendland, Basis, BisquareBasis,
    PiecewiseLinearBasis, PredictiveProcessBasis, WendlandBasis, BISQUARE_WIDTH_FACTOR, WENDLAND_OVERLAP,
};
pub use bessel::bessel_k;
pub use grid::RegularGrid;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::data::Location;
use crate::error::{invalid, Result};

/// `C(h) = sigma0^2 exp(-h / theta)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentialCov {
    pub sigma0_sq: f64,
    pub theta: f64,
}

impl ExponentialCov {
    pub fn new(sigma0_sq: f64, theta: f64) -> Result<Self> {
        if !(sigma0_sq > 0.0 && theta > 0.0) || !sigma0_sq.is_finite() || !theta.is_finite() {
            return invalid(format!("exponential covariance needs sigma0^2 > 0, theta > 0 (got {sigma0_sq}, {theta})"));
        }
        Ok(Self { sigma0_sq, theta })
    }

    /// Unchecked evaluation; `h` must be nonnegative.
    pub fn eval(&self, h: f64) -> f64 {
        self.sigma0_sq * (-h / self.theta).exp()
    }
}

pub fn exp_cov(c: &ExponentialCov, h: f64) -> Result<f64> {
    if !(h >= 0.0) {
        return invalid(format!("negative distance {h}"));
    }
    Ok(c.eval(h))
}

/// Matérn covariance with variance `sigma_nu_sq`, inverse range `kappa` and
/// smoothness `alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaternCov {
    pub sigma_nu_sq: f64,
    pub kappa: f64,
    pub alpha: f64,
}

impl MaternCov {
    pub fn new(sigma_nu_sq: f64, kappa: f64, alpha: f64) -> Result<Self> {
        if !(sigma_nu_sq > 0.0 && kappa > 0.0 && alpha > 0.0) {
            return invalid("Matérn parameters must be positive");
        }
        Ok(Self { sigma_nu_sq, kappa, alpha })
    }

    pub fn eval(&self, h: f64) -> f64 {
        if h == 0.0 {
            return self.sigma_nu_sq;
        }
        let x = self.kappa * h;
        let norm = gamma(self.alpha) * 2f64.powf(self.alpha - 1.0);
        self.sigma_nu_sq / norm * x.powf(self.alpha) * bessel_k(self.alpha, x)
    }
}

pub fn matern_cov(c: &MaternCov, h: f64) -> Result<f64> {
    if !(h >= 0.0) {
        return invalid(format!("negative distance {h}"));
    }
    Ok(c.eval(h))
}

/// Thin-plate radial kernel `d^2 log d`, 0 at `d = 0`.
pub fn tps_kernel(a: &Location, b: &Location) -> f64 {
    tps_radial(a.dist(b))
}

pub fn tps_radial(d: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        d * d * d.ln()
    }
}
