use nalgebra::DVector;

use super::Engine;
use crate::data::{Location, SpatialDataset, TrendSpec};
use crate::error::Result;
use crate::estimation::{check_dense_size, ssp_coefficients, tps_matrix};
use crate::kernels::tps_kernel;
use crate::par;

pub(super) struct SspEngine {
    trend: TrendSpec,
    locs: Vec<Location>,
    beta: DVector<f64>,
    coef: DVector<f64>,
}

impl SspEngine {
    pub fn new(train: &SpatialDataset, trend: TrendSpec, theta: f64) -> Result<Self> {
        check_dense_size("SSP", train.len())?;
        let locs = train.locations();
        let (beta, coef) = ssp_coefficients(&tps_matrix(&locs), &trend.design(&locs), &train.values(), theta)?;
        Ok(Self { trend, locs, beta, coef })
    }
}

impl Engine for SspEngine {
    fn predict(&self, locs: &[Location], _with_variance: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let mean = par::map_slice(locs, |u| {
            let smooth: f64 = self.locs.iter().zip(self.coef.iter()).map(|(s, c)| tps_kernel(u, s) * c).sum();
            self.trend.mean(u, &self.beta) + smooth
        });
        Ok((mean, None))
    }
}
