use super::Engine;
use crate::data::{Location, SpatialDataset};
use crate::error::{invalid, Result};
use crate::par;

/// Weighted average of the data with weights `exp(-theta d_i(u))`.
///
/// Distances are shifted by their minimum before exponentiating, which leaves
/// the weights unchanged but avoids underflow far from the data.
pub fn edw_predict(locs: &[Location], values: &[f64], u: &Location, theta: f64) -> f64 {
    let d: Vec<f64> = locs.iter().map(|s| s.dist(u)).collect();
    let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut num, mut den) = (0.0, 0.0);
    for (di, z) in d.iter().zip(values) {
        let w = (-theta * (di - dmin)).exp();
        num += w * z;
        den += w;
    }
    num / den
}

pub(super) struct EdwEngine {
    locs: Vec<Location>,
    values: Vec<f64>,
    theta: f64,
}

impl EdwEngine {
    pub fn new(train: &SpatialDataset, theta: f64) -> Result<Self> {
        if train.is_empty() || !(theta > 0.0) {
            return invalid("EDW needs data and theta > 0");
        }
        Ok(Self { locs: train.locations(), values: train.values().iter().copied().collect(), theta })
    }
}

impl Engine for EdwEngine {
    fn predict(&self, locs: &[Location], _with_variance: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        Ok((par::map_slice(locs, |u| edw_predict(&self.locs, &self.values, u, self.theta)), None))
    }
}
