use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::check_lag;
use crate::data::{BBox, Location};
use crate::error::{invalid, Result, SpbError};

/// Regular prediction raster: nodes at `lon0 + i step`, `lat0 + j step` up to
/// and including the far corner when it lies on the lattice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterSpec {
    pub lon0: f64,
    pub lat0: f64,
    pub lon1: f64,
    pub lat1: f64,
    pub step: f64,
}

const SNAP: f64 = 1e-9;

impl RasterSpec {
    pub fn new(lon0: f64, lat0: f64, lon1: f64, lat1: f64, step: f64) -> Result<Self> {
        let r = Self { lon0, lat0, lon1, lat1, step };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lon0, self.lat0, self.lon1, self.lat1, self.step];
        if all.iter().any(|v| !v.is_finite()) {
            return invalid("raster bounds must be finite");
        }
        if !(self.step > 0.0) || self.lon1 < self.lon0 || self.lat1 < self.lat0 {
            return invalid(format!("bad raster {self}: need lon0 <= lon1, lat0 <= lat1, step > 0"));
        }
        if self.len() > 50_000_000 {
            return invalid(format!("raster {self} has {} nodes", self.len()));
        }
        Ok(())
    }

    /// 1-degree raster with bounds snapped outward to whole degrees; falls back
    /// to a tenth of the longer side when the box is narrower than 2 degrees.
    pub fn covering(bbox: &BBox) -> Self {
        let long_side = bbox.width().max(bbox.height());
        if long_side >= 2.0 {
            Self {
                lon0: bbox.lon_min.floor(),
                lat0: bbox.lat_min.floor(),
                lon1: bbox.lon_max.ceil(),
                lat1: bbox.lat_max.ceil(),
                step: 1.0,
            }
        } else {
            let step = if long_side > 0.0 { long_side / 10.0 } else { 1.0 };
            Self { lon0: bbox.lon_min, lat0: bbox.lat_min, lon1: bbox.lon_max, lat1: bbox.lat_max, step }
        }
    }

    pub fn nx(&self) -> usize {
        ((self.lon1 - self.lon0) / self.step + SNAP).floor() as usize + 1
    }

    pub fn ny(&self) -> usize {
        ((self.lat1 - self.lat0) / self.step + SNAP).floor() as usize + 1
    }

    pub fn len(&self) -> usize {
        self.nx().saturating_mul(self.ny())
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bbox(&self) -> BBox {
        BBox {
            lon_min: self.lon0,
            lon_max: self.lon0 + (self.nx() - 1) as f64 * self.step,
            lat_min: self.lat0,
            lat_max: self.lat0 + (self.ny() - 1) as f64 * self.step,
        }
    }

    /// Row-major with longitude varying fastest.
    pub fn nodes(&self) -> Vec<Location> {
        let nx = self.nx();
        (0..self.len())
            .map(|k| Location {
                lon: self.lon0 + (k % nx) as f64 * self.step,
                lat: self.lat0 + (k / nx) as f64 * self.step,
            })
            .collect()
    }

    /// Lag-1 semivariogram of `values` laid out as [`nodes`](Self::nodes),
    /// enumerating lattice offsets instead of all pairs. `lag` defaults to `step`.
    pub fn semivariogram(&self, values: &[f64], lag: Option<f64>, tol: f64) -> Result<f64> {
        let (nx, ny) = (self.nx(), self.ny());
        if values.len() != nx * ny {
            return Err(SpbError::LengthMismatch { left: values.len(), right: nx * ny });
        }
        if values.len() < 2 {
            return invalid("semivariogram needs at least 2 raster nodes");
        }
        let lag = lag.unwrap_or(self.step);
        check_lag(lag, tol)?;
        let reach = ((lag + tol) / self.step).floor() as i64;
        let (mut sum, mut count) = (0.0, 0usize);
        for dj in 0..=reach.min(ny as i64 - 1) {
            let lo = if dj == 0 { 1 } else { -reach.min(nx as i64 - 1) };
            for di in lo..=reach.min(nx as i64 - 1) {
                let h = self.step * ((di * di + dj * dj) as f64).sqrt();
                if (h - lag).abs() > tol {
                    continue;
                }
                for j in 0..ny - dj as usize {
                    for i in 0..nx {
                        let i2 = i as i64 + di;
                        if i2 < 0 || i2 >= nx as i64 {
                            continue;
                        }
                        let a = values[j * nx + i];
                        let b = values[(j + dj as usize) * nx + i2 as usize];
                        sum += (a - b).powi(2);
                        count += 1;
                    }
                }
            }
        }
        if count == 0 {
            return Err(SpbError::NoPairsAtLag { lag, tol });
        }
        Ok(sum / (2.0 * count as f64))
    }
}

impl fmt::Display for RasterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{}", self.lon0, self.lat0, self.lon1, self.lat1, self.step)
    }
}

impl FromStr for RasterSpec {
    type Err = SpbError;

    /// `"lon0,lat0,lon1,lat1,step"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 5 {
            return invalid(format!("raster `{s}` should be lon0,lat0,lon1,lat1,step"));
        }
        let mut v = [0.0; 5];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p.parse().map_err(|_| SpbError::InvalidInput(format!("raster field `{p}` is not a number")))?;
        }
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }
}
