use serde::{Deserialize, Serialize};

use crate::data::{BBox, Location};
use crate::error::{invalid, Result};

/// Regular lon/lat lattice. Node `(i, j)` sits at
/// `(lon0 + i dx, lat0 + j dy)` and has linear index `j nx + i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularGrid {
    pub lon0: f64,
    pub lat0: f64,
    pub dx: f64,
    pub dy: f64,
    pub nx: usize,
    pub ny: usize,
}

impl RegularGrid {
    pub fn new(lon0: f64, lat0: f64, dx: f64, dy: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(dx > 0.0 && dy > 0.0) || nx == 0 || ny == 0 || !lon0.is_finite() || !lat0.is_finite() {
            return invalid(format!("invalid grid {nx}x{ny} spacing ({dx}, {dy})"));
        }
        Ok(Self { lon0, lat0, dx, dy, nx, ny })
    }

    /// Square-cell grid with the given spacing covering `bbox`, padded by
    /// `buffer` extra nodes on every side.
    pub fn covering(bbox: &BBox, spacing: f64, buffer: usize) -> Result<Self> {
        if !(spacing > 0.0) {
            return invalid("grid spacing must be positive");
        }
        let cells = |len: f64| ((len / spacing) - 1e-9).ceil().max(0.0) as usize;
        let (cx, cy) = (cells(bbox.width()), cells(bbox.height()));
        let b = buffer as f64 * spacing;
        // centre the grid on the box
        let lon0 = bbox.lon_min - b - 0.5 * (cx as f64 * spacing - bbox.width());
        let lat0 = bbox.lat_min - b - 0.5 * (cy as f64 * spacing - bbox.height());
        Self::new(lon0, lat0, spacing, spacing, cx + 1 + 2 * buffer, cy + 1 + 2 * buffer)
    }

    /// Square-cell grid over `bbox` with about `target` nodes in total,
    /// at least 2 per side.
    pub fn with_node_target(bbox: &BBox, target: usize, buffer: usize) -> Result<Self> {
        let (w, h) = (bbox.width().max(1e-6), bbox.height().max(1e-6));
        let mut spacing = (w * h / target.max(4) as f64).sqrt();
        loop {
            let g = Self::covering(bbox, spacing, buffer)?;
            if g.len() >= target && g.nx >= 2 && g.ny >= 2 {
                return Ok(g);
            }
            spacing *= 0.97;
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    pub fn node(&self, k: usize) -> Location {
        let (i, j) = self.ij(k);
        Location { lon: self.lon0 + i as f64 * self.dx, lat: self.lat0 + j as f64 * self.dy }
    }

    pub fn nodes(&self) -> Vec<Location> {
        (0..self.len()).map(|k| self.node(k)).collect()
    }

    pub fn lon_max(&self) -> f64 {
        self.lon0 + (self.nx - 1) as f64 * self.dx
    }

    pub fn lat_max(&self) -> f64 {
        self.lat0 + (self.ny - 1) as f64 * self.dy
    }

    pub fn bbox(&self) -> BBox {
        BBox { lon_min: self.lon0, lon_max: self.lon_max(), lat_min: self.lat0, lat_max: self.lat_max() }
    }

    /// Linear indices of the (up to four) axis neighbours of node `k`.
    pub fn neighbors4(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        let (i, j) = self.ij(k);
        let cand = [
            (i > 0).then(|| k - 1),
            (i + 1 < self.nx).then(|| k + 1),
            (j > 0).then(|| k - self.nx),
            (j + 1 < self.ny).then(|| k + self.nx),
        ];
        cand.into_iter().flatten()
    }
}
