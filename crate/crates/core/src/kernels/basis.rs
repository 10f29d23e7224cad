use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::grid::RegularGrid;
use crate::data::{BBox, Location};
use crate::error::{invalid, Result, SpbError};
use crate::linalg::{chol_factor, CholFactor, CsrMatrix};
use crate::par;

/// A finite family of spatial basis functions `S(u) = (S_1(u), ..., S_r(u))`.
pub trait Basis: Send + Sync {
    fn dim(&self) -> usize;

    /// Nonzero components of `S(u)` as `(index, value)`, indices ascending.
    fn eval_sparse(&self, u: &Location) -> Result<Vec<(usize, f64)>>;

    fn eval(&self, u: &Location) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(self.dim());
        for (j, x) in self.eval_sparse(u)? {
            v[j] = x;
        }
        Ok(v)
    }
}

pub fn eval_basis(b: &dyn Basis, u: &Location) -> Result<DVector<f64>> {
    b.eval(u)
}

/// Dense `n x r` matrix whose row `i` is `S(locs[i])'`.
pub fn build_basis_matrix(b: &dyn Basis, locs: &[Location]) -> Result<DMatrix<f64>> {
    if locs.is_empty() {
        return invalid("basis matrix needs at least one location");
    }
    let rows = par::map_slice(locs, |u| b.eval_sparse(u));
    let mut s = DMatrix::zeros(locs.len(), b.dim());
    for (i, row) in rows.into_iter().enumerate() {
        for (j, x) in row? {
            s[(i, j)] = x;
        }
    }
    Ok(s)
}

/// Sparse counterpart of [`build_basis_matrix`].
pub fn build_basis_sparse(b: &dyn Basis, locs: &[Location]) -> Result<CsrMatrix> {
    let rows = par::map_slice(locs, |u| b.eval_sparse(u));
    let mut trip = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        trip.extend(row?.into_iter().map(|(j, x)| (i, j, x)));
    }
    Ok(CsrMatrix::from_triplets(locs.len(), b.dim(), &trip))
}

/// Bisquare functions `{1 - (d/w)^2}^2` for `d <= w`, else 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BisquareBasis {
    centers: Vec<Location>,
    widths: Vec<f64>,
}

/// Ratio of bisquare width to the centre spacing of its resolution.
pub const BISQUARE_WIDTH_FACTOR: f64 = 1.5;

impl BisquareBasis {
    pub fn new(centers: Vec<Location>, widths: Vec<f64>) -> Result<Self> {
        if centers.is_empty() || centers.len() != widths.len() {
            return invalid("bisquare basis needs r >= 1 centres with one width each");
        }
        if widths.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return invalid("bisquare widths must be positive");
        }
        let mut keys: Vec<_> = centers.iter().map(|c| c.key()).collect();
        keys.sort_unstable();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return invalid("bisquare centres must be distinct");
        }
        Ok(Self { centers, widths })
    }

    /// One regular level of centres per entry in `level_sizes`; each level's
    /// `nx x ny` factorisation follows the aspect ratio of `bbox`.
    pub fn multiresolution(bbox: &BBox, level_sizes: &[usize]) -> Result<Self> {
        let (w, h) = (bbox.width().max(1e-6), bbox.height().max(1e-6));
        let mut centers = Vec::new();
        let mut widths = Vec::new();
        for &size in level_sizes {
            if size == 0 {
                return invalid("resolution level with zero centres");
            }
            let (nx, ny) = aspect_factor(size, w / h);
            let (sx, sy) = (w / nx as f64, h / ny as f64);
            let width = BISQUARE_WIDTH_FACTOR * sx.max(sy);
            for j in 0..ny {
                for i in 0..nx {
                    centers.push(Location {
                        lon: bbox.lon_min + (i as f64 + 0.5) * sx,
                        lat: bbox.lat_min + (j as f64 + 0.5) * sy,
                    });
                    widths.push(width);
                }
            }
        }
        Self::new(centers, widths)
    }

    pub fn centers(&self) -> &[Location] {
        &self.centers
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }
}

/// Divisor pair `(nx, ny)`, `nx ny = size`, with `nx/ny` closest to `aspect`.
fn aspect_factor(size: usize, aspect: f64) -> (usize, usize) {
    (1..=size)
        .filter(|a| size.is_multiple_of(*a))
        .map(|a| (a, size / a))
        .min_by(|p, q| {
            let score = |(x, y): &(usize, usize)| ((*x as f64 / *y as f64) / aspect).ln().abs();
            score(p).total_cmp(&score(q))
        })
        .unwrap_or((size, 1))
}

pub fn bisquare(d: f64, w: f64) -> f64 {
    if d < w {
        let t = 1.0 - (d / w).powi(2);
        t * t
    } else {
        0.0
    }
}

impl Basis for BisquareBasis {
    fn dim(&self) -> usize {
        self.centers.len()
    }

    fn eval_sparse(&self, u: &Location) -> Result<Vec<(usize, f64)>> {
        Ok(self
            .centers
            .iter()
            .zip(&self.widths)
            .enumerate()
            .filter_map(|(j, (c, &w))| {
                let v = bisquare(c.dist(u), w);
                (v != 0.0).then_some((j, v))
            })
            .collect())
    }
}

/// `phi(d) = (1-d)^6 (35 d^2 + 18 d + 3) / 3` on `[0, 1]`, else 0.
pub fn wendland(d: f64) -> f64 {
    if d < 1.0 {
        (1.0 - d).powi(6) * (35.0 * d * d + 18.0 * d + 3.0) / 3.0
    } else {
        0.0
    }
}

/// Wendland functions centred on the nodes of a regular grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WendlandBasis {
    grid: RegularGrid,
    radius: f64,
}

/// Support radius in units of grid spacing.
pub const WENDLAND_OVERLAP: f64 = 2.5;

impl WendlandBasis {
    pub fn new(grid: RegularGrid, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return invalid("Wendland support radius must be positive");
        }
        Ok(Self { grid, radius })
    }

    /// Grid with `nodes_long_side` interior nodes along the longer side of
    /// `bbox` plus a `buffer`-node margin; radius `overlap x spacing`.
    pub fn covering(bbox: &BBox, nodes_long_side: usize, buffer: usize, overlap: f64) -> Result<Self> {
        if nodes_long_side < 2 {
            return invalid("Wendland grid needs at least 2 nodes per side");
        }
        let long = bbox.width().max(bbox.height()).max(1e-6);
        let spacing = long / (nodes_long_side - 1) as f64;
        let grid = RegularGrid::covering(bbox, spacing, buffer)?;
        Self::new(grid, overlap * spacing)
    }

    pub fn grid(&self) -> &RegularGrid {
        &self.grid
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
}

impl Basis for WendlandBasis {
    fn dim(&self) -> usize {
        self.grid.len()
    }

    fn eval_sparse(&self, u: &Location) -> Result<Vec<(usize, f64)>> {
        let g = &self.grid;
        let range = |x: f64, x0: f64, dx: f64, n: usize| {
            let lo = ((x - self.radius - x0) / dx).ceil().max(0.0);
            let hi = ((x + self.radius - x0) / dx).floor().min(n as f64 - 1.0);
            (lo as i64, hi as i64)
        };
        let (i0, i1) = range(u.lon, g.lon0, g.dx, g.nx);
        let (j0, j1) = range(u.lat, g.lat0, g.dy, g.ny);
        let mut out = Vec::new();
        for j in j0.max(0)..=j1 {
            for i in i0.max(0)..=i1 {
                let k = g.index(i as usize, j as usize);
                let v = wendland(g.node(k).dist(u) / self.radius);
                if v != 0.0 {
                    out.push((k, v));
                }
            }
        }
        Ok(out)
    }
}

/// Hat functions on a regular grid triangulated along the `(i,j)-(i+1,j+1)`
/// diagonal of every cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinearBasis {
    grid: RegularGrid,
}

impl PiecewiseLinearBasis {
    pub fn new(grid: RegularGrid) -> Result<Self> {
        if grid.nx < 2 || grid.ny < 2 {
            return invalid("piecewise-linear mesh needs at least 2x2 nodes");
        }
        Ok(Self { grid })
    }

    pub fn grid(&self) -> &RegularGrid {
        &self.grid
    }

    pub fn contains(&self, u: &Location) -> bool {
        self.locate(u).is_some()
    }

    fn locate(&self, u: &Location) -> Option<(usize, usize, f64, f64)> {
        let g = &self.grid;
        let tol = 1e-9;
        let fx = (u.lon - g.lon0) / g.dx;
        let fy = (u.lat - g.lat0) / g.dy;
        let (mx, my) = ((g.nx - 1) as f64, (g.ny - 1) as f64);
        if !(fx >= -tol && fx <= mx + tol && fy >= -tol && fy <= my + tol) {
            return None;
        }
        let (fx, fy) = (fx.clamp(0.0, mx), fy.clamp(0.0, my));
        let i = (fx.floor() as usize).min(g.nx - 2);
        let j = (fy.floor() as usize).min(g.ny - 2);
        Some((i, j, fx - i as f64, fy - j as f64))
    }
}

impl Basis for PiecewiseLinearBasis {
    fn dim(&self) -> usize {
        self.grid.len()
    }

    fn eval_sparse(&self, u: &Location) -> Result<Vec<(usize, f64)>> {
        let (i, j, fx, fy) = self.locate(u).ok_or(SpbError::OutsideMesh { lon: u.lon, lat: u.lat })?;
        let g = &self.grid;
        let k00 = g.index(i, j);
        let k11 = g.index(i + 1, j + 1);
        let mut out = if fx >= fy {
            vec![(k00, 1.0 - fx), (g.index(i + 1, j), fx - fy), (k11, fy)]
        } else {
            vec![(k00, 1.0 - fy), (g.index(i, j + 1), fy - fx), (k11, fx)]
        };
        out.sort_unstable_by_key(|e| e.0);
        out.retain(|e| e.1 != 0.0);
        Ok(out)
    }
}

/// `S(u) = (K*)^{-1} k(u)` for the exponential correlation `exp(-kappa h)`
/// on a fixed knot set; the variance scale cancels.
#[derive(Clone, Debug)]
pub struct PredictiveProcessBasis {
    knots: Vec<Location>,
    kappa: f64,
    kstar: CholFactor,
}

impl PredictiveProcessBasis {
    pub fn new(knots: Vec<Location>, kappa: f64) -> Result<Self> {
        if knots.is_empty() || !(kappa > 0.0) || !kappa.is_finite() {
            return invalid("predictive-process basis needs knots and kappa > 0");
        }
        let r = knots.len();
        let k = DMatrix::from_fn(r, r, |i, j| (-kappa * knots[i].dist(&knots[j])).exp());
        let kstar = chol_factor(&k)?;
        Ok(Self { knots, kappa, kstar })
    }

    /// `k x k` knots on the corners-inclusive regular grid over `bbox`.
    pub fn grid_knots(bbox: &BBox, per_side: usize) -> Vec<Location> {
        let per_side = per_side.max(1);
        let step = |len: f64| if per_side > 1 { len / (per_side - 1) as f64 } else { 0.0 };
        let (sx, sy) = (step(bbox.width()), step(bbox.height()));
        let off = |len: f64| if per_side > 1 { 0.0 } else { len / 2.0 };
        (0..per_side * per_side)
            .map(|q| Location {
                lon: bbox.lon_min + off(bbox.width()) + (q % per_side) as f64 * sx,
                lat: bbox.lat_min + off(bbox.height()) + (q / per_side) as f64 * sy,
            })
            .collect()
    }

    pub fn knots(&self) -> &[Location] {
        &self.knots
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Cholesky factor of the knot correlation matrix `K*`.
    pub fn kstar(&self) -> &CholFactor {
        &self.kstar
    }

    pub fn cross_correlation(&self, u: &Location) -> DVector<f64> {
        DVector::from_iterator(self.knots.len(), self.knots.iter().map(|k| (-self.kappa * k.dist(u)).exp()))
    }

    /// Faster equivalent of [`build_basis_matrix`] using one multi-RHS solve.
    pub fn matrix(&self, locs: &[Location]) -> DMatrix<f64> {
        let r = self.knots.len();
        let mut kt = DMatrix::zeros(r, locs.len());
        for (i, u) in locs.iter().enumerate() {
            kt.set_column(i, &self.cross_correlation(u));
        }
        self.kstar.solve_mat(&kt).transpose()
    }
}

impl Basis for PredictiveProcessBasis {
    fn dim(&self) -> usize {
        self.knots.len()
    }

    fn eval_sparse(&self, u: &Location) -> Result<Vec<(usize, f64)>> {
        Ok(self.eval(u)?.iter().copied().enumerate().collect())
    }

    fn eval(&self, u: &Location) -> Result<DVector<f64>> {
        Ok(self.kstar.solve(&self.cross_correlation(u)))
    }
}
