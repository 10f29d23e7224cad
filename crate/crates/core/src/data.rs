//! Spatial datasets: ingestion, hold-out splitting and simulation.
//!
//! Distances are plain Euclidean on (lon, lat) in degrees.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SpbError};
use crate::kernels::ExponentialCov;
use crate::linalg::chol_factor;

/// Resolution used to decide that two locations coincide.
pub const LOCATION_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub lon: f64,
    pub lat: f64,
}

impl Location {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !lon.is_finite() || !lat.is_finite() {
            return invalid(format!("non-finite location ({lon}, {lat})"));
        }
        if !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
            return invalid(format!("location ({lon}, {lat}) outside lon/lat range"));
        }
        Ok(Self { lon, lat })
    }

    pub fn dist(&self, other: &Location) -> f64 {
        (self.lon - other.lon).hypot(self.lat - other.lat)
    }

    /// Integer key after rounding to [`LOCATION_EPS`]; equal keys mean the
    /// same location.
    pub fn key(&self) -> (i64, i64) {
        (
            (self.lon / LOCATION_EPS).round() as i64,
            (self.lat / LOCATION_EPS).round() as i64,
        )
    }
}

/// Axis-aligned box in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl BBox {
    pub fn new(lon_min: f64, lon_max: f64, lat_min: f64, lat_max: f64) -> Result<Self> {
        let b = Self { lon_min, lon_max, lat_min, lat_max };
        if ![lon_min, lon_max, lat_min, lat_max].iter().all(|v| v.is_finite())
            || lon_min > lon_max
            || lat_min > lat_max
        {
            return invalid(format!("invalid bounding box {b:?}"));
        }
        Ok(b)
    }

    pub fn of(locs: &[Location]) -> Result<Self> {
        if locs.is_empty() {
            return Err(SpbError::EmptyDataset);
        }
        let mut b = BBox {
            lon_min: f64::INFINITY,
            lon_max: f64::NEG_INFINITY,
            lat_min: f64::INFINITY,
            lat_max: f64::NEG_INFINITY,
        };
        for l in locs {
            b.lon_min = b.lon_min.min(l.lon);
            b.lon_max = b.lon_max.max(l.lon);
            b.lat_min = b.lat_min.min(l.lat);
            b.lat_max = b.lat_max.max(l.lat);
        }
        Ok(b)
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            lon_min: self.lon_min.min(other.lon_min),
            lon_max: self.lon_max.max(other.lon_max),
            lat_min: self.lat_min.min(other.lat_min),
            lat_max: self.lat_max.max(other.lat_max),
        }
    }

    pub fn expand(&self, margin: f64) -> BBox {
        BBox {
            lon_min: self.lon_min - margin,
            lon_max: self.lon_max + margin,
            lat_min: self.lat_min - margin,
            lat_max: self.lat_max + margin,
        }
    }

    pub fn width(&self) -> f64 {
        self.lon_max - self.lon_min
    }

    pub fn height(&self) -> f64 {
        self.lat_max - self.lat_min
    }

    pub fn diameter(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn contains(&self, u: &Location) -> bool {
        (self.lon_min..=self.lon_max).contains(&u.lon) && (self.lat_min..=self.lat_max).contains(&u.lat)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub loc: Location,
    pub value: f64,
}

/// Observed values at distinct locations, with optional heteroskedasticity
/// weights `V(s_i) > 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialDataset {
    points: Vec<DataPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    het_weights: Option<Vec<f64>>,
}

impl SpatialDataset {
    pub fn new(points: Vec<DataPoint>, het_weights: Option<Vec<f64>>) -> Result<Self> {
        let mut seen: HashMap<(i64, i64), usize> = HashMap::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            Location::new(p.loc.lon, p.loc.lat)?;
            if !p.value.is_finite() {
                return Err(SpbError::MalformedRow { row: i + 1, message: "non-finite value".into() });
            }
            if seen.insert(p.loc.key(), i).is_some() {
                return Err(SpbError::DuplicateLocation { row: i + 1, lon: p.loc.lon, lat: p.loc.lat });
            }
        }
        if let Some(w) = &het_weights {
            if w.len() != points.len() {
                return Err(SpbError::LengthMismatch { left: w.len(), right: points.len() });
            }
            if let Some(i) = w.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(SpbError::MalformedRow { row: i + 1, message: "weight must be positive".into() });
            }
        }
        Ok(Self { points, het_weights })
    }

    pub fn from_parts(locs: &[Location], values: &[f64]) -> Result<Self> {
        if locs.len() != values.len() {
            return Err(SpbError::LengthMismatch { left: locs.len(), right: values.len() });
        }
        let pts = locs.iter().zip(values).map(|(&loc, &value)| DataPoint { loc, value }).collect();
        Self::new(pts, None)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    pub fn locations(&self) -> Vec<Location> {
        self.points.iter().map(|p| p.loc).collect()
    }

    pub fn values(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.points.iter().map(|p| p.value))
    }

    pub fn het_weights(&self) -> Option<&[f64]> {
        self.het_weights.as_deref()
    }

    /// `V(s_i)`, defaulting to 1.
    pub fn weight(&self, i: usize) -> f64 {
        self.het_weights.as_ref().map_or(1.0, |w| w[i])
    }

    pub fn bbox(&self) -> Result<BBox> {
        BBox::of(&self.locations())
    }

    fn subset(&self, idx: &[usize]) -> SpatialDataset {
        SpatialDataset {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            het_weights: self.het_weights.as_ref().map(|w| idx.iter().map(|&i| w[i]).collect()),
        }
    }
}

/// Column names for CSV ingestion.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CsvSchema {
    pub lon: String,
    pub lat: String,
    pub value: String,
    pub weight: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self { lon: "lon".into(), lat: "lat".into(), value: "value".into(), weight: Some("weight".into()) }
    }
}

/// Reads `lon,lat,value[,weight]`. Row numbers in errors count data rows from 1.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<SpatialDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (ilon, ilat, ival) = match (col(&schema.lon), col(&schema.lat), col(&schema.value)) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return invalid(format!(
                "missing columns: expected '{}', '{}', '{}' in header {:?}",
                schema.lon, schema.lat, schema.value, headers
            ))
        }
    };
    let iw = schema.weight.as_deref().and_then(col);
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| SpbError::MalformedRow { row, message: e.to_string() })?;
        let field = |i: usize, what: &str| -> Result<f64> {
            let s = rec.get(i).ok_or_else(|| SpbError::MalformedRow {
                row,
                message: format!("missing {what}"),
            })?;
            let v: f64 = s.parse().map_err(|_| SpbError::MalformedRow {
                row,
                message: format!("cannot parse {what} '{s}'"),
            })?;
            if !v.is_finite() {
                return Err(SpbError::MalformedRow { row, message: format!("non-finite {what} '{s}'") });
            }
            Ok(v)
        };
        let (lon, lat, value) = (field(ilon, "lon")?, field(ilat, "lat")?, field(ival, "value")?);
        let loc = Location::new(lon, lat).map_err(|e| SpbError::MalformedRow { row, message: e.to_string() })?;
        points.push(DataPoint { loc, value });
        if let Some(i) = iw {
            weights.push(field(i, "weight")?);
        }
    }
    if points.is_empty() {
        return Err(SpbError::EmptyDataset);
    }
    SpatialDataset::new(points, iw.map(|_| weights))
}

/// Writes `lon,lat,value[,weight]` with shortest round-trip float formatting.
pub fn save_csv(data: &SpatialDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    match data.het_weights() {
        Some(ws) => {
            w.write_record(["lon", "lat", "value", "weight"])?;
            for (p, wt) in data.points().iter().zip(ws) {
                w.write_record(&[p.loc.lon.to_string(), p.loc.lat.to_string(), p.value.to_string(), wt.to_string()])?;
            }
        }
        None => {
            w.write_record(["lon", "lat", "value"])?;
            for p in data.points() {
                w.write_record(&[p.loc.lon.to_string(), p.loc.lat.to_string(), p.value.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutSplit {
    pub train: SpatialDataset,
    pub validation: SpatialDataset,
    pub seed: u64,
    pub fraction: f64,
}

/// Uniform random split without replacement; `|validation| = round(fraction N)`.
/// Both halves keep the source order.
pub fn split_holdout(data: &SpatialDataset, fraction: f64, seed: u64) -> Result<HoldoutSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return invalid(format!("split fraction {fraction} not in (0, 1)"));
    }
    let n = data.len();
    let m = (fraction * n as f64).round() as usize;
    if n < 2 || m == 0 || m >= n {
        return invalid(format!("dataset of {n} points too small for fraction {fraction}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val: Vec<usize> = sample(&mut rng, n, m).into_vec();
    val.sort_unstable();
    let mut is_val = vec![false; n];
    val.iter().for_each(|&i| is_val[i] = true);
    let train: Vec<usize> = (0..n).filter(|&i| !is_val[i]).collect();
    Ok(HoldoutSplit { train: data.subset(&train), validation: data.subset(&val), seed, fraction })
}

/// Large-scale covariates `x(u)`; the first component is always the constant 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendSpec {
    /// `x(u) = 1`.
    Constant,
    /// `x(u) = (1, latitude)`.
    #[default]
    Latitude,
    /// `x(u) = (1, longitude, latitude)`.
    LonLat,
}

impl TrendSpec {
    pub fn p(&self) -> usize {
        match self {
            TrendSpec::Constant => 1,
            TrendSpec::Latitude => 2,
            TrendSpec::LonLat => 3,
        }
    }

    pub fn covariates(&self, u: &Location) -> Vec<f64> {
        match self {
            TrendSpec::Constant => vec![1.0],
            TrendSpec::Latitude => vec![1.0, u.lat],
            TrendSpec::LonLat => vec![1.0, u.lon, u.lat],
        }
    }

    /// `n x p` design matrix.
    pub fn design(&self, locs: &[Location]) -> DMatrix<f64> {
        let p = self.p();
        let mut x = DMatrix::zeros(locs.len(), p);
        for (i, u) in locs.iter().enumerate() {
            for (j, v) in self.covariates(u).into_iter().enumerate() {
                x[(i, j)] = v;
            }
        }
        x
    }

    pub fn mean(&self, u: &Location, beta: &DVector<f64>) -> f64 {
        self.covariates(u).iter().zip(beta.iter()).map(|(a, b)| a * b).sum()
    }
}

/// Parameters of the spatial mixed effects simulator
/// `Z = x'beta + nu + xi + eps` with exponential covariance for `nu`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub domain: BBox,
    pub n_points: usize,
    pub beta: Vec<f64>,
    #[serde(default)]
    pub trend: TrendSpec,
    pub sigma0_sq: f64,
    pub theta: f64,
    pub sigma_xi_sq: f64,
    pub sigma_eps_sq: f64,
    pub seed: u64,
}

/// Above this size [`simulate`] refuses; use [`simulate_large`].
pub const DENSE_SIMULATION_LIMIT: usize = 5000;

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        BBox::new(self.domain.lon_min, self.domain.lon_max, self.domain.lat_min, self.domain.lat_max)?;
        if self.n_points == 0 {
            return invalid("n_points must be at least 1");
        }
        if self.beta.len() != self.trend.p() {
            return invalid(format!("beta has {} entries, trend needs {}", self.beta.len(), self.trend.p()));
        }
        for (name, v) in [("sigma0_sq", self.sigma0_sq), ("sigma_xi_sq", self.sigma_xi_sq), ("sigma_eps_sq", self.sigma_eps_sq)] {
            if !(v >= 0.0) || !v.is_finite() {
                return invalid(format!("{name} must be >= 0"));
            }
        }
        if !(self.theta > 0.0) {
            return invalid("theta must be > 0");
        }
        Ok(())
    }

    fn draw_locations(&self, rng: &mut ChaCha8Rng) -> Vec<Location> {
        let d = &self.domain;
        let mut seen = std::collections::HashSet::new();
        let mut locs = Vec::with_capacity(self.n_points);
        while locs.len() < self.n_points {
            let u = Location { lon: rng.random_range(d.lon_min..=d.lon_max), lat: rng.random_range(d.lat_min..=d.lat_max) };
            if seen.insert(u.key()) {
                locs.push(u);
            }
        }
        locs
    }
}

/// Draws a dataset from `Gau(X beta, Sigma_nu + (sigma_xi^2 + sigma_eps^2) I)`.
/// Deterministic given `cfg.seed`.
pub fn simulate(cfg: &SimulationConfig) -> Result<SpatialDataset> {
    cfg.validate()?;
    if cfg.n_points > DENSE_SIMULATION_LIMIT {
        return invalid(format!(
            "dense simulation limited to {DENSE_SIMULATION_LIMIT} points; use simulate_large"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let locs = cfg.draw_locations(&mut rng);
    let n = locs.len();
    let beta = DVector::from_vec(cfg.beta.clone());
    let mean = cfg.trend.design(&locs) * &beta;
    let white = (cfg.sigma_xi_sq + cfg.sigma_eps_sq).sqrt();
    let z: DVector<f64> = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
    let values = if cfg.sigma0_sq > 0.0 {
        let cov = ExponentialCov::new(cfg.sigma0_sq, cfg.theta)?;
        let mut sigma = DMatrix::from_fn(n, n, |i, j| cov.eval(locs[i].dist(&locs[j])));
        for i in 0..n {
            sigma[(i, i)] += cfg.sigma_xi_sq + cfg.sigma_eps_sq;
        }
        let l = chol_factor(&sigma)?;
        mean + l.mul_lower(&z)
    } else {
        mean + z * white
    };
    SpatialDataset::from_parts(&locs, values.as_slice())
}

/// Simulator for sizes beyond [`DENSE_SIMULATION_LIMIT`].
///
/// The exponential process is drawn exactly on a `knots x knots` grid and
/// carried to the data locations by its conditional mean; the remaining
/// conditional variance is added as independent noise so the marginal
/// variance `sigma0^2` is kept at every location.
pub fn simulate_large(cfg: &SimulationConfig, knots_per_side: usize) -> Result<SpatialDataset> {
    cfg.validate()?;
    if cfg.n_points <= DENSE_SIMULATION_LIMIT {
        return simulate(cfg);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let locs = cfg.draw_locations(&mut rng);
    let n = locs.len();
    let beta = DVector::from_vec(cfg.beta.clone());
    let mut values = cfg.trend.design(&locs) * &beta;
    let white = (cfg.sigma_xi_sq + cfg.sigma_eps_sq).sqrt();
    if cfg.sigma0_sq > 0.0 {
        let cov = ExponentialCov::new(cfg.sigma0_sq, cfg.theta)?;
        let k = knots_per_side.max(2);
        let d = &cfg.domain;
        let knots: Vec<Location> = (0..k * k)
            .map(|q| Location {
                lon: d.lon_min + d.width() * (q % k) as f64 / (k - 1) as f64,
                lat: d.lat_min + d.height() * (q / k) as f64 / (k - 1) as f64,
            })
            .collect();
        let kstar = DMatrix::from_fn(k * k, k * k, |i, j| cov.eval(knots[i].dist(&knots[j])));
        let kf = chol_factor(&kstar)?;
        let zk = DVector::from_fn(k * k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eta = kf.mul_lower(&zk);
        let alpha = kf.solve(&eta);
        let extra: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let nu: Vec<f64> = crate::par::map_range(n, |i| {
            let kv = DVector::from_fn(k * k, |j, _| cov.eval(locs[i].dist(&knots[j])));
            let m = kv.dot(&alpha);
            let resid = (cfg.sigma0_sq - kf.quad_form(&kv)).max(0.0);
            m + resid.sqrt() * extra[i]
        });
        for i in 0..n {
            values[i] += nu[i];
        }
    }
    for i in 0..n {
        values[i] += white * rng.sample::<f64, _>(StandardNormal);
    }
    SpatialDataset::from_parts(&locs, values.as_slice())
}
