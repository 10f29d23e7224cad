//! The seven predictors behind one fit/predict interface.
//!
//! [`FittedPredictor::fit`] estimates parameters and builds the caches needed
//! for prediction; the serializable part lives in a [`PredictorDocument`], from
//! which the caches are rebuilt on load.

mod edw;
mod frk;
mod gmrf;
mod mpp;
mod ssp;
mod tsk;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BBox, Location, SpatialDataset, TrendSpec};
use crate::error::{invalid, Result, SpbError};
use crate::estimation::{
    default_knots, eb_fit_spd, em_fit_frk, loocv_select_ssp, mcmc_fit_mpp, ml_fit_ltk, ml_fit_tsk, EmOptions, FrkParams,
    LtkOptions, LtkParams, MppFit, MppOptions, SpdOptions, SpdParams, TskOptions, TskParams,
};
use crate::kernels::{BisquareBasis, RegularGrid, WendlandBasis, WENDLAND_OVERLAP};

pub use edw::edw_predict;

/// Version written into every model file.
pub const FORMAT_VERSION: u32 = 1;

/// Measurement-error variance used when none is configured (ppm^2).
pub const DEFAULT_SIGMA_EPS_SQ: f64 = 5.6062;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "TSK")]
    Tsk,
    #[serde(rename = "SSP")]
    Ssp,
    #[serde(rename = "EDW")]
    Edw,
    #[serde(rename = "FRK")]
    Frk,
    #[serde(rename = "MPP")]
    Mpp,
    #[serde(rename = "SPD")]
    Spd,
    #[serde(rename = "LTK")]
    Ltk,
}

impl Method {
    pub const ALL: [Method; 7] =
        [Method::Tsk, Method::Ssp, Method::Edw, Method::Frk, Method::Mpp, Method::Spd, Method::Ltk];

    pub fn tag(&self) -> &'static str {
        match self {
            Method::Tsk => "TSK",
            Method::Ssp => "SSP",
            Method::Edw => "EDW",
            Method::Frk => "FRK",
            Method::Mpp => "MPP",
            Method::Spd => "SPD",
            Method::Ltk => "LTK",
        }
    }

    /// Whether predictions carry a model-based variance.
    pub fn has_variance(&self) -> bool {
        !matches!(self, Method::Edw | Method::Ssp)
    }

    /// Parses a comma-separated list such as `"TSK,FRK"`.
    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        let mut out = Vec::new();
        for tag in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let m: Method = tag.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return invalid("empty method list");
        }
        Ok(out)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = SpbError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| SpbError::InvalidInput(format!("unknown method {s:?}; expected one of TSK,SSP,EDW,FRK,MPP,SPD,LTK")))
    }
}

/// Every tunable choice made during fitting. Defaults are printable through
/// the CLI so that each can be audited.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub trend: TrendSpec,
    /// Known measurement-error variance (TSK, FRK, LTK); starting guess for
    /// MPP and SPD.
    pub sigma_eps_sq: f64,
    pub seed: u64,
    /// Region predictions will be requested over; the SPD mesh and the LTK
    /// lattice are built to cover it together with the training data.
    pub domain: Option<BBox>,
    pub edw_theta: f64,
    pub tsk: TskOptions,
    /// Explicit SSP smoothing grid; `None` uses the default log grid.
    pub ssp_grid: Option<Vec<f64>>,
    /// Bisquare centres per resolution, coarsest first.
    pub frk_levels: Vec<usize>,
    pub frk_em: EmOptions,
    pub mpp: MppOptions,
    /// Wendland lattice nodes along the longer side of the region.
    pub ltk_nodes: usize,
    pub ltk: LtkOptions,
    /// SPD mesh node target; `None` scales with the training size.
    pub spd_mesh_nodes: Option<usize>,
    pub spd: SpdOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            trend: TrendSpec::Latitude,
            sigma_eps_sq: DEFAULT_SIGMA_EPS_SQ,
            seed: 0,
            domain: None,
            edw_theta: 1.0,
            tsk: TskOptions::default(),
            ssp_grid: None,
            frk_levels: vec![24, 72],
            frk_em: EmOptions::default(),
            mpp: MppOptions::default(),
            ltk_nodes: 16,
            ltk: LtkOptions::default(),
            spd_mesh_nodes: None,
            spd: SpdOptions::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_eps_sq >= 0.0) || !self.sigma_eps_sq.is_finite() {
            return invalid("sigma_eps_sq must be finite and >= 0");
        }
        if !(self.edw_theta > 0.0) {
            return invalid("edw_theta must be positive");
        }
        if self.frk_levels.is_empty() || self.frk_levels.contains(&0) {
            return invalid("frk_levels must list positive basis counts");
        }
        if self.ltk_nodes < 2 {
            return invalid("ltk_nodes must be at least 2");
        }
        Ok(())
    }

    /// Region covered by the training data and, if set, the prediction domain.
    fn region(&self, train: &SpatialDataset) -> Result<BBox> {
        let b = train.bbox()?;
        Ok(self.domain.map_or(b, |d| b.union(&d)))
    }
}

/// SHA-256 of the canonical JSON encoding of any serializable value.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Estimated parameters plus whatever fixed structure (basis, mesh) they refer to.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "method")]
pub enum MethodParams {
    #[serde(rename = "TSK")]
    Tsk { params: TskParams },
    #[serde(rename = "SSP")]
    Ssp {
        theta: f64,
        grid: Vec<f64>,
        /// LOOCV score per grid value, `null` where the system was singular.
        scores: Vec<Option<f64>>,
    },
    #[serde(rename = "EDW")]
    Edw { theta: f64 },
    #[serde(rename = "FRK")]
    Frk { params: FrkParams, basis: BisquareBasis },
    #[serde(rename = "MPP")]
    Mpp { fit: MppFit },
    #[serde(rename = "SPD")]
    Spd { params: SpdParams, mesh: RegularGrid },
    #[serde(rename = "LTK")]
    Ltk { params: LtkParams, basis: WendlandBasis },
}

impl MethodParams {
    pub fn method(&self) -> Method {
        match self {
            MethodParams::Tsk { .. } => Method::Tsk,
            MethodParams::Ssp { .. } => Method::Ssp,
            MethodParams::Edw { .. } => Method::Edw,
            MethodParams::Frk { .. } => Method::Frk,
            MethodParams::Mpp { .. } => Method::Mpp,
            MethodParams::Spd { .. } => Method::Spd,
            MethodParams::Ltk { .. } => Method::Ltk,
        }
    }
}

/// What the estimator did: objective values, iteration counts, warnings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitLog {
    pub objective: Option<f64>,
    pub initial_objective: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Per-iteration objective, where the estimator is iterative (FRK EM).
    pub trace: Vec<f64>,
    pub diagnostics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub software_version: String,
}

/// Serializable form of a fitted predictor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictorDocument {
    pub format_version: u32,
    #[serde(flatten)]
    pub params: MethodParams,
    pub config: FitConfig,
    pub training: SpatialDataset,
    pub provenance: Provenance,
    pub log: FitLog,
}

/// Means (and, for model-based predictors, variances) at a list of locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub method: Method,
    pub locations: Vec<Location>,
    pub mean: Vec<f64>,
    pub variance: Option<Vec<f64>>,
}

impl PredictionResult {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Writes `lon,lat,mean[,variance]`; the header is written even when empty.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        match &self.variance {
            Some(_) => w.write_record(["lon", "lat", "mean", "variance"])?,
            None => w.write_record(["lon", "lat", "mean"])?,
        }
        for (i, u) in self.locations.iter().enumerate() {
            let mut rec = vec![u.lon.to_string(), u.lat.to_string(), self.mean[i].to_string()];
            if let Some(v) = &self.variance {
                rec.push(v[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-method prediction caches.
trait Engine: Send + Sync {
    /// Means, plus variances when `with_variance` is set and the method has them.
    fn predict(&self, locs: &[Location], with_variance: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)>;
}

/// Maps canonical location keys to training indices.
fn index_by_location(locs: &[Location]) -> HashMap<(i64, i64), usize> {
    locs.iter().enumerate().map(|(i, u)| (u.key(), i)).collect()
}

pub struct FittedPredictor {
    doc: PredictorDocument,
    engine: Box<dyn Engine>,
}

impl fmt::Debug for FittedPredictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FittedPredictor").field("method", &self.method()).finish_non_exhaustive()
    }
}

impl FittedPredictor {
    /// Estimates the parameters of `method` on `train` and prepares it for prediction.
    pub fn fit(method: Method, train: &SpatialDataset, config: &FitConfig) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(SpbError::EmptyDataset);
        }
        let trend = config.trend;
        let eps = config.sigma_eps_sq;
        let mut log = FitLog::default();
        let params = match method {
            Method::Tsk => {
                let f = ml_fit_tsk(train, trend, eps, &config.tsk)?;
                log.objective = Some(f.loglik);
                log.initial_objective = Some(f.initial_loglik);
                log.iterations = f.evals;
                log.converged = f.converged;
                if !f.converged {
                    log.warnings.push("likelihood search hit its evaluation limit".into());
                }
                MethodParams::Tsk { params: f.params }
            }
            Method::Ssp => {
                let f = loocv_select_ssp(train, trend, config.ssp_grid.as_deref())?;
                let best = f.scores.iter().zip(&f.grid).find(|(_, t)| **t == f.theta).and_then(|(s, _)| *s);
                log.objective = best;
                log.iterations = f.grid.len();
                log.converged = true;
                MethodParams::Ssp { theta: f.theta, grid: f.grid, scores: f.scores }
            }
            Method::Edw => {
                log.converged = true;
                MethodParams::Edw { theta: config.edw_theta }
            }
            Method::Frk => {
                let basis = frk_basis(&train.bbox()?, &config.frk_levels, train.len())?;
                let f = em_fit_frk(train, trend, &basis, eps, &config.frk_em)?;
                log.objective = f.loglik_trace.last().copied();
                log.initial_objective = f.loglik_trace.first().copied();
                log.iterations = f.iterations;
                log.converged = f.converged;
                log.trace = f.loglik_trace;
                log.warnings = f.warnings;
                log.diagnostics.insert("basis_functions".into(), crate::kernels::Basis::dim(&basis) as f64);
                MethodParams::Frk { params: f.params, basis }
            }
            Method::Mpp => {
                let knots = default_knots(&train.bbox()?, config.mpp.knots_per_side);
                let f = mcmc_fit_mpp(train, trend, &knots, eps, &config.mpp, config.seed)?;
                log.iterations = config.mpp.burn_in + config.mpp.samples;
                log.converged = true;
                log.diagnostics.insert("kappa_acceptance".into(), f.kappa_acceptance);
                log.diagnostics.insert("rhat_kappa".into(), f.rhat_kappa);
                log.diagnostics.insert("rhat_sigma_nu_sq".into(), f.rhat_sigma_nu_sq);
                log.diagnostics.insert("knots".into(), knots.len() as f64);
                MethodParams::Mpp { fit: f }
            }
            Method::Spd => {
                let region = config.region(train)?;
                let mesh = match config.spd_mesh_nodes {
                    Some(nodes) => {
                        let ext = region.expand(0.1 * region.diameter().max(1e-3));
                        crate::kernels::PiecewiseLinearBasis::new(RegularGrid::with_node_target(&ext, nodes, 0)?)?
                    }
                    None => crate::estimation::spd_default_mesh(&region, train.len())?,
                };
                let f = eb_fit_spd(train, trend, &mesh, &config.spd)?;
                log.objective = Some(f.loglik);
                log.initial_objective = Some(f.initial_loglik);
                log.iterations = f.evals;
                log.converged = f.converged;
                log.diagnostics.insert("mesh_nodes".into(), mesh.grid().len() as f64);
                MethodParams::Spd { params: f.params, mesh: *mesh.grid() }
            }
            Method::Ltk => {
                let basis = WendlandBasis::covering(&config.region(train)?, config.ltk_nodes, 2, WENDLAND_OVERLAP)?;
                let f = ml_fit_ltk(train, trend, &basis, eps, &config.ltk)?;
                log.objective = Some(f.loglik);
                log.initial_objective = Some(f.initial_loglik);
                log.iterations = f.evals;
                log.converged = f.converged;
                log.diagnostics.insert("basis_functions".into(), basis.grid().len() as f64);
                MethodParams::Ltk { params: f.params, basis }
            }
        };
        Self::assemble(params, train, config, log)
    }

    /// Builds a predictor from given parameters without estimating anything.
    pub fn from_params(params: MethodParams, train: &SpatialDataset, config: &FitConfig) -> Result<Self> {
        Self::assemble(params, train, config, FitLog::default())
    }

    fn assemble(params: MethodParams, train: &SpatialDataset, config: &FitConfig, log: FitLog) -> Result<Self> {
        let doc = PredictorDocument {
            format_version: FORMAT_VERSION,
            params,
            config: config.clone(),
            training: train.clone(),
            provenance: Provenance {
                seed: config.seed,
                config_hash: config_hash(config)?,
                software_version: env!("CARGO_PKG_VERSION").to_string(),
            },
            log,
        };
        Self::from_document(doc)
    }

    /// Rebuilds prediction caches from a document.
    pub fn from_document(doc: PredictorDocument) -> Result<Self> {
        if doc.format_version != FORMAT_VERSION {
            return invalid(format!(
                "model file format version {} not supported (expected {FORMAT_VERSION})",
                doc.format_version
            ));
        }
        let train = &doc.training;
        let trend = doc.config.trend;
        let eps = doc.config.sigma_eps_sq;
        let engine: Box<dyn Engine> = match &doc.params {
            MethodParams::Tsk { params } => Box::new(tsk::TskEngine::new(train, trend, params, eps)?),
            MethodParams::Ssp { theta, .. } => Box::new(ssp::SspEngine::new(train, trend, *theta)?),
            MethodParams::Edw { theta } => Box::new(edw::EdwEngine::new(train, *theta)?),
            MethodParams::Frk { params, basis } => Box::new(frk::FrkEngine::new(train, trend, params, basis, eps)?),
            MethodParams::Mpp { fit } => Box::new(mpp::MppEngine::new(train, trend, fit, doc.config.seed)?),
            MethodParams::Spd { params, mesh } => Box::new(gmrf::GmrfEngine::spd(train, trend, params, mesh)?),
            MethodParams::Ltk { params, basis } => Box::new(gmrf::GmrfEngine::ltk(train, trend, params, basis, eps)?),
        };
        Ok(Self { doc, engine })
    }

    pub fn method(&self) -> Method {
        self.doc.params.method()
    }

    pub fn params(&self) -> &MethodParams {
        &self.doc.params
    }

    pub fn document(&self) -> &PredictorDocument {
        &self.doc
    }

    pub fn log(&self) -> &FitLog {
        &self.doc.log
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Means and, for model-based predictors, variances.
    pub fn predict(&self, locs: &[Location]) -> Result<PredictionResult> {
        self.run(locs, true)
    }

    /// Means only; cheaper for large rasters.
    pub fn predict_mean(&self, locs: &[Location]) -> Result<PredictionResult> {
        self.run(locs, false)
    }

    fn run(&self, locs: &[Location], with_variance: bool) -> Result<PredictionResult> {
        for u in locs {
            if !u.lon.is_finite() || !u.lat.is_finite() {
                return invalid(format!("non-finite prediction location ({}, {})", u.lon, u.lat));
            }
        }
        let (mean, variance) = if locs.is_empty() {
            (Vec::new(), (with_variance && self.method().has_variance()).then(Vec::new))
        } else {
            self.engine.predict(locs, with_variance)?
        };
        Ok(PredictionResult { method: self.method(), locations: locs.to_vec(), mean, variance })
    }
}

/// Multiresolution bisquare basis, dropping the finest levels until `r < n`.
fn frk_basis(bbox: &BBox, levels: &[usize], n: usize) -> Result<BisquareBasis> {
    let mut levels = levels.to_vec();
    loop {
        let basis = BisquareBasis::multiresolution(bbox, &levels)?;
        if crate::kernels::Basis::dim(&basis) < n {
            return Ok(basis);
        }
        if levels.len() == 1 {
            return invalid(format!("FRK needs more than {} training points for its coarsest level", basis.centers().len()));
        }
        levels.pop();
    }
}
