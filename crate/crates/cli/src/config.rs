use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use spb_core::data::{BBox, SimulationConfig, TrendSpec};
use spb_core::evaluation::{CompareConfig, PmccSign, RasterSpec};
use spb_core::predictors::{FitConfig, Method};

/// Everything a command needs. Loaded from TOML or JSON, then overridden by
/// command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Data CSV (`lon,lat,value[,weight]`).
    pub input: Option<PathBuf>,
    /// Fitted model JSON, for `predict`.
    pub model: Option<PathBuf>,
    /// CSV with `lon,lat` columns to predict at.
    pub locations: Option<PathBuf>,
    pub out: PathBuf,
    pub methods: Vec<Method>,
    pub split_fraction: f64,
    /// Master seed; when set it replaces the simulation, split and fit seeds.
    pub seed: Option<u64>,
    pub raster: Option<RasterSpec>,
    pub pmcc_sign: PmccSign,
    pub lag: Option<f64>,
    pub lag_tol: f64,
    /// Knots per side of the exact grid used above the dense simulation limit.
    pub simulation_knots: usize,
    pub simulation: SimulationConfig,
    pub fit: FitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            model: None,
            locations: None,
            out: PathBuf::from("spb-out"),
            methods: Method::ALL.to_vec(),
            split_fraction: 0.2,
            seed: None,
            raster: None,
            pmcc_sign: PmccSign::Paper,
            lag: None,
            lag_tol: 1e-6,
            simulation_knots: 60,
            simulation: SimulationConfig {
                domain: BBox { lon_min: -100.0, lon_max: -90.0, lat_min: 30.0, lat_max: 40.0 },
                n_points: 71,
                beta: vec![375.0, 0.15],
                trend: TrendSpec::Latitude,
                sigma0_sq: 4.0,
                theta: 3.0,
                sigma_xi_sq: 0.5,
                sigma_eps_sq: 5.6062,
                seed: 0,
            },
            fit: FitConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).with_context(|| format!("parsing JSON config {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing TOML config {}", path.display()))?
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            bail!("split fraction {} not in (0, 1)", self.split_fraction);
        }
        if self.methods.is_empty() {
            bail!("no methods selected");
        }
        if let Some(r) = &self.raster {
            r.validate()?;
        }
        self.fit.validate()?;
        Ok(())
    }

    /// Applies the master seed, if any, to every seeded stage.
    pub fn resolve_seeds(&mut self) {
        if let Some(s) = self.seed {
            self.simulation.seed = s;
            self.fit.seed = s;
        }
    }

    pub fn split_seed(&self) -> u64 {
        self.seed.unwrap_or(self.fit.seed)
    }

    pub fn compare_config(&self) -> CompareConfig {
        CompareConfig {
            methods: self.methods.clone(),
            fit: self.fit.clone(),
            raster: self.raster,
            pmcc_sign: self.pmcc_sign,
            lag: self.lag,
            lag_tol: self.lag_tol,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
