use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::meter::{meter, MemoryMethod};
use super::metrics::{pmcc, rste, PmccSign};
use super::raster::RasterSpec;
use crate::data::{HoldoutSplit, Location, SpatialDataset, TrendSpec};
use crate::error::{invalid, Result};
use crate::estimation::ols_beta;
use crate::par;
use crate::predictors::{config_hash, FitConfig, FittedPredictor, Method};

/// Column headers of the comparison table.
pub const REPORT_COLUMNS: [&str; 6] =
    ["Predictor", "RSTE", "PMCC", "Lag-1 Semivariogram", "CPU Time (in minutes)", "Peak Memory Usage (in MB)"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub methods: Vec<Method>,
    pub fit: FitConfig,
    /// Semivariogram raster; `None` covers the split at 1 degree.
    pub raster: Option<RasterSpec>,
    pub pmcc_sign: PmccSign,
    /// Semivariogram lag; `None` uses the raster step.
    pub lag: Option<f64>,
    pub lag_tol: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            fit: FitConfig::default(),
            raster: None,
            pmcc_sign: PmccSign::Paper,
            lag: None,
            lag_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: Method,
    pub rste: Option<f64>,
    /// `None` for predictors without a model-based variance, or on failure.
    pub pmcc: Option<f64>,
    pub lag1_semivariogram: Option<f64>,
    pub cpu_minutes: f64,
    pub peak_memory_mb: Option<f64>,
    pub error: Option<String>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    pub n_train: usize,
    pub n_validation: usize,
    pub fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<MetricRow>,
    pub split: SplitDescriptor,
    pub config: CompareConfig,
    pub config_hash: String,
    pub raster: RasterSpec,
    pub lag: f64,
    pub pmcc_sign: PmccSign,
    pub memory_method: MemoryMethod,
    pub platform: String,
    pub threads: usize,
    pub timestamp_unix: u64,
    pub software_version: String,
}

fn platform() -> String {
    format!("{}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "N/A".to_string(), |x| format!("{x:.digits$}"))
}

impl ComparisonReport {
    pub fn row(&self, method: Method) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// The comparison table as CSV; failed cells read `ERROR`, absent PMCC reads `N/A`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_COLUMNS)?;
        for r in &self.rows {
            let failed = r.error.is_some();
            let cell = |v: Option<f64>, applicable: bool| match (v, applicable) {
                (Some(x), _) => format!("{x:.4}"),
                (None, false) => "N/A".to_string(),
                (None, true) if failed => "ERROR".to_string(),
                (None, true) => "N/A".to_string(),
            };
            w.write_record([
                r.method.tag().to_string(),
                cell(r.rste, true),
                cell(r.pmcc, r.method.has_variance()),
                cell(r.lag1_semivariogram, true),
                format!("{:.4}", r.cpu_minutes),
                fmt_opt(r.peak_memory_mb, 1),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Fits every configured method on the training half, scores it on the
/// validation half and on the raster, and meters each fit-plus-predict job.
/// Methods run one after another; a failing method yields an error row.
pub fn compare(split: &HoldoutSplit, cfg: &CompareConfig) -> Result<ComparisonReport> {
    if cfg.methods.is_empty() {
        return invalid("no methods to compare");
    }
    cfg.fit.validate()?;
    let vlocs = split.validation.locations();
    let vals: Vec<f64> = split.validation.values().iter().copied().collect();
    let data_box = split.train.bbox()?.union(&split.validation.bbox()?);
    let raster = match cfg.raster {
        Some(r) => {
            r.validate()?;
            r
        }
        None => RasterSpec::covering(&data_box),
    };
    let lag = cfg.lag.unwrap_or(raster.step);
    let nodes = raster.nodes();
    let mut fit = cfg.fit.clone();
    let domain = raster.bbox().union(&data_box);
    fit.domain = Some(fit.domain.map_or(domain, |d| d.union(&domain)));

    let mut rows = Vec::with_capacity(cfg.methods.len());
    let mut memory_method = MemoryMethod::Unsupported;
    for &method in &cfg.methods {
        log::info!("comparing {method} on {} training points", split.train.len());
        let (outcome, m) = meter(|| -> Result<_> {
            let p = FittedPredictor::fit(method, &split.train, &fit)?;
            let v = p.predict(&vlocs)?;
            let r = p.predict_mean(&nodes)?;
            Ok((v, r, p.log().warnings.clone()))
        });
        memory_method = m.memory_method;
        let mut row = MetricRow {
            method,
            rste: None,
            pmcc: None,
            lag1_semivariogram: None,
            cpu_minutes: m.cpu_minutes,
            peak_memory_mb: m.peak_memory_mb,
            error: None,
            warnings: Vec::new(),
        };
        match outcome {
            Ok((v, r, warnings)) => {
                row.warnings = warnings;
                let mut errors = Vec::new();
                match rste(&v.mean, &vals) {
                    Ok(x) => row.rste = Some(x),
                    Err(e) => errors.push(format!("RSTE: {e}")),
                }
                if let Some(var) = &v.variance {
                    match pmcc(&v.mean, var, &vals, cfg.pmcc_sign) {
                        Ok(x) => row.pmcc = Some(x),
                        Err(e) => errors.push(format!("PMCC: {e}")),
                    }
                }
                match raster.semivariogram(&r.mean, Some(lag), cfg.lag_tol) {
                    Ok(x) => row.lag1_semivariogram = Some(x),
                    Err(e) => errors.push(format!("semivariogram: {e}")),
                }
                if !errors.is_empty() {
                    row.error = Some(errors.join("; "));
                }
            }
            Err(e) => {
                log::warn!("{method} failed: {e}");
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
    }

    let hash = config_hash(&(cfg, split.seed, split.fraction))?;
    Ok(ComparisonReport {
        rows,
        split: SplitDescriptor {
            n_train: split.train.len(),
            n_validation: split.validation.len(),
            fraction: split.fraction,
            seed: split.seed,
        },
        config: cfg.clone(),
        config_hash: hash,
        raster,
        lag,
        pmcc_sign: cfg.pmcc_sign,
        memory_method,
        platform: platform(),
        threads: par::current_threads(),
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        software_version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

/// OLS trend surface evaluated at `locs`; the covariate-only baseline.
pub fn trend_surface(train: &SpatialDataset, trend: TrendSpec, locs: &[Location]) -> Result<Vec<f64>> {
    let beta = ols_beta(&trend.design(&train.locations()), &train.values())?;
    Ok(locs.iter().map(|u| trend.mean(u, &beta)).collect())
}
