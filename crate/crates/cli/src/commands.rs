use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use spb_core::data::{
    load_csv, save_csv, simulate, simulate_large, split_holdout, CsvSchema, Location, SimulationConfig,
    SpatialDataset, DENSE_SIMULATION_LIMIT,
};
use spb_core::evaluation::{compare, ComparisonReport};
use spb_core::predictors::FittedPredictor;

use crate::config::RunConfig;

#[derive(Debug)]
pub struct SimulateOutputs {
    pub data: PathBuf,
    pub truth: PathBuf,
    pub train: PathBuf,
    pub validation: PathBuf,
    pub n_points: usize,
}

#[derive(Debug)]
pub struct CompareOutputs {
    pub report: ComparisonReport,
    pub csv: PathBuf,
    pub json: PathBuf,
}

#[derive(Serialize)]
struct Truth<'a> {
    simulation: &'a SimulationConfig,
    /// Exact-grid size used above the dense limit, `None` for exact draws.
    knots_per_side: Option<usize>,
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating output directory {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

fn draw(cfg: &RunConfig) -> Result<SpatialDataset> {
    let sim = &cfg.simulation;
    Ok(if sim.n_points > DENSE_SIMULATION_LIMIT {
        simulate_large(sim, cfg.simulation_knots)?
    } else {
        simulate(sim)?
    })
}

fn input_data(cfg: &RunConfig) -> Result<SpatialDataset> {
    let path = cfg.input.as_ref().ok_or_else(|| anyhow!("no input data: pass --input or set `input`"))?;
    load_csv(path, &CsvSchema::default()).with_context(|| format!("loading {}", path.display()))
}

/// Writes `data.csv`, its hold-out halves `train.csv` / `validation.csv`, and
/// `truth.json` with the generating parameters.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateOutputs> {
    let dir = out_dir(cfg)?;
    let data = draw(cfg)?;
    let split = split_holdout(&data, cfg.split_fraction, cfg.split_seed())?;
    let out = SimulateOutputs {
        data: dir.join("data.csv"),
        truth: dir.join("truth.json"),
        train: dir.join("train.csv"),
        validation: dir.join("validation.csv"),
        n_points: data.len(),
    };
    save_csv(&data, &out.data)?;
    save_csv(&split.train, &out.train)?;
    save_csv(&split.validation, &out.validation)?;
    let knots = (cfg.simulation.n_points > DENSE_SIMULATION_LIMIT).then_some(cfg.simulation_knots);
    let truth = Truth { simulation: &cfg.simulation, knots_per_side: knots };
    fs::write(&out.truth, serde_json::to_string_pretty(&truth)?)?;
    Ok(out)
}

/// Fits every selected method on the full input; writes `model_<TAG>.json`
/// and `fitlog_<TAG>.json` for each.
pub fn cmd_fit(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = input_data(cfg)?;
    let dir = out_dir(cfg)?;
    let mut fit = cfg.fit.clone();
    if let Some(r) = &cfg.raster {
        let b = r.bbox();
        fit.domain = Some(fit.domain.map_or(b, |d| d.union(&b)));
    }
    let mut written = Vec::new();
    for &method in &cfg.methods {
        let p = FittedPredictor::fit(method, &data, &fit).with_context(|| format!("fitting {method}"))?;
        for w in &p.log().warnings {
            log::warn!("{method}: {w}");
        }
        let model = dir.join(format!("model_{}.json", method.tag()));
        p.save(&model)?;
        let log_path = dir.join(format!("fitlog_{}.json", method.tag()));
        fs::write(&log_path, serde_json::to_string_pretty(p.log())?)?;
        written.push(model);
        written.push(log_path);
    }
    Ok(written)
}

/// Reads a CSV with `lon` and `lat` columns; other columns are ignored.
pub fn load_locations(path: &Path) -> Result<Vec<Location>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(ilon), Some(ilat)) = (col("lon"), col("lat")) else {
        bail!("{} needs `lon` and `lat` columns", path.display());
    };
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("");
            s.parse().map_err(|_| anyhow!("{} row {}: `{s}` is not a number", path.display(), row + 1))
        };
        out.push(Location::new(num(ilon)?, num(ilat)?)?);
    }
    Ok(out)
}

/// Loads a model file and writes `predictions_<TAG>.csv` for `locations`
/// and `raster_<TAG>.csv` for the raster, whichever are configured.
pub fn cmd_predict(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let model = cfg.model.as_ref().ok_or_else(|| anyhow!("no model: pass --model"))?;
    let p = FittedPredictor::load(model).with_context(|| format!("loading {}", model.display()))?;
    if cfg.locations.is_none() && cfg.raster.is_none() {
        bail!("nothing to predict: pass --locations and/or --raster");
    }
    let dir = out_dir(cfg)?;
    let tag = p.method().tag();
    let mut written = Vec::new();
    if let Some(path) = &cfg.locations {
        let res = p.predict(&load_locations(path)?)?;
        let dest = dir.join(format!("predictions_{tag}.csv"));
        res.save_csv(&dest)?;
        written.push(dest);
    }
    if let Some(r) = &cfg.raster {
        let res = p.predict(&r.nodes())?;
        let dest = dir.join(format!("raster_{tag}.csv"));
        res.save_csv(&dest)?;
        written.push(dest);
    }
    Ok(written)
}

/// Splits the input (or a simulated dataset when no input is given), runs the
/// comparison and writes `report.csv` and `report.json`.
pub fn cmd_compare(cfg: &RunConfig) -> Result<CompareOutputs> {
    let data = match &cfg.input {
        Some(_) => input_data(cfg)?,
        None => draw(cfg)?,
    };
    let split = split_holdout(&data, cfg.split_fraction, cfg.split_seed())?;
    let report = compare(&split, &cfg.compare_config())?;
    let dir = out_dir(cfg)?;
    let out = CompareOutputs { report, csv: dir.join("report.csv"), json: dir.join("report.json") };
    out.report.save_csv(&out.csv)?;
    out.report.save_json(&out.json)?;
    for row in &out.report.rows {
        if let Some(e) = &row.error {
            log::warn!("{}: {e}", row.method);
        }
    }
    Ok(out)
}
