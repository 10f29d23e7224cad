//! Command-line driver: simulate data, fit and apply predictors, and run the
//! hold-out comparison.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use spb_core::evaluation::{PmccSign, RasterSpec};
use spb_core::predictors::Method;

pub use commands::{cmd_compare, cmd_fit, cmd_predict, cmd_simulate, load_locations, CompareOutputs, SimulateOutputs};
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "spb", version, about = "Spatial prediction benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a dataset from the spatial mixed effects model.
    Simulate,
    /// Fit each selected method on the whole input and write its model file.
    Fit,
    /// Predict from a model file at given locations and/or on a raster.
    Predict,
    /// Hold-out comparison of the selected methods.
    Compare,
    /// Print the default configuration as TOML.
    ShowDefaults,
}

#[derive(Debug, Default, clap::Args)]
pub struct Flags {
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Comma-separated predictor tags, e.g. TSK,FRK.
    #[arg(long, global = true, value_name = "TAG[,TAG...]")]
    pub method: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub split_fraction: Option<f64>,
    /// Prediction raster as "lon0,lat0,lon1,lat1,step".
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub raster: Option<String>,
    /// Sign of the log-variance term in PMCC: paper or score.
    #[arg(long, global = true)]
    pub pmcc_sign: Option<String>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Data CSV (lon,lat,value[,weight]).
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Model JSON written by `fit`.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// CSV of lon,lat locations to predict at.
    #[arg(long, global = true)]
    pub locations: Option<PathBuf>,
}

impl Flags {
    /// Loads the config file (or defaults) and applies flag overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(m) = &self.method {
            cfg.methods = Method::parse_list(m)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(f) = self.split_fraction {
            cfg.split_fraction = f;
        }
        if let Some(r) = &self.raster {
            cfg.raster = Some(r.parse::<RasterSpec>()?);
        }
        if let Some(s) = &self.pmcc_sign {
            cfg.pmcc_sign = s.parse::<PmccSign>()?;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(p) = &self.input {
            cfg.input = Some(p.clone());
        }
        if let Some(p) = &self.model {
            cfg.model = Some(p.clone());
        }
        if let Some(p) = &self.locations {
            cfg.locations = Some(p.clone());
        }
        cfg.resolve_seeds();
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Caps the worker pool from `SPB_THREADS` when set to a positive integer.
pub fn init_threads_from_env() -> Option<usize> {
    let n: usize = std::env::var("SPB_THREADS").ok()?.trim().parse().ok().filter(|n| *n > 0)?;
    spb_core::par::init_threads(n);
    Some(n)
}

pub fn run(cli: &Cli) -> Result<()> {
    match cli.command {
        Command::ShowDefaults => {
            print!("{}", RunConfig::default().to_toml()?);
            Ok(())
        }
        Command::Simulate => {
            let out = cmd_simulate(&cli.flags.resolve()?)?;
            println!("wrote {} ({} points)", out.data.display(), out.n_points);
            Ok(())
        }
        Command::Fit => {
            for p in cmd_fit(&cli.flags.resolve()?)? {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Predict => {
            for p in cmd_predict(&cli.flags.resolve()?)? {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Compare => {
            let out = cmd_compare(&cli.flags.resolve()?)?;
            print!("{}", out.report.to_csv_string()?);
            eprintln!("wrote {} and {}", out.csv.display(), out.json.display());
            Ok(())
        }
    }
}
