//! Command implementations behind the `horus` binary.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::aggregation::AggregatorKind;
use crate::config::RunConfig;
use crate::error::{HorusError, Result};
use crate::output::{sweep_csv, write_atomic, RunRecorder, Summary, SWEEP_FILE};
use crate::sim::Simulation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda,
    Rank,
    Aggregator,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Rank => "rank",
            SweepAxis::Aggregator => "aggregator",
        }
    }

    /// Returns `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let bad = |e: &dyn std::fmt::Display| HorusError::Config(format!("sweep value '{value}' for {}: {e}", self.as_str()));
        let mut cfg = base.clone();
        match self {
            SweepAxis::Lambda => cfg.detection.lambda = value.parse::<f64>().map_err(|e| bad(&e))?,
            SweepAxis::Rank => cfg.rank = value.parse::<usize>().map_err(|e| bad(&e))?,
            SweepAxis::Aggregator => {
                cfg.aggregator = AggregatorKind::from_name(value, cfg.attack.attackers.len(), cfg.clients.count)?
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for SweepAxis {
    type Err = HorusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "rank" => Ok(SweepAxis::Rank),
            "aggregator" => Ok(SweepAxis::Aggregator),
            other => Err(HorusError::Config(format!("unknown sweep axis '{other}' (lambda, rank, aggregator)"))),
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Overrides {
    pub fn load(&self, path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(path)?;
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        Ok(cfg)
    }
}

/// Runs one simulation and writes its outputs under `cfg.output_dir`.
pub fn execute(cfg: &RunConfig, diagnostics: bool) -> Result<Summary> {
    let mut sim = Simulation::new(cfg.clone())?.with_diagnostics(diagnostics);
    let mut recorder = RunRecorder::new(diagnostics);
    sim.run(|o| recorder.record(o))?;
    recorder.finish(cfg, &cfg.output_dir)
}

pub fn cmd_run(config: &Path, overrides: &Overrides) -> Result<Summary> {
    execute(&overrides.load(config)?, false)
}

pub fn cmd_diagnose(config: &Path, overrides: &Overrides) -> Result<Summary> {
    execute(&overrides.load(config)?, true)
}

/// One full run per value in `<output_dir>/<axis>=<value>`, joined in
/// `sweep.csv`. The table is rewritten after every cell.
pub fn cmd_sweep(config: &Path, axis: SweepAxis, values: &[String], overrides: &Overrides) -> Result<Vec<(String, Summary)>> {
    let base = overrides.load(config)?;
    if values.is_empty() {
        return Err(HorusError::Config("sweep needs at least one value".into()));
    }
    let cells: Vec<RunConfig> = values
        .iter()
        .map(|v| {
            let mut cfg = axis.apply(&base, v)?;
            cfg.output_dir = base.output_dir.join(format!("{}={v}", axis.as_str()));
            Ok(cfg)
        })
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(&base.output_dir).map_err(|e| HorusError::io(&base.output_dir, e))?;
    let mut done = Vec::new();
    for (value, cfg) in values.iter().zip(&cells) {
        log::info!("sweep {}={value}", axis.as_str());
        let summary = execute(cfg, false)?;
        done.push((value.clone(), summary));
        write_atomic(&base.output_dir.join(SWEEP_FILE), &sweep_csv(axis.as_str(), &done)?)?;
    }
    Ok(done)
}
