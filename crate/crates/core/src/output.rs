//! Result files. Each file is assembled in memory and moved into place
//! with a single rename, so readers never see a partial file.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::detection::RoundDetection;
use crate::error::{HorusError, Result};
use crate::sim::{DiagnosticRow, RoundMetrics, RoundOutcome};

pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const DETECTION_FILE: &str = "detection.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Rounds averaged for the end-of-training accuracies.
pub const FINAL_WINDOW: usize = 10;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| HorusError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HorusError::io(path, e))
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HorusError::Encoding(e.to_string()))?;
    }
    w.into_inner().map_err(|e| HorusError::Encoding(e.to_string()))
}

fn jsonl_line<T: Serialize>(out: &mut String, value: &T) -> Result<()> {
    out.push_str(&serde_json::to_string(value).map_err(|e| HorusError::Encoding(e.to_string()))?);
    out.push('\n');
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub aggregator: String,
    pub attack: String,
    pub rank: usize,
    pub lambda: f64,
    pub rounds: usize,
    pub final_global_accuracy: f64,
    pub final_local_accuracy: f64,
    /// Rounds in which at least one submission was adversarial.
    pub attack_rounds: usize,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_false_positive_rate: f64,
    pub total_payload_bytes: u64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl Summary {
    pub fn from_metrics(cfg: &RunConfig, metrics: &[RoundMetrics]) -> Self {
        let tail = &metrics[metrics.len().saturating_sub(FINAL_WINDOW)..];
        let attacked: Vec<&RoundMetrics> = metrics.iter().filter(|m| !m.poisoned.is_empty()).collect();
        Summary {
            seed: cfg.master_seed,
            aggregator: cfg.aggregator.to_string(),
            attack: serde_json::to_value(cfg.attack.kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default(),
            rank: cfg.rank,
            lambda: cfg.detection.lambda,
            rounds: metrics.len(),
            final_global_accuracy: mean(tail.iter().map(|m| m.global_accuracy)),
            final_local_accuracy: mean(tail.iter().map(|m| m.mean_local_accuracy)),
            attack_rounds: attacked.len(),
            mean_precision: mean(attacked.iter().map(|m| m.precision)),
            mean_recall: mean(attacked.iter().map(|m| m.recall)),
            mean_false_positive_rate: mean(attacked.iter().map(|m| m.false_positive_rate)),
            total_payload_bytes: metrics.iter().map(|m| m.payload_bytes).sum(),
        }
    }
}

#[derive(Serialize)]
struct DetectionRecord<'a> {
    round: u32,
    #[serde(flatten)]
    detection: &'a RoundDetection,
}

/// Collects per-round records and writes every output file at the end.
#[derive(Debug, Default)]
pub struct RunRecorder {
    rounds: String,
    detection: String,
    diagnostics: Vec<DiagnosticRow>,
    metrics: Vec<RoundMetrics>,
    keep_diagnostics: bool,
}

impl RunRecorder {
    pub fn new(keep_diagnostics: bool) -> Self {
        RunRecorder { keep_diagnostics, ..Default::default() }
    }

    pub fn record(&mut self, outcome: &RoundOutcome) -> Result<()> {
        jsonl_line(&mut self.rounds, &outcome.metrics)?;
        if let Some(d) = &outcome.detection {
            jsonl_line(&mut self.detection, &DetectionRecord { round: outcome.metrics.round, detection: d })?;
        }
        if self.keep_diagnostics {
            self.diagnostics.extend(outcome.diagnostics.iter().cloned());
        }
        self.metrics.push(outcome.metrics.clone());
        Ok(())
    }

    pub fn metrics(&self) -> &[RoundMetrics] {
        &self.metrics
    }

    pub fn diagnostics(&self) -> &[DiagnosticRow] {
        &self.diagnostics
    }

    /// Writes all files into `dir` and returns the run summary.
    pub fn finish(&self, cfg: &RunConfig, dir: &Path) -> Result<Summary> {
        std::fs::create_dir_all(dir).map_err(|e| HorusError::io(dir, e))?;
        let summary = Summary::from_metrics(cfg, &self.metrics);
        write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
        write_atomic(&dir.join(ROUNDS_FILE), self.rounds.as_bytes())?;
        write_atomic(&dir.join(DETECTION_FILE), self.detection.as_bytes())?;
        write_atomic(&dir.join(SUMMARY_FILE), &csv_bytes(std::slice::from_ref(&summary))?)?;
        if self.keep_diagnostics {
            write_atomic(&dir.join(DIAGNOSTICS_FILE), &csv_bytes(&self.diagnostics)?)?;
        }
        Ok(summary)
    }
}

/// One row per sweep cell: the axis, its value, then the cell summary.
pub fn sweep_csv(axis: &str, cells: &[(String, Summary)]) -> Result<Vec<u8>> {
    let enc = |e: csv::Error| HorusError::Encoding(e.to_string());
    let summary_header = csv_bytes(&[Summary::from_metrics(&RunConfig::default(), &[])])?;
    let header_line = String::from_utf8_lossy(&summary_header).lines().next().unwrap_or_default().to_owned();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let mut header = vec!["axis".to_owned(), "value".to_owned()];
    header.extend(header_line.split(',').map(str::to_owned));
    w.write_record(&header).map_err(enc)?;
    for (value, summary) in cells {
        w.serialize((axis, value, summary)).map_err(enc)?;
    }
    w.into_inner().map_err(|e| HorusError::Encoding(e.to_string()))
}
