//! Run configuration, read from TOML.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregatorKind;
use crate::attacks::{AttackConfig, AttackKind};
use crate::detection::DetectionConfig;
use crate::error::{HorusError, Result};
use crate::sim::data::TaskConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientsConfig {
    pub count: usize,
    /// Hidden width of each architecture; `arch_id` indexes this list.
    pub hidden_widths: Vec<usize>,
    /// Per-client architecture. Defaults to contiguous equal blocks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<Vec<u32>>,
    /// Per-client participation rate. Defaults to one draw per client
    /// from `participation_choices`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub participation: Option<Vec<f64>>,
    pub participation_choices: Vec<f64>,
    /// Attackers take part in every round regardless of their rate.
    pub attackers_always_participate: bool,
}

impl Default for ClientsConfig {
    fn default() -> Self {
        ClientsConfig {
            count: 10,
            hidden_widths: vec![32, 48],
            arch: None,
            participation: None,
            participation_choices: vec![1.0, 0.75, 0.5],
            attackers_always_participate: true,
        }
    }
}

impl ClientsConfig {
    pub fn arch_of(&self, client: usize) -> u32 {
        match &self.arch {
            Some(list) => list[client],
            None => ((client * self.hidden_widths.len()) / self.count) as u32,
        }
    }

    fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HorusError::Config(m));
        if self.count < 2 {
            return err(format!("clients.count = {} must be at least 2", self.count));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return err("clients.hidden_widths must be a non-empty list of positive widths".into());
        }
        if let Some(arch) = &self.arch {
            if arch.len() != self.count {
                return err(format!("clients.arch has {} entries, expected {}", arch.len(), self.count));
            }
            if let Some(bad) = arch.iter().find(|a| **a as usize >= self.hidden_widths.len()) {
                return err(format!("clients.arch refers to architecture {bad}, which has no hidden width"));
            }
        }
        let in_range = |p: &f64| *p > 0.0 && *p <= 1.0;
        if let Some(rates) = &self.participation {
            if rates.len() != self.count {
                return err(format!("clients.participation has {} entries, expected {}", rates.len(), self.count));
            }
            if let Some(bad) = rates.iter().find(|p| !in_range(p)) {
                return err(format!("clients.participation value {bad} outside (0, 1]"));
            }
        } else if self.participation_choices.is_empty() || !self.participation_choices.iter().all(in_range) {
            return err("clients.participation_choices must be non-empty values in (0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig { epochs: 10, lr: 0.01, batch: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub rounds: u32,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub rank: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Per-step gradient norm cap for local training; `inf` disables it.
    pub clip_norm: f64,
    pub task: TaskConfig,
    pub clients: ClientsConfig,
    pub warmup: WarmupConfig,
    pub aggregator: AggregatorKind,
    pub detection: DetectionConfig,
    pub attack: AttackConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            rounds: 200,
            master_seed: 0,
            output_dir: PathBuf::from("out"),
            rank: 8,
            lr: 0.5,
            epochs: 10,
            batch: 256,
            clip_norm: 5.0,
            task: TaskConfig::default(),
            clients: ClientsConfig::default(),
            warmup: WarmupConfig::default(),
            aggregator: AggregatorKind::Horus,
            detection: DetectionConfig::default(),
            attack: AttackConfig { attackers: BTreeSet::from([4, 9]), ..AttackConfig::default() },
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HorusError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HorusError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            HorusError::Config(m) => HorusError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HorusError::Encoding(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HorusError::Config(m));
        if self.rounds == 0 {
            return err("rounds must be at least 1".into());
        }
        if self.rank == 0 {
            return err("rank must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return err(format!("lr = {} must be non-negative and finite", self.lr));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return err(format!("clip_norm = {} must be positive", self.clip_norm));
        }
        if self.batch == 0 || self.warmup.batch == 0 {
            return err("batch and warmup.batch must be positive".into());
        }
        if !(self.warmup.lr >= 0.0 && self.warmup.lr.is_finite()) {
            return err(format!("warmup.lr = {} must be non-negative and finite", self.warmup.lr));
        }
        self.task.validate()?;
        self.clients.validate()?;
        self.detection.validate()?;
        self.aggregator.validate(self.clients.count)?;
        let attack = &self.attack;
        if attack.kind == AttackKind::None {
            if let Some(bad) = attack.attackers.iter().find(|c| **c as usize >= self.clients.count) {
                return err(format!("attack.attackers contains {bad}, but only {} clients exist", self.clients.count));
            }
        } else {
            attack.validate(self.clients.count)?;
        }
        Ok(())
    }
}
