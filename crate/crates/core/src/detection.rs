//! Heterogeneity-oblivious poisoning scores.
//!
//! Each client is summarised by the singular-value spectrum of its LoRA-A
//! factors only: spectral entropy and top-k energy ratio per layer. Scores are
//! absolute deviations from the round's population statistics, so the
//! procedure never compares matrices of different shapes directly.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HorusError, Result};
use crate::lora::{ClientId, ClientUpdate, LayerId};
use crate::spectral::{mean_std, percentile, singular_values, spectral_entropy, topk_energy_ratio};

/// Standard deviations at or below this carry no entropy signal.
pub const ENTROPY_STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerFeatures {
    pub entropy: f64,
    pub ratio: f64,
    pub k_used: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SpectralFeatures {
    pub layers: BTreeMap<LayerId, LayerFeatures>,
}

/// Which LoRA factor feeds the spectral features. Only `LoraA` is used by the
/// defence; `LoraB` exists for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    #[default]
    LoraA,
    LoraB,
}

pub fn client_features(u: &ClientUpdate, k: usize) -> Result<SpectralFeatures> {
    client_features_from(u, k, FeatureSource::LoraA)
}

pub fn client_features_from(u: &ClientUpdate, k: usize, source: FeatureSource) -> Result<SpectralFeatures> {
    if k == 0 {
        return Err(HorusError::InvalidInput("top-k must be at least 1".into()));
    }
    let mut layers = BTreeMap::new();
    for (layer, pair) in &u.layers {
        let m = match source {
            FeatureSource::LoraA => pair.a(),
            FeatureSource::LoraB => pair.b(),
        };
        let s = singular_values(m)?;
        layers.insert(
            *layer,
            LayerFeatures {
                entropy: spectral_entropy(&s),
                ratio: topk_energy_ratio(&s, k),
                k_used: k.min(s.nominal_rank()),
            },
        );
    }
    Ok(SpectralFeatures { layers })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HopsScore {
    pub client_id: ClientId,
    /// Mean of the per-layer sub-scores.
    pub score: f64,
    pub layer_scores: BTreeMap<LayerId, f64>,
}

/// Per-client scores against round-wise statistics, computed layer by layer:
/// `λ·|(1−R) − mean(1−R)| + (1−λ)·|(H − mean H) / std H|`, with the entropy
/// term dropped when the population std is below [`ENTROPY_STD_FLOOR`].
pub fn hops_scores(features: &BTreeMap<ClientId, SpectralFeatures>, lambda: f64) -> Result<BTreeMap<ClientId, HopsScore>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(HorusError::InvalidInput(format!("lambda {lambda} outside [0, 1]")));
    }
    if features.len() < 2 {
        return Err(HorusError::InvalidInput(format!(
            "round statistics need at least 2 clients, got {}",
            features.len()
        )));
    }
    let layers: BTreeSet<LayerId> = features.values().flat_map(|f| f.layers.keys().copied()).collect();

    let mut per_client: BTreeMap<ClientId, BTreeMap<LayerId, f64>> = BTreeMap::new();
    for layer in layers {
        let rows: Vec<(ClientId, LayerFeatures)> = features
            .iter()
            .map(|(c, f)| {
                f.layers
                    .get(&layer)
                    .map(|lf| (*c, *lf))
                    .ok_or_else(|| HorusError::InvalidInput(format!("client {c} lacks features for {layer}")))
            })
            .collect::<Result<_>>()?;
        let residual: Vec<f64> = rows.iter().map(|(_, f)| 1.0 - f.ratio).collect();
        let entropy: Vec<f64> = rows.iter().map(|(_, f)| f.entropy).collect();
        let (mu_r, _) = mean_std(&residual);
        let (mu_h, sigma_h) = mean_std(&entropy);
        for ((client, _), (res, h)) in rows.iter().zip(residual.iter().zip(&entropy)) {
            let energy_term = (res - mu_r).abs();
            let entropy_term = if sigma_h <= ENTROPY_STD_FLOOR {
                0.0
            } else {
                ((h - mu_h) / sigma_h).abs()
            };
            let sub = lambda * energy_term + (1.0 - lambda) * entropy_term;
            per_client.entry(*client).or_default().insert(layer, sub);
        }
    }

    Ok(per_client
        .into_iter()
        .map(|(client_id, layer_scores)| {
            let score = layer_scores.values().sum::<f64>() / layer_scores.len() as f64;
            (
                client_id,
                HopsScore {
                    client_id,
                    score,
                    layer_scores,
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMode {
    /// Flag scores strictly above the p-th percentile of the round.
    Percentile(f64),
    /// Flag the m highest scores.
    TopM(usize),
}

impl Default for DetectionMode {
    fn default() -> Self {
        DetectionMode::Percentile(95.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundDetection {
    pub scores: BTreeMap<ClientId, HopsScore>,
    pub features: BTreeMap<ClientId, SpectralFeatures>,
    pub threshold: f64,
    pub flagged: BTreeSet<ClientId>,
    pub mode: DetectionMode,
    /// Set when the round had too few clients to score.
    pub skipped: bool,
}

impl RoundDetection {
    pub fn skipped(features: BTreeMap<ClientId, SpectralFeatures>, mode: DetectionMode) -> Self {
        RoundDetection {
            scores: BTreeMap::new(),
            features,
            threshold: f64::INFINITY,
            flagged: BTreeSet::new(),
            mode,
            skipped: true,
        }
    }
}

pub fn flag_clients(scores: &BTreeMap<ClientId, HopsScore>, mode: DetectionMode) -> Result<RoundDetection> {
    if scores.is_empty() {
        return Err(HorusError::InvalidInput("no scores to threshold".into()));
    }
    let (threshold, flagged) = match mode {
        DetectionMode::Percentile(p) => {
            let values: Vec<f64> = scores.values().map(|s| s.score).collect();
            let theta = percentile(&values, p)?;
            let flagged = scores.values().filter(|s| s.score > theta).map(|s| s.client_id).collect();
            (theta, flagged)
        }
        DetectionMode::TopM(m) => {
            let mut ranked: Vec<&HopsScore> = scores.values().collect();
            ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.client_id.cmp(&b.client_id)));
            let take = m.min(ranked.len());
            let theta = ranked.get(take).map_or(0.0, |s| s.score);
            (theta, ranked[..take].iter().map(|s| s.client_id).collect())
        }
    };
    Ok(RoundDetection {
        scores: scores.clone(),
        features: BTreeMap::new(),
        threshold,
        flagged,
        mode,
        skipped: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionConfig {
    pub lambda: f64,
    pub k: usize,
    pub mode: DetectionMode,
    #[serde(default)]
    pub source: FeatureSource,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            lambda: 0.5,
            k: 5,
            mode: DetectionMode::default(),
            source: FeatureSource::LoraA,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(HorusError::Config(format!("detection.lambda = {} outside [0, 1]", self.lambda)));
        }
        if self.k == 0 {
            return Err(HorusError::Config("detection.k must be at least 1".into()));
        }
        if let DetectionMode::Percentile(p) = self.mode {
            if !(0.0..=100.0).contains(&p) {
                return Err(HorusError::Config(format!("detection.mode.percentile = {p} outside [0, 100]")));
            }
        }
        Ok(())
    }
}

/// Full detection pass over one round of submissions.
pub fn detect(updates: &BTreeMap<ClientId, ClientUpdate>, cfg: &DetectionConfig) -> Result<RoundDetection> {
    let features: BTreeMap<ClientId, SpectralFeatures> = updates
        .par_iter()
        .map(|(c, u)| client_features_from(u, cfg.k, cfg.source).map(|f| (*c, f)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();
    if features.len() < 2 {
        log::info!("detection skipped: {} participating client(s)", features.len());
        return Ok(RoundDetection::skipped(features, cfg.mode));
    }
    let scores = hops_scores(&features, cfg.lambda)?;
    let mut detection = flag_clients(&scores, cfg.mode)?;
    detection.features = features;
    Ok(detection)
}
