//! Poisoning attacks run by the colluding attacker cohort.
//!
//! Model-poisoning attacks work on the flattened, globally padded LoRA vector
//! (both layers, `A` then `B`) together with a validity mask, so attackers of
//! different architectures can pool statistics. Per-coordinate statistics
//! only use the vectors that cover the coordinate; distances are taken over
//! the entries both operands cover.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HorusError, Result};
use crate::lora::{pad_to_global, ClientId, ClientUpdate, FlatLayout, LayerShapes};
use crate::rng;
use crate::spectral::inverse_normal_cdf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    LabelFlip,
    Lie,
    MinMax,
    MinSum,
    FangTrimmed,
}

impl AttackKind {
    pub fn is_model_poisoning(self) -> bool {
        matches!(self, AttackKind::Lie | AttackKind::MinMax | AttackKind::MinSum | AttackKind::FangTrimmed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationDirection {
    /// `-σ / ‖σ‖` over the coordinate standard deviations.
    #[default]
    NegStd,
    /// `-μ / ‖μ‖`, pushing against the mean update.
    InverseUnit,
}

/// Which honest updates the attackers get to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackerKnowledge {
    /// Only the cohort's own honestly trained updates.
    #[default]
    Cohort,
    /// Every participant's honest update.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default)]
    pub kind: AttackKind,
    #[serde(default = "default_start_round")]
    pub start_round: u32,
    #[serde(default)]
    pub attackers: BTreeSet<ClientId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_override: Option<f64>,
    #[serde(default = "default_gamma_init")]
    pub gamma_init: f64,
    #[serde(default = "default_search_iters")]
    pub search_iters: usize,
    #[serde(default)]
    pub direction: PerturbationDirection,
    #[serde(default)]
    pub knowledge: AttackerKnowledge,
}

fn default_start_round() -> u32 {
    20
}

fn default_gamma_init() -> f64 {
    1.0
}

fn default_search_iters() -> usize {
    20
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::None,
            start_round: default_start_round(),
            attackers: BTreeSet::new(),
            z_override: None,
            gamma_init: default_gamma_init(),
            search_iters: default_search_iters(),
            direction: PerturbationDirection::default(),
            knowledge: AttackerKnowledge::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, clients: usize) -> Result<()> {
        if self.start_round < 1 {
            return Err(HorusError::Config("attack.start_round must be at least 1".into()));
        }
        if let Some(bad) = self.attackers.iter().find(|c| **c as usize >= clients) {
            return Err(HorusError::Config(format!(
                "attack.attackers contains {bad}, but only {clients} clients exist"
            )));
        }
        if self.kind != AttackKind::None && self.attackers.is_empty() {
            return Err(HorusError::Config("attack.attackers is empty for an active attack".into()));
        }
        if !(self.gamma_init > 0.0 && self.gamma_init.is_finite()) {
            return Err(HorusError::Config("attack.gamma_init must be positive".into()));
        }
        if let Some(z) = self.z_override {
            if !z.is_finite() {
                return Err(HorusError::Config("attack.z_override must be finite".into()));
            }
        }
        Ok(())
    }

    /// True once the attack is live in `round`.
    pub fn active(&self, round: u32) -> bool {
        self.kind != AttackKind::None && round >= self.start_round
    }
}

/// `y → C - 1 - y`.
pub fn flip_labels(labels: &[usize], num_classes: usize) -> Vec<usize> {
    labels.iter().map(|y| num_classes - 1 - y).collect()
}

/// A flattened update as seen by the attackers.
#[derive(Debug, Clone, PartialEq)]
pub struct Observed {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Observed {
    pub fn dense(values: Vec<f64>) -> Self {
        let mask = vec![true; values.len()];
        Observed { values, mask }
    }
}

/// Per-coordinate mean and sample standard deviation over covering vectors.
/// Coordinates covered fewer than twice have zero spread.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn coordinate_stats(benign: &[Observed]) -> Result<CoordinateStats> {
    let len = benign
        .first()
        .map(|b| b.values.len())
        .ok_or_else(|| HorusError::InvalidInput("no benign vectors".into()))?;
    if benign.iter().any(|b| b.values.len() != len || b.mask.len() != len) {
        return Err(HorusError::InvalidInput("benign vectors differ in length".into()));
    }
    let mut mean = vec![0.0; len];
    let mut std = vec![0.0; len];
    for j in 0..len {
        let (mut n, mut sum) = (0usize, 0.0);
        for b in benign.iter().filter(|b| b.mask[j]) {
            n += 1;
            sum += b.values[j];
        }
        if n == 0 {
            continue;
        }
        let mu = sum / n as f64;
        mean[j] = mu;
        if n >= 2 {
            let ss: f64 = benign.iter().filter(|b| b.mask[j]).map(|b| (b.values[j] - mu).powi(2)).sum();
            std[j] = (ss / (n - 1) as f64).sqrt();
        }
    }
    Ok(CoordinateStats { mean, std })
}

fn require_cohort(benign: &[Observed]) -> Result<()> {
    if benign.len() < 2 {
        return Err(HorusError::InvalidInput(format!(
            "attack needs at least 2 benign-style updates, got {}",
            benign.len()
        )));
    }
    Ok(())
}

/// Default LIE multiplier `Φ⁻¹((n − m − s) / (n − m))` with
/// `s = ⌊n/2⌋ + 1 − m`; `None` when it is undefined.
pub fn lie_z(n: usize, m: usize) -> Option<f64> {
    let s = (n / 2 + 1) as i64 - m as i64;
    let honest = n as i64 - m as i64;
    if s <= 0 || honest <= 0 || honest - s <= 0 {
        return None;
    }
    inverse_normal_cdf((honest - s) as f64 / honest as f64).ok()
}

/// `μ + z·σ` coordinate-wise; every attacker submits this same vector.
pub fn lie_attack(benign: &[Observed], n: usize, m: usize, z_override: Option<f64>) -> Result<Vec<f64>> {
    require_cohort(benign)?;
    let z = match z_override {
        Some(z) => z,
        None => lie_z(n, m).ok_or_else(|| {
            HorusError::Config(format!("LIE multiplier undefined for n = {n}, m = {m}; set attack.z_override"))
        })?,
    };
    let stats = coordinate_stats(benign)?;
    Ok(stats.mean.iter().zip(&stats.std).map(|(mu, sd)| mu + z * sd).collect())
}

/// Result of a γ line search.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledPerturbation {
    pub vector: Vec<f64>,
    pub gamma: f64,
}

fn distance_sq(x: &[f64], b: &Observed) -> f64 {
    x.iter()
        .zip(&b.values)
        .zip(&b.mask)
        .filter(|(_, m)| **m)
        .map(|((u, v), _)| (u - v).powi(2))
        .sum()
}

fn pair_distance_sq(a: &Observed, b: &Observed) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .zip(a.mask.iter().zip(&b.mask))
        .filter(|(_, (ma, mb))| **ma && **mb)
        .map(|((u, v), _)| (u - v).powi(2))
        .sum()
}

fn direction(stats: &CoordinateStats, kind: PerturbationDirection) -> Vec<f64> {
    let raw = match kind {
        PerturbationDirection::NegStd => &stats.std,
        PerturbationDirection::InverseUnit => &stats.mean,
    };
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|v| -v / norm).collect()
}

/// Which aggregate constraint the malicious point must respect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceConstraint {
    /// `max_c ‖x − b_c‖ ≤ max_{c,c'} ‖b_c − b_c'‖`.
    MinMax,
    /// `Σ_c ‖x − b_c‖² ≤ max_{c'} Σ_c ‖b_c' − b_c‖²`.
    MinSum,
}

impl DistanceConstraint {
    /// `(value at x, bound)`, both in squared-distance units.
    pub fn evaluate(self, x: &[f64], benign: &[Observed]) -> (f64, f64) {
        match self {
            DistanceConstraint::MinMax => {
                let value = benign.iter().map(|b| distance_sq(x, b)).fold(0.0, f64::max);
                let mut bound: f64 = 0.0;
                for (i, a) in benign.iter().enumerate() {
                    for b in &benign[i + 1..] {
                        bound = bound.max(pair_distance_sq(a, b));
                    }
                }
                (value, bound)
            }
            DistanceConstraint::MinSum => {
                let value = benign.iter().map(|b| distance_sq(x, b)).sum();
                let bound = benign
                    .iter()
                    .map(|a| benign.iter().map(|b| pair_distance_sq(a, b)).sum::<f64>())
                    .fold(0.0, f64::max);
                (value, bound)
            }
        }
    }
}

/// Largest `γ` found by doubling then bisection such that `μ + γ·p`
/// satisfies `constraint`.
pub fn scaled_attack(
    benign: &[Observed],
    constraint: DistanceConstraint,
    dir: PerturbationDirection,
    gamma_init: f64,
    iters: usize,
) -> Result<ScaledPerturbation> {
    require_cohort(benign)?;
    if !(gamma_init > 0.0 && gamma_init.is_finite()) {
        return Err(HorusError::InvalidInput("gamma_init must be positive".into()));
    }
    let stats = coordinate_stats(benign)?;
    let p = direction(&stats, dir);
    let at = |gamma: f64| -> Vec<f64> { stats.mean.iter().zip(&p).map(|(m, d)| m + gamma * d).collect() };
    let (_, bound) = constraint.evaluate(&stats.mean, benign);
    let feasible = |gamma: f64| constraint.evaluate(&at(gamma), benign).0 <= bound;

    if !feasible(0.0) {
        return Err(HorusError::Invariant("benign mean violates the attack constraint".into()));
    }
    if p.iter().all(|v| *v == 0.0) {
        return Ok(ScaledPerturbation { vector: stats.mean, gamma: 0.0 });
    }
    let cap = gamma_init * 2f64.powi(30);
    let (mut lo, mut hi) = (0.0, gamma_init);
    while feasible(hi) {
        lo = hi;
        if hi >= cap {
            return Ok(ScaledPerturbation { vector: at(hi), gamma: hi });
        }
        hi *= 2.0;
    }
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(ScaledPerturbation { vector: at(lo), gamma: lo })
}

pub fn min_max_attack(benign: &[Observed], dir: PerturbationDirection, gamma_init: f64, iters: usize) -> Result<ScaledPerturbation> {
    scaled_attack(benign, DistanceConstraint::MinMax, dir, gamma_init, iters)
}

pub fn min_sum_attack(benign: &[Observed], dir: PerturbationDirection, gamma_init: f64, iters: usize) -> Result<ScaledPerturbation> {
    scaled_attack(benign, DistanceConstraint::MinSum, dir, gamma_init, iters)
}

/// Per coordinate, a uniform draw 3–4 standard deviations against the sign
/// of the benign mean (`sign(0) = +`).
pub fn fang_trimmed_attack<R: Rng + ?Sized>(benign: &[Observed], rng: &mut R) -> Result<Vec<f64>> {
    require_cohort(benign)?;
    let stats = coordinate_stats(benign)?;
    Ok(stats
        .mean
        .iter()
        .zip(&stats.std)
        .map(|(mu, sd)| {
            let u: f64 = rng.random();
            let offset = sd * (3.0 + u);
            if *mu >= 0.0 {
                mu - offset
            } else {
                mu + offset
            }
        })
        .collect())
}

/// Replaces the attackers' honest submissions with crafted ones for this
/// round. Benign submissions are never modified. Returns the ids whose
/// submissions were replaced.
pub fn poison_submissions(
    cfg: &AttackConfig,
    round: u32,
    submissions: &mut BTreeMap<ClientId, ClientUpdate>,
    rank: usize,
    dims: &LayerShapes,
    seed: u64,
) -> Result<BTreeSet<ClientId>> {
    if !cfg.active(round) || !cfg.kind.is_model_poisoning() {
        return Ok(BTreeSet::new());
    }
    let present: Vec<ClientId> = submissions.keys().copied().filter(|c| cfg.attackers.contains(c)).collect();
    if present.is_empty() {
        return Ok(BTreeSet::new());
    }
    let layout = FlatLayout::new(rank, dims.clone());
    let visible: Vec<ClientId> = match cfg.knowledge {
        AttackerKnowledge::Cohort => present.clone(),
        AttackerKnowledge::Full => submissions.keys().copied().collect(),
    };
    let observed: Vec<Observed> = visible
        .iter()
        .map(|c| {
            let padded = pad_to_global(&submissions[c], dims)?;
            let (values, mask) = layout.flatten(&padded);
            Ok(Observed { values, mask })
        })
        .collect::<Result<_>>()?;
    if observed.len() < 2 {
        log::info!("round {round}: attacker cohort sees {} update(s); submitting honestly", observed.len());
        return Ok(BTreeSet::new());
    }
    let n = submissions.len();
    let m = present.len();
    let shared = match cfg.kind {
        AttackKind::Lie => Some(lie_attack(&observed, n, m, cfg.z_override)?),
        AttackKind::MinMax => Some(min_max_attack(&observed, cfg.direction, cfg.gamma_init, cfg.search_iters)?.vector),
        AttackKind::MinSum => Some(min_sum_attack(&observed, cfg.direction, cfg.gamma_init, cfg.search_iters)?.vector),
        _ => None,
    };
    for id in &present {
        let vector = match &shared {
            Some(v) => v.clone(),
            None => {
                let mut rng = rng::stream(seed, &[rng::tag::ATTACK, round as u64, *id as u64]);
                fang_trimmed_attack(&observed, &mut rng)?
            }
        };
        let honest = &submissions[id];
        let crafted = layout.to_update(&vector, *id, honest.arch_id, &honest.shapes())?;
        submissions.insert(*id, crafted);
    }
    Ok(present.into_iter().collect())
}
