//! Server-side aggregation: masked (optionally projection-weighted) averaging
//! of aligned LoRA factors, global direction tracking, and the classical
//! robust baselines used for comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{detect, DetectionConfig, RoundDetection};
use crate::error::{HorusError, Result};
use crate::lora::{pad_to_global, ClientId, ClientUpdate, FlatLayout, GlobalState, LayerId, PaddedPair};
use crate::spectral::first_right_singular_vector;

/// Weighted denominators at or below this keep the previous global entry.
pub const WEIGHT_FLOOR: f64 = 1e-12;

pub type PaddedSet = BTreeMap<ClientId, BTreeMap<LayerId, PaddedPair>>;
pub type LayerAggregate = BTreeMap<LayerId, (DMatrix<f64>, DMatrix<f64>)>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub alpha_a: f64,
    pub alpha_b: f64,
}

impl LayerWeights {
    pub const UNIFORM: LayerWeights = LayerWeights {
        alpha_a: 1.0,
        alpha_b: 1.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub weights: BTreeMap<ClientId, BTreeMap<LayerId, LayerWeights>>,
    /// True when global directions were not yet available and every weight
    /// was set to 1.
    pub uniform_fallback: bool,
}

impl ProjectionWeights {
    pub fn uniform(padded: &PaddedSet) -> Self {
        ProjectionWeights {
            weights: padded
                .iter()
                .map(|(c, layers)| (*c, layers.keys().map(|l| (*l, LayerWeights::UNIFORM)).collect()))
                .collect(),
            uniform_fallback: true,
        }
    }

    fn get(&self, client: ClientId, layer: LayerId) -> Result<LayerWeights> {
        self.weights
            .get(&client)
            .and_then(|l| l.get(&layer))
            .copied()
            .ok_or_else(|| HorusError::InvalidInput(format!("no weight for client {client} layer {layer}")))
    }

    /// (min, mean, max) over every α value.
    pub fn summary(&self) -> Option<(f64, f64, f64)> {
        let all: Vec<f64> = self
            .weights
            .values()
            .flat_map(|l| l.values().flat_map(|w| [w.alpha_a, w.alpha_b]))
            .collect();
        if all.is_empty() {
            return None;
        }
        let min = all.iter().copied().fold(f64::INFINITY, f64::min);
        let max = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some((min, all.iter().sum::<f64>() / all.len() as f64, max))
    }
}

fn previous_layer(g: &GlobalState, layer: LayerId) -> Result<(&DMatrix<f64>, &DMatrix<f64>)> {
    g.layers
        .get(&layer)
        .map(|l| (&l.a, &l.b))
        .ok_or_else(|| HorusError::InvalidInput(format!("global state lacks layer {layer}")))
}

fn check_shape(m: &DMatrix<f64>, expected: (usize, usize)) -> Result<()> {
    if m.shape() != expected {
        return Err(HorusError::InvalidInput(format!(
            "padded factor is {:?}, global is {:?}",
            m.shape(),
            expected
        )));
    }
    Ok(())
}

/// Entry-wise `Σ x⊙m / Σ m` over clients; zero-coverage entries keep
/// `previous`.
pub fn masked_average(padded: &PaddedSet, previous: &GlobalState) -> Result<LayerAggregate> {
    let mut out = BTreeMap::new();
    for layer in LayerId::ALL {
        let (prev_a, prev_b) = previous_layer(previous, layer)?;
        let mut num_a = DMatrix::zeros(prev_a.nrows(), prev_a.ncols());
        let mut den_a = DMatrix::zeros(prev_a.nrows(), prev_a.ncols());
        let mut num_b = DMatrix::zeros(prev_b.nrows(), prev_b.ncols());
        let mut den_b = DMatrix::zeros(prev_b.nrows(), prev_b.ncols());
        for layers in padded.values() {
            let Some(p) = layers.get(&layer) else { continue };
            check_shape(&p.a, prev_a.shape())?;
            check_shape(&p.b, prev_b.shape())?;
            num_a += p.a.component_mul(&p.mask_a);
            den_a += &p.mask_a;
            num_b += p.b.component_mul(&p.mask_b);
            den_b += &p.mask_b;
        }
        let a = divide_or_keep(&num_a, &den_a, prev_a, 0.0);
        let b = divide_or_keep(&num_b, &den_b, prev_b, 0.0);
        out.insert(layer, (a, b));
    }
    Ok(out)
}

fn divide_or_keep(num: &DMatrix<f64>, den: &DMatrix<f64>, prev: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    DMatrix::from_fn(num.nrows(), num.ncols(), |i, j| {
        let d = den[(i, j)];
        if d > floor {
            num[(i, j)] / d
        } else {
            prev[(i, j)]
        }
    })
}

/// `α = |⟨v_client, v_global⟩|` per client, layer and factor, with `v` the
/// dominant right singular vector of the padded factor. Falls back to
/// uniform weights while the global directions are uninitialised. An
/// all-zero client factor carries no direction and gets weight 0.
pub fn projection_weights(padded: &PaddedSet, g: &GlobalState) -> Result<ProjectionWeights> {
    if !g.directions_initialized() {
        return Ok(ProjectionWeights::uniform(padded));
    }
    let rows: Vec<(ClientId, BTreeMap<LayerId, LayerWeights>)> = padded
        .par_iter()
        .map(|(c, layers)| {
            let mut per_layer = BTreeMap::new();
            for (layer, p) in layers {
                let gl = g.layer(*layer);
                let (Some(ga), Some(gb)) = (&gl.direction_a, &gl.direction_b) else {
                    unreachable!("directions checked above")
                };
                per_layer.insert(
                    *layer,
                    LayerWeights {
                        alpha_a: alignment(&p.a, ga)?,
                        alpha_b: alignment(&p.b, gb)?,
                    },
                );
            }
            Ok((*c, per_layer))
        })
        .collect::<Result<_>>()?;
    Ok(ProjectionWeights {
        weights: rows.into_iter().collect(),
        uniform_fallback: false,
    })
}

fn alignment(m: &DMatrix<f64>, global: &DVector<f64>) -> Result<f64> {
    let v = first_right_singular_vector(m)?;
    if v.degenerate {
        return Ok(0.0);
    }
    if v.vector.len() != global.len() {
        return Err(HorusError::InvalidInput(format!(
            "client direction has length {}, global {}",
            v.vector.len(),
            global.len()
        )));
    }
    Ok(v.vector.dot(global).abs().min(1.0))
}

/// Entry-wise `Σ α·(x⊙m) / Σ α·m`; entries whose denominator is at most
/// [`WEIGHT_FLOOR`] keep `previous`.
pub fn weighted_masked_average(padded: &PaddedSet, weights: &ProjectionWeights, previous: &GlobalState) -> Result<LayerAggregate> {
    let mut out = BTreeMap::new();
    for layer in LayerId::ALL {
        let (prev_a, prev_b) = previous_layer(previous, layer)?;
        let mut num_a = DMatrix::zeros(prev_a.nrows(), prev_a.ncols());
        let mut den_a = DMatrix::zeros(prev_a.nrows(), prev_a.ncols());
        let mut num_b = DMatrix::zeros(prev_b.nrows(), prev_b.ncols());
        let mut den_b = DMatrix::zeros(prev_b.nrows(), prev_b.ncols());
        for (client, layers) in padded {
            let Some(p) = layers.get(&layer) else { continue };
            check_shape(&p.a, prev_a.shape())?;
            check_shape(&p.b, prev_b.shape())?;
            let w = weights.get(*client, layer)?;
            num_a += p.a.component_mul(&p.mask_a) * w.alpha_a;
            den_a += &p.mask_a * w.alpha_a;
            num_b += p.b.component_mul(&p.mask_b) * w.alpha_b;
            den_b += &p.mask_b * w.alpha_b;
        }
        let a = divide_or_keep(&num_a, &den_a, prev_a, WEIGHT_FLOOR);
        let b = divide_or_keep(&num_b, &den_b, prev_b, WEIGHT_FLOOR);
        out.insert(layer, (a, b));
    }
    Ok(out)
}

/// Installs the aggregate and re-derives the tracked directions from it.
/// Layers whose aggregate factor is identically zero keep their previous
/// direction.
pub fn update_global_directions(g: &GlobalState, aggregate: LayerAggregate) -> Result<GlobalState> {
    let mut next = g.clone();
    for (layer, (a, b)) in aggregate {
        let gl = next
            .layers
            .get_mut(&layer)
            .ok_or_else(|| HorusError::InvalidInput(format!("global state lacks layer {layer}")))?;
        let da = first_right_singular_vector(&a)?;
        let db = first_right_singular_vector(&b)?;
        if da.degenerate {
            log::debug!("aggregate A for {layer} is zero; keeping previous direction");
        } else {
            gl.direction_a = Some(da.vector);
        }
        if db.degenerate {
            log::debug!("aggregate B for {layer} is zero; keeping previous direction");
        } else {
            gl.direction_b = Some(db.vector);
        }
        gl.a = a;
        gl.b = b;
    }
    next.round_index += 1;
    Ok(next)
}

/// What happened during one aggregation, for the per-round log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateReport {
    pub aggregator: String,
    pub skipped: bool,
    /// Per layer `(‖Ā‖_F, ‖B̄‖_F)` after the round.
    pub norms: BTreeMap<LayerId, (f64, f64)>,
    /// `(min, mean, max)` of the projection weights, when used.
    pub alpha: Option<(f64, f64, f64)>,
    /// Clients whose factors entered the aggregate.
    pub contributors: Vec<ClientId>,
}

impl AggregateReport {
    fn new(kind: &AggregatorKind, g: &GlobalState, contributors: Vec<ClientId>, skipped: bool) -> Self {
        AggregateReport {
            aggregator: kind.to_string(),
            skipped,
            norms: g.layers.iter().map(|(l, gl)| (*l, (gl.a.norm(), gl.b.norm()))).collect(),
            alpha: None,
            contributors,
        }
    }
}

pub fn pad_all(updates: &BTreeMap<ClientId, ClientUpdate>, g: &GlobalState) -> Result<PaddedSet> {
    updates
        .iter()
        .map(|(c, u)| pad_to_global(u, &g.dims).map(|p| (*c, p)))
        .collect()
}

/// Detection, exclusion of flagged clients, alignment, projection weighting
/// and weighted masked averaging for one round.
pub fn horus_aggregate(
    updates: &BTreeMap<ClientId, ClientUpdate>,
    g: &GlobalState,
    cfg: &DetectionConfig,
) -> Result<(GlobalState, RoundDetection, AggregateReport)> {
    if updates.is_empty() {
        return Err(HorusError::InvalidInput("no updates to aggregate".into()));
    }
    let detection = detect(updates, cfg)?;
    let benign: BTreeMap<ClientId, ClientUpdate> = updates
        .iter()
        .filter(|(c, _)| !detection.flagged.contains(c))
        .map(|(c, u)| (*c, u.clone()))
        .collect();
    if benign.is_empty() {
        log::warn!("every client flagged in round {}; aggregation skipped", g.round_index + 1);
        let report = AggregateReport::new(&AggregatorKind::Horus, g, Vec::new(), true);
        return Ok((g.clone(), detection, report));
    }
    let padded = pad_all(&benign, g)?;
    let weights = projection_weights(&padded, g)?;
    let aggregate = weighted_masked_average(&padded, &weights, g)?;
    let next = update_global_directions(g, aggregate)?;
    let mut report = AggregateReport::new(&AggregatorKind::Horus, &next, benign.keys().copied().collect(), false);
    report.alpha = weights.summary();
    Ok((next, detection, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum AggregatorKind {
    Horus,
    #[serde(rename = "fedavg")]
    FedAvg,
    Krum { f: usize },
    MultiKrum { f: usize, m: usize },
    #[serde(rename = "median")]
    CoordinateMedian,
    TrimmedMean { beta: f64 },
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregatorKind::Horus => write!(f, "horus"),
            AggregatorKind::FedAvg => write!(f, "fedavg"),
            AggregatorKind::Krum { f: byz } => write!(f, "krum(f={byz})"),
            AggregatorKind::MultiKrum { f: byz, m } => write!(f, "multi_krum(f={byz},m={m})"),
            AggregatorKind::CoordinateMedian => write!(f, "median"),
            AggregatorKind::TrimmedMean { beta } => write!(f, "trimmed_mean(beta={beta})"),
        }
    }
}

impl AggregatorKind {
    /// Run-start feasibility against the total client count.
    pub fn validate(&self, clients: usize) -> Result<()> {
        match *self {
            AggregatorKind::Krum { f } | AggregatorKind::MultiKrum { f, .. } => {
                if 2 * f + 2 >= clients {
                    return Err(HorusError::Config(format!(
                        "krum with f = {f} needs f < n/2 - 1, but n = {clients}"
                    )));
                }
                if let AggregatorKind::MultiKrum { m, .. } = *self {
                    if m == 0 || m > clients {
                        return Err(HorusError::Config(format!("multi_krum m = {m} must be in 1..={clients}")));
                    }
                }
                Ok(())
            }
            AggregatorKind::TrimmedMean { beta } if !(0.0..0.5).contains(&beta) => Err(HorusError::Config(format!(
                "trimmed_mean beta = {beta} must lie in [0, 0.5)"
            ))),
            _ => Ok(()),
        }
    }

    /// Parses the short names accepted on the command line.
    pub fn from_name(name: &str, byzantine: usize, clients: usize) -> Result<Self> {
        Ok(match name {
            "horus" => AggregatorKind::Horus,
            "fedavg" => AggregatorKind::FedAvg,
            "krum" => AggregatorKind::Krum { f: byzantine },
            "multi_krum" => AggregatorKind::MultiKrum {
                f: byzantine,
                m: clients.saturating_sub(byzantine).max(1),
            },
            "median" => AggregatorKind::CoordinateMedian,
            "trimmed_mean" => AggregatorKind::TrimmedMean { beta: 0.2 },
            other => return Err(HorusError::Config(format!("unknown aggregator '{other}'"))),
        })
    }
}

struct FlatClient {
    id: ClientId,
    values: Vec<f64>,
    mask: Vec<bool>,
}

fn flatten_all(padded: &PaddedSet, layout: &FlatLayout) -> Vec<FlatClient> {
    padded
        .iter()
        .map(|(c, p)| {
            let (values, mask) = layout.flatten(p);
            FlatClient { id: *c, values, mask }
        })
        .collect()
}

/// Squared distance over the entries both clients cover.
fn common_support_distance(a: &FlatClient, b: &FlatClient) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .zip(a.mask.iter().zip(&b.mask))
        .filter(|(_, (ma, mb))| **ma && **mb)
        .map(|((x, y), _)| (x - y).powi(2))
        .sum()
}

/// Krum scores: sum of squared distances to the `n - f - 2` nearest others.
fn krum_scores(clients: &[FlatClient], f: usize) -> Result<Vec<f64>> {
    let n = clients.len();
    if n < f + 3 {
        return Err(HorusError::Config(format!(
            "krum with f = {f} needs at least {} clients, got {n}",
            f + 3
        )));
    }
    let neighbours = n - f - 2;
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = common_support_distance(&clients[i], &clients[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|j| *j != i).map(|j| dist[i][j]).collect();
            row.sort_by(f64::total_cmp);
            row[..neighbours].iter().sum()
        })
        .collect())
}

/// Client indices ordered by ascending Krum score, lower id first on ties.
fn krum_ranking(clients: &[FlatClient], f: usize) -> Result<Vec<usize>> {
    let scores = krum_scores(clients, f)?;
    let mut order: Vec<usize> = (0..clients.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]).then(clients[*a].id.cmp(&clients[*b].id)));
    Ok(order)
}

/// Per-entry reduction over the clients covering that entry; uncovered
/// entries keep the previous global value.
fn coordinatewise(clients: &[FlatClient], previous: &[f64], reduce: impl Fn(&mut [f64]) -> f64) -> Vec<f64> {
    let mut column = Vec::with_capacity(clients.len());
    (0..previous.len())
        .map(|e| {
            column.clear();
            column.extend(clients.iter().filter(|c| c.mask[e]).map(|c| c.values[e]));
            if column.is_empty() {
                previous[e]
            } else {
                reduce(&mut column)
            }
        })
        .collect()
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn trimmed_mean_of(values: &mut [f64], beta: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    // tolerance so that e.g. beta = 1/3 with n = 3 trims exactly one
    let mut trim = (beta * n as f64 + 1e-9).floor() as usize;
    if 2 * trim >= n {
        trim = (n - 1) / 2;
    }
    let kept = &values[trim..n - trim];
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Classical aggregation rules on mask-aligned flattened updates.
pub fn baseline_aggregate(
    kind: AggregatorKind,
    updates: &BTreeMap<ClientId, ClientUpdate>,
    g: &GlobalState,
) -> Result<(GlobalState, AggregateReport)> {
    if updates.is_empty() {
        return Err(HorusError::InvalidInput("no updates to aggregate".into()));
    }
    let padded = pad_all(updates, g)?;
    let layout = FlatLayout::new(g.rank, g.dims.clone());
    let previous = {
        let prev: BTreeMap<LayerId, PaddedPair> = g
            .layers
            .iter()
            .map(|(l, gl)| {
                (
                    *l,
                    PaddedPair {
                        a: gl.a.clone(),
                        b: gl.b.clone(),
                        mask_a: DMatrix::from_element(gl.a.nrows(), gl.a.ncols(), 1.0),
                        mask_b: DMatrix::from_element(gl.b.nrows(), gl.b.ncols(), 1.0),
                    },
                )
            })
            .collect();
        layout.flatten(&prev).0
    };

    let (aggregate, contributors): (LayerAggregate, Vec<ClientId>) = match kind {
        AggregatorKind::Horus => {
            return Err(HorusError::InvalidInput("use horus_aggregate for the Horus rule".into()))
        }
        AggregatorKind::FedAvg => (masked_average(&padded, g)?, updates.keys().copied().collect()),
        AggregatorKind::Krum { f } => {
            let clients = flatten_all(&padded, &layout);
            let best = krum_ranking(&clients, f)?[0];
            let chosen = &clients[best];
            let values: Vec<f64> = chosen
                .values
                .iter()
                .zip(&chosen.mask)
                .zip(&previous)
                .map(|((v, m), p)| if *m { *v } else { *p })
                .collect();
            (layout.unflatten(&values)?, vec![chosen.id])
        }
        AggregatorKind::MultiKrum { f, m } => {
            let clients = flatten_all(&padded, &layout);
            let order = krum_ranking(&clients, f)?;
            let selected: BTreeSet<ClientId> = order.iter().take(m.max(1)).map(|i| clients[*i].id).collect();
            let subset: PaddedSet = padded
                .iter()
                .filter(|(c, _)| selected.contains(c))
                .map(|(c, p)| (*c, p.clone()))
                .collect();
            (masked_average(&subset, g)?, selected.into_iter().collect())
        }
        AggregatorKind::CoordinateMedian => {
            let clients = flatten_all(&padded, &layout);
            let values = coordinatewise(&clients, &previous, median_of);
            (layout.unflatten(&values)?, updates.keys().copied().collect())
        }
        AggregatorKind::TrimmedMean { beta } => {
            let clients = flatten_all(&padded, &layout);
            let values = coordinatewise(&clients, &previous, |v| trimmed_mean_of(v, beta));
            (layout.unflatten(&values)?, updates.keys().copied().collect())
        }
    };
    let next = update_global_directions(g, aggregate)?;
    let report = AggregateReport::new(&kind, &next, contributors, false);
    Ok((next, report))
}
