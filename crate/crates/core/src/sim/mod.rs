//! Deterministic federated simulation: synthetic task, heterogeneous
//! clients, local LoRA training, planted attacks and server aggregation.

pub mod data;
pub mod model;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::aggregation::{baseline_aggregate, horus_aggregate, AggregateReport, AggregatorKind};
use crate::attacks::{flip_labels, poison_submissions, AttackKind};
use crate::config::RunConfig;
use crate::detection::{client_features_from, FeatureSource, RoundDetection};
use crate::error::{HorusError, Result};
use crate::lora::{payload_bytes, trim_to_local, ClientId, ClientUpdate, GlobalState, LayerDims, LayerId, LayerShapes};
use crate::rng::{stream, tag};
use data::{dirichlet_partition, generate_task, Dataset, Task};
use model::{evaluate, local_train, warmup, Backbone, LocalModel, TrainParams};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientProfile {
    pub client_id: ClientId,
    pub arch_id: u32,
    pub hidden: usize,
    pub participation_rate: f64,
    pub is_attacker: bool,
    pub train_size: usize,
    pub test_size: usize,
}

#[derive(Debug, Clone)]
struct ClientState {
    profile: ClientProfile,
    backbone: Backbone,
    fingerprint: u64,
    train: Dataset,
    test: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub participants: Vec<ClientId>,
    /// Clients whose submission was adversarial this round.
    pub poisoned: Vec<ClientId>,
    pub flagged: Vec<ClientId>,
    pub precision: f64,
    pub recall: f64,
    pub false_positive_rate: f64,
    /// Mean over benign clients on the shared test set.
    pub global_accuracy: f64,
    /// Mean over benign clients on their own test split.
    pub mean_local_accuracy: f64,
    pub payload_bytes: u64,
    pub skipped: bool,
    pub aggregate: Option<AggregateReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticRow {
    pub round: u32,
    pub client_id: ClientId,
    pub layer: LayerId,
    pub matrix: &'static str,
    pub topk_ratio: f64,
    pub is_attacker: bool,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub metrics: RoundMetrics,
    pub detection: Option<RoundDetection>,
    pub diagnostics: Vec<DiagnosticRow>,
}

pub struct Simulation {
    cfg: RunConfig,
    task: Task,
    clients: Vec<ClientState>,
    global: GlobalState,
    round: u32,
    diagnostics: bool,
}

/// Global shapes: the largest hidden width across architectures.
pub fn global_shapes(cfg: &RunConfig) -> LayerShapes {
    let h = *cfg.clients.hidden_widths.iter().max().expect("validated non-empty");
    BTreeMap::from([
        (LayerId::FeatureFirst, LayerDims::new(cfg.task.feature_dim, h)),
        (LayerId::Classifier, LayerDims::new(h, cfg.task.num_classes)),
    ])
}

/// Server-side starting point: `A ~ U(±1/√d_in)` from the seed, `B = 0`.
pub fn initial_global(rank: usize, dims: LayerShapes, seed: u64) -> Result<GlobalState> {
    let mut rng = stream(seed, &[tag::GLOBAL_INIT]);
    let initial_a = dims
        .iter()
        .map(|(l, d)| {
            let bound = 1.0 / (d.d_in as f64).sqrt();
            (*l, DMatrix::from_fn(rank, d.d_in, |_, _| rng.random_range(-bound..bound)))
        })
        .collect();
    GlobalState::new(rank, dims, initial_a)
}

fn split_shard<R: Rng + ?Sized>(pool: &Dataset, shard: &[usize], rng: &mut R) -> (Dataset, Dataset) {
    use rand::seq::SliceRandom;
    let mut idx = shard.to_vec();
    idx.shuffle(rng);
    let n_test = idx.len() / 5;
    let (test, train) = idx.split_at(n_test);
    (pool.subset(train), pool.subset(test))
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Simulation {
    /// Generates data, partitions it, warms up every client's backbone and
    /// initialises the global adapters.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.master_seed;
        let task = generate_task(&cfg.task, &mut stream(seed, &[tag::TASK]))?;
        let n = cfg.clients.count;
        let shards = dirichlet_partition(
            &task.pool.y,
            cfg.task.num_classes,
            n,
            cfg.task.dirichlet_alpha,
            &mut stream(seed, &[tag::PARTITION]),
        )?;
        let num_arch = cfg.clients.hidden_widths.len();
        let arch_backbones: Vec<Backbone> = (0..num_arch)
            .map(|a| {
                let h = cfg.clients.hidden_widths[a];
                Backbone::random(cfg.task.feature_dim, h, cfg.task.num_classes, &mut stream(seed, &[tag::BACKBONE, a as u64]))
            })
            .collect();
        let clients: Vec<ClientState> = shards
            .par_iter()
            .enumerate()
            .map(|(c, shard)| {
                let cid = c as u64;
                let (train, test) = split_shard(&task.pool, shard, &mut stream(seed, &[tag::SPLIT, cid]));
                let arch_id = cfg.clients.arch_of(c);
                let mut backbone = arch_backbones[arch_id as usize].clone();
                let w = &cfg.warmup;
                warmup(&mut backbone, &train, w.epochs, w.lr, w.batch, &mut stream(seed, &[tag::WARMUP, cid]));
                let is_attacker = cfg.attack.kind != AttackKind::None && cfg.attack.attackers.contains(&(c as ClientId));
                let participation_rate = if is_attacker && cfg.clients.attackers_always_participate {
                    1.0
                } else if let Some(rates) = &cfg.clients.participation {
                    rates[c]
                } else {
                    let choices = &cfg.clients.participation_choices;
                    choices[stream(seed, &[tag::PROFILE, cid]).random_range(0..choices.len())]
                };
                ClientState {
                    profile: ClientProfile {
                        client_id: c as ClientId,
                        arch_id,
                        hidden: backbone.hidden(),
                        participation_rate,
                        is_attacker,
                        train_size: train.len(),
                        test_size: test.len(),
                    },
                    fingerprint: backbone.fingerprint(),
                    backbone,
                    train,
                    test,
                }
            })
            .collect();
        let global = initial_global(cfg.rank, global_shapes(&cfg), seed)?;
        for c in &clients {
            log::debug!("client {:?}", c.profile);
        }
        Ok(Simulation { cfg, task, clients, global, round: 0, diagnostics: false })
    }

    /// Also emit per-client spectral diagnostics of both factors each round.
    pub fn with_diagnostics(mut self, on: bool) -> Self {
        self.diagnostics = on;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn profiles(&self) -> Vec<ClientProfile> {
        self.clients.iter().map(|c| c.profile.clone()).collect()
    }

    pub fn global(&self) -> &GlobalState {
        &self.global
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn rounds_completed(&self) -> u32 {
        self.round
    }

    fn model_for(&self, c: &ClientState) -> Result<LocalModel> {
        let lora = c
            .backbone
            .shapes()
            .iter()
            .map(|(l, d)| trim_to_local(&self.global, *l, *d).map(|p| (*l, p)))
            .collect::<Result<_>>()?;
        LocalModel::new(c.backbone.clone(), lora)
    }

    fn sample_participants(&self, round: u32) -> Vec<usize> {
        let mut rng = stream(self.cfg.master_seed, &[tag::PARTICIPATION, round as u64]);
        self.clients
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                let u: f64 = rng.random();
                (u < c.profile.participation_rate).then_some(i)
            })
            .collect()
    }

    fn evaluate_benign(&self) -> Result<(f64, f64)> {
        let scores: Vec<(f64, Option<f64>)> = self
            .clients
            .par_iter()
            .filter(|c| !c.profile.is_attacker)
            .map(|c| {
                let m = self.model_for(c)?;
                let global = evaluate(&m, &self.task.test)?;
                let local = if c.test.is_empty() { None } else { Some(evaluate(&m, &c.test)?) };
                Ok((global, local))
            })
            .collect::<Result<_>>()?;
        let global = scores.iter().map(|s| s.0).sum::<f64>() / scores.len().max(1) as f64;
        let locals: Vec<f64> = scores.iter().filter_map(|s| s.1).collect();
        let local = locals.iter().sum::<f64>() / locals.len().max(1) as f64;
        Ok((global, local))
    }

    fn check_backbones(&self) -> Result<()> {
        for c in &self.clients {
            if c.backbone.fingerprint() != c.fingerprint {
                return Err(HorusError::Invariant(format!(
                    "backbone of client {} changed after warm-up",
                    c.profile.client_id
                )));
            }
        }
        Ok(())
    }

    /// Executes the next round.
    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        self.round += 1;
        let round = self.round;
        let seed = self.cfg.master_seed;
        self.check_backbones()?;
        let participants = self.sample_participants(round);
        let attack = &self.cfg.attack;
        let flipping = attack.kind == AttackKind::LabelFlip && attack.active(round);

        if participants.is_empty() {
            log::warn!("round {round}: no participants; skipped");
            let (global_accuracy, mean_local_accuracy) = self.evaluate_benign()?;
            return Ok(RoundOutcome {
                metrics: RoundMetrics {
                    round,
                    participants: Vec::new(),
                    poisoned: Vec::new(),
                    flagged: Vec::new(),
                    precision: 0.0,
                    recall: 0.0,
                    false_positive_rate: 0.0,
                    global_accuracy,
                    mean_local_accuracy,
                    payload_bytes: 0,
                    skipped: true,
                    aggregate: None,
                },
                detection: None,
                diagnostics: Vec::new(),
            });
        }

        let cfg = &self.cfg;
        let params = TrainParams { epochs: cfg.epochs, lr: cfg.lr, batch: cfg.batch, clip_norm: cfg.clip_norm };
        let mut submissions: BTreeMap<ClientId, ClientUpdate> = participants
            .par_iter()
            .map(|i| {
                let c = &self.clients[*i];
                let id = c.profile.client_id;
                let mut m = self.model_for(c)?;
                let labels = if flipping && c.profile.is_attacker {
                    flip_labels(&c.train.y, cfg.task.num_classes)
                } else {
                    c.train.y.clone()
                };
                let mut rng = stream(seed, &[tag::TRAIN, round as u64, id as u64]);
                local_train(&mut m, &c.train, &labels, &params, &mut rng);
                Ok((id, ClientUpdate::new(id, c.profile.arch_id, m.lora)?))
            })
            .collect::<Result<_>>()?;

        let mut poisoned = poison_submissions(attack, round, &mut submissions, self.global.rank, &self.global.dims, seed)?;
        if flipping {
            poisoned.extend(participants.iter().map(|i| &self.clients[*i].profile).filter(|p| p.is_attacker).map(|p| p.client_id));
        }
        let payload: u64 = submissions.values().map(payload_bytes).sum();

        let (next, detection, report) = match cfg.aggregator {
            AggregatorKind::Horus => {
                let (g, d, r) = horus_aggregate(&submissions, &self.global, &cfg.detection)?;
                (g, Some(d), r)
            }
            kind => {
                let (g, r) = baseline_aggregate(kind, &submissions, &self.global)?;
                (g, None, r)
            }
        };

        let flagged: BTreeSet<ClientId> = detection.as_ref().map(|d| d.flagged.clone()).unwrap_or_default();
        let diagnostics = if self.diagnostics {
            self.diagnostic_rows(round, &submissions, &poisoned, &flagged)?
        } else {
            Vec::new()
        };
        self.global = next;
        let (global_accuracy, mean_local_accuracy) = self.evaluate_benign()?;

        let hits = flagged.intersection(&poisoned).count();
        let negatives = submissions.len() - poisoned.len();
        let metrics = RoundMetrics {
            round,
            participants: submissions.keys().copied().collect(),
            poisoned: poisoned.iter().copied().collect(),
            flagged: flagged.iter().copied().collect(),
            precision: ratio(hits, flagged.len()),
            recall: ratio(hits, poisoned.len()),
            false_positive_rate: ratio(flagged.len() - hits, negatives),
            global_accuracy,
            mean_local_accuracy,
            payload_bytes: payload,
            skipped: report.skipped,
            aggregate: Some(report),
        };
        Ok(RoundOutcome { metrics, detection, diagnostics })
    }

    fn diagnostic_rows(
        &self,
        round: u32,
        submissions: &BTreeMap<ClientId, ClientUpdate>,
        poisoned: &BTreeSet<ClientId>,
        flagged: &BTreeSet<ClientId>,
    ) -> Result<Vec<DiagnosticRow>> {
        let k = self.cfg.detection.k;
        let mut rows = Vec::new();
        for (id, u) in submissions {
            for (matrix, source) in [("A", FeatureSource::LoraA), ("B", FeatureSource::LoraB)] {
                let f = client_features_from(u, k, source)?;
                for (layer, lf) in &f.layers {
                    rows.push(DiagnosticRow {
                        round,
                        client_id: *id,
                        layer: *layer,
                        matrix,
                        topk_ratio: lf.ratio,
                        is_attacker: poisoned.contains(id),
                        flagged: flagged.contains(id),
                    });
                }
            }
        }
        rows.sort_by(|a, b| (a.client_id, a.layer, a.matrix).cmp(&(b.client_id, b.layer, b.matrix)));
        Ok(rows)
    }

    /// Runs all configured rounds, passing each outcome to `observe`.
    pub fn run(&mut self, mut observe: impl FnMut(&RoundOutcome) -> Result<()>) -> Result<Vec<RoundMetrics>> {
        let mut all = Vec::with_capacity(self.cfg.rounds as usize);
        while self.round < self.cfg.rounds {
            let outcome = self.run_round()?;
            log::info!(
                "round {:>3}: acc {:.4} local {:.4} flagged {:?}",
                outcome.metrics.round,
                outcome.metrics.global_accuracy,
                outcome.metrics.mean_local_accuracy,
                outcome.metrics.flagged
            );
            observe(&outcome)?;
            all.push(outcome.metrics);
        }
        Ok(all)
    }
}
