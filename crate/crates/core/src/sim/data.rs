//! Synthetic Gaussian-mixture classification task and Dirichlet partitioning.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HorusError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Training-pool samples per class, before partitioning.
    pub samples_per_class: usize,
    /// Class-balanced global test set size per class.
    pub test_per_class: usize,
    pub class_separation: f64,
    pub noise_scale: f64,
    pub dirichlet_alpha: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            feature_dim: 64,
            num_classes: 10,
            samples_per_class: 300,
            test_per_class: 50,
            class_separation: 2.5,
            noise_scale: 1.0,
            dirichlet_alpha: 0.5,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HorusError::Config(m));
        if self.feature_dim < 2 {
            return err(format!("task.feature_dim = {} must be at least 2", self.feature_dim));
        }
        if self.num_classes < 2 {
            return err(format!("task.num_classes = {} must be at least 2", self.num_classes));
        }
        if self.samples_per_class == 0 || self.test_per_class == 0 {
            return err("task.samples_per_class and task.test_per_class must be positive".into());
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("noise_scale", self.noise_scale),
            ("dirichlet_alpha", self.dirichlet_alpha),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("task.{name} = {v} must be positive and finite"));
            }
        }
        Ok(())
    }
}

/// Column-per-sample feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `d × n`.
    pub x: DMatrix<f64>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn empty(d: usize) -> Self {
        Dataset { x: DMatrix::zeros(d, 0), y: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: DMatrix::from_fn(self.dim(), idx.len(), |i, j| self.x[(i, idx[j])]),
            y: idx.iter().map(|i| self.y[*i]).collect(),
        }
    }

    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for y in &self.y {
            h[*y] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub means: Vec<DVector<f64>>,
    pub pool: Dataset,
    pub test: Dataset,
}

fn sample_class<R: Rng + ?Sized>(mean: &DVector<f64>, class: usize, count: usize, noise: f64, rng: &mut R, x: &mut Vec<f64>, y: &mut Vec<usize>) {
    for _ in 0..count {
        for m in mean.iter() {
            let e: f64 = StandardNormal.sample(rng);
            x.push(m + noise * e);
        }
        y.push(class);
    }
}

/// `C` isotropic Gaussian clusters whose means are random unit directions
/// scaled by `class_separation`. The test set is drawn separately and is
/// class-balanced.
pub fn generate_task<R: Rng + ?Sized>(cfg: &TaskConfig, rng: &mut R) -> Result<Task> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let means: Vec<DVector<f64>> = (0..cfg.num_classes)
        .map(|_| {
            let v = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            v.normalize() * cfg.class_separation
        })
        .collect();
    let mut build = |per_class: usize| {
        let mut x = Vec::with_capacity(d * per_class * cfg.num_classes);
        let mut y = Vec::with_capacity(per_class * cfg.num_classes);
        for (c, mean) in means.iter().enumerate() {
            sample_class(mean, c, per_class, cfg.noise_scale, rng, &mut x, &mut y);
        }
        Dataset { x: DMatrix::from_column_slice(d, y.len(), &x), y }
    };
    let test = build(cfg.test_per_class);
    let pool = build(cfg.samples_per_class);
    Ok(Task { means, pool, test })
}

const MAX_RESAMPLES: usize = 100;

/// Splits sample indices among `clients` with per-class Dirichlet(α)
/// proportions. Every client ends up with at least one sample: the draw is
/// repeated up to 100 times, after which empty clients are topped up one
/// sample at a time from the largest shard.
pub fn dirichlet_partition<R: Rng + ?Sized>(labels: &[usize], num_classes: usize, clients: usize, alpha: f64, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(HorusError::Config("partition needs at least one client".into()));
    }
    if labels.len() < clients {
        return Err(HorusError::Config(format!(
            "{} samples cannot cover {clients} clients",
            labels.len()
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| HorusError::Config(format!("dirichlet alpha {alpha}: {e}")))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, y) in labels.iter().enumerate() {
        by_class[*y].push(i);
    }

    let mut shards = Vec::new();
    for _ in 0..MAX_RESAMPLES {
        shards = vec![Vec::new(); clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(rng);
            let mut p: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
            let total: f64 = p.iter().sum();
            if total > 0.0 {
                p.iter_mut().for_each(|v| *v /= total);
            } else {
                // every draw underflowed; fall back to a single owner
                p.iter_mut().for_each(|v| *v = 0.0);
                p[rng.random_range(0..clients)] = 1.0;
            }
            let n = members.len();
            let mut start = 0;
            let mut cumulative = 0.0;
            for (c, share) in p.iter().enumerate() {
                cumulative += share;
                let end = if c + 1 == clients { n } else { ((cumulative * n as f64).round() as usize).min(n) };
                let end = end.max(start);
                shards[c].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            return Ok(shards);
        }
    }
    while let Some(empty) = shards.iter().position(|s| s.is_empty()) {
        let donor = (0..clients).max_by(|a, b| shards[*a].len().cmp(&shards[*b].len()).then(b.cmp(a))).unwrap();
        let moved = shards[donor].pop().expect("donor shard non-empty");
        shards[empty].push(moved);
    }
    Ok(shards)
}
