//! Two-layer ReLU network with a frozen backbone and LoRA adapters on both
//! weight matrices.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use super::data::Dataset;
use crate::error::{HorusError, Result};
use crate::lora::{LayerDims, LayerId, LayerShapes, LoraPair};

/// `W1: h × d`, `W2: C × h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
}

fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

impl Backbone {
    pub fn random<R: Rng + ?Sized>(d: usize, h: usize, c: usize, rng: &mut R) -> Self {
        Backbone {
            w1: uniform_matrix(h, d, (6.0 / d as f64).sqrt(), rng),
            w2: uniform_matrix(c, h, 1.0 / (h as f64).sqrt(), rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn shapes(&self) -> LayerShapes {
        BTreeMap::from([
            (LayerId::FeatureFirst, LayerDims::new(self.w1.ncols(), self.w1.nrows())),
            (LayerId::Classifier, LayerDims::new(self.w2.ncols(), self.w2.nrows())),
        ])
    }

    /// Hash of the exact bit patterns of both weight matrices.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for m in [&self.w1, &self.w2] {
            (m.nrows(), m.ncols()).hash(&mut h);
            for v in m.iter() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Fresh adapters: `A ~ U(-1/√d_in, 1/√d_in)`, `B = 0`.
pub fn init_lora<R: Rng + ?Sized>(shapes: &LayerShapes, rank: usize, rng: &mut R) -> BTreeMap<LayerId, LoraPair> {
    shapes
        .iter()
        .map(|(l, d)| {
            let a = uniform_matrix(rank, d.d_in, 1.0 / (d.d_in as f64).sqrt(), rng);
            (*l, LoraPair::zero_b(a, d.d_out))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel {
    pub backbone: Backbone,
    pub lora: BTreeMap<LayerId, LoraPair>,
}

/// Gradients with respect to the effective weight matrices.
struct WeightGrads {
    loss: f64,
    w1: DMatrix<f64>,
    w2: DMatrix<f64>,
}

pub type LoraGrads = BTreeMap<LayerId, (DMatrix<f64>, DMatrix<f64>)>;

impl LocalModel {
    pub fn new(backbone: Backbone, lora: BTreeMap<LayerId, LoraPair>) -> Result<Self> {
        let shapes = backbone.shapes();
        for l in LayerId::ALL {
            let pair = lora
                .get(&l)
                .ok_or_else(|| HorusError::InvalidInput(format!("missing adapter for layer {l}")))?;
            if pair.dims() != shapes[&l] {
                return Err(HorusError::InvalidInput(format!(
                    "adapter for {l} is {:?}, backbone expects {:?}",
                    pair.dims(),
                    shapes[&l]
                )));
            }
        }
        Ok(LocalModel { backbone, lora })
    }

    fn effective(&self, layer: LayerId) -> DMatrix<f64> {
        let base = match layer {
            LayerId::FeatureFirst => &self.backbone.w1,
            LayerId::Classifier => &self.backbone.w2,
        };
        base + self.lora[&layer].delta()
    }

    pub fn logits(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let hidden = (self.effective(LayerId::FeatureFirst) * x).map(|v| v.max(0.0));
        self.effective(LayerId::Classifier) * hidden
    }

    /// Mean softmax cross-entropy over the columns of `x`.
    pub fn loss(&self, x: &DMatrix<f64>, y: &[usize]) -> f64 {
        let logits = self.logits(x);
        (0..y.len()).map(|j| sample_loss(&logits, j, y[j]).0).sum::<f64>() / y.len() as f64
    }

    fn weight_grads(&self, x: &DMatrix<f64>, y: &[usize]) -> WeightGrads {
        let w1 = self.effective(LayerId::FeatureFirst);
        let w2 = self.effective(LayerId::Classifier);
        let z = &w1 * x;
        let hidden = z.map(|v| v.max(0.0));
        let logits = &w2 * &hidden;
        let n = y.len() as f64;
        let mut d_logits = DMatrix::zeros(logits.nrows(), logits.ncols());
        let mut loss = 0.0;
        for j in 0..y.len() {
            let (l, probs) = sample_loss(&logits, j, y[j]);
            loss += l;
            for c in 0..probs.len() {
                d_logits[(c, j)] = (probs[c] - f64::from(u8::from(c == y[j]))) / n;
            }
        }
        let g2 = &d_logits * hidden.transpose();
        let mut d_z = w2.transpose() * &d_logits;
        d_z.zip_apply(&z, |g, zv| {
            if zv <= 0.0 {
                *g = 0.0
            }
        });
        let g1 = d_z * x.transpose();
        WeightGrads { loss: loss / n, w1: g1, w2: g2 }
    }

    /// Loss and gradients with respect to every `A` and `B`.
    pub fn lora_grads(&self, x: &DMatrix<f64>, y: &[usize]) -> (f64, LoraGrads) {
        let wg = self.weight_grads(x, y);
        let grads = LayerId::ALL
            .iter()
            .map(|l| {
                let gw = match l {
                    LayerId::FeatureFirst => &wg.w1,
                    LayerId::Classifier => &wg.w2,
                };
                let pair = &self.lora[l];
                (*l, (pair.b().transpose() * gw, gw * pair.a().transpose()))
            })
            .collect();
        (wg.loss, grads)
    }

    /// Index of the largest logit for each column, lowest class on ties.
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<usize> {
        let logits = self.logits(x);
        (0..logits.ncols())
            .map(|j| {
                let col = logits.column(j);
                let mut best = 0;
                for c in 1..col.len() {
                    if col[c] > col[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

fn sample_loss(logits: &DMatrix<f64>, j: usize, label: usize) -> (f64, Vec<f64>) {
    let col = logits.column(j);
    let max = col.max();
    let exps: Vec<f64> = col.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (col[label] - max);
    (loss, exps.into_iter().map(|e| e / total).collect())
}

/// Fraction of correct argmax predictions.
pub fn evaluate(model: &LocalModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(HorusError::InvalidInput("cannot evaluate on an empty dataset".into()));
    }
    let correct = model.predict(&data.x).iter().zip(&data.y).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

fn batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Rescale each step so the joint gradient norm is at most this.
    pub clip_norm: f64,
}

/// Mini-batch gradient descent on the adapters only. Labels may be
/// substituted (e.g. flipped) through `labels`. Returns the loss of every
/// step, measured before the step.
pub fn local_train<R: Rng + ?Sized>(
    model: &mut LocalModel,
    data: &Dataset,
    labels: &[usize],
    params: &TrainParams,
    rng: &mut R,
) -> Vec<f64> {
    let mut trace = Vec::new();
    if data.is_empty() {
        log::warn!("local training on an empty shard; adapters unchanged");
        return trace;
    }
    for _ in 0..params.epochs {
        for idx in batches(data.len(), params.batch, rng) {
            let sub = data.subset(&idx);
            let y: Vec<usize> = idx.iter().map(|i| labels[*i]).collect();
            let (loss, grads) = model.lora_grads(&sub.x, &y);
            trace.push(loss);
            let norm = grads.values().map(|(ga, gb)| ga.norm_squared() + gb.norm_squared()).sum::<f64>().sqrt();
            let scale = if norm > params.clip_norm { params.clip_norm / norm } else { 1.0 };
            let step = params.lr * scale;
            for (l, (ga, gb)) in grads {
                let pair = model.lora.get_mut(&l).expect("layer present");
                *pair.a_mut() -= ga * step;
                *pair.b_mut() -= gb * step;
            }
        }
    }
    trace
}

/// Full-backbone training used once before federation starts.
pub fn warmup<R: Rng + ?Sized>(backbone: &mut Backbone, data: &Dataset, epochs: usize, lr: f64, batch: usize, rng: &mut R) {
    if data.is_empty() {
        log::warn!("warm-up on an empty shard skipped");
        return;
    }
    let shapes = backbone.shapes();
    let rank = 1;
    let mut model = LocalModel {
        backbone: backbone.clone(),
        lora: shapes
            .iter()
            .map(|(l, d)| (*l, LoraPair::zero_b(DMatrix::zeros(rank, d.d_in), d.d_out)))
            .collect(),
    };
    for _ in 0..epochs {
        for idx in batches(data.len(), batch, rng) {
            let sub = data.subset(&idx);
            let wg = model.weight_grads(&sub.x, &sub.y);
            model.backbone.w1 -= wg.w1 * lr;
            model.backbone.w2 -= wg.w2 * lr;
        }
    }
    *backbone = model.backbone;
}
