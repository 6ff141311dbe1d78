//! LoRA update containers, dimensional alignment and the on-disk encoding of
//! client submissions.
//!
//! A pair for one layer stores `A` as `r × d_in` and `B` as `d_out × r`, so the
//! weight delta is `B·A`. Heterogeneous clients are aligned by zero-padding to
//! the run's global maximum shapes, anchored at the top-left corner, together
//! with binary masks marking the real entries.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HorusError, Result};

pub type ClientId = u32;

/// The two instrumented layers of every client model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerId {
    FeatureFirst,
    Classifier,
}

impl LayerId {
    pub const ALL: [LayerId; 2] = [LayerId::FeatureFirst, LayerId::Classifier];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerId::FeatureFirst => "feature_first",
            LayerId::Classifier => "classifier",
        }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Input/output width of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub d_in: usize,
    pub d_out: usize,
}

impl LayerDims {
    pub fn new(d_in: usize, d_out: usize) -> Self {
        LayerDims { d_in, d_out }
    }

    pub fn fits_within(&self, outer: &LayerDims) -> bool {
        self.d_in <= outer.d_in && self.d_out <= outer.d_out
    }
}

pub type LayerShapes = BTreeMap<LayerId, LayerDims>;

/// Dense `(A, B)` per layer.
pub type LayerFactors = BTreeMap<LayerId, (DMatrix<f64>, DMatrix<f64>)>;

/// One layer's low-rank update: `a` is `r × d_in`, `b` is `d_out × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LoraPair {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if a.nrows() == 0 || a.ncols() == 0 || b.nrows() == 0 {
            return Err(HorusError::InvalidInput("empty LoRA factor".into()));
        }
        if a.nrows() != b.ncols() {
            return Err(HorusError::InvalidInput(format!(
                "rank mismatch: A has {} rows, B has {} columns",
                a.nrows(),
                b.ncols()
            )));
        }
        Ok(LoraPair { a, b })
    }

    /// Pair with `B = 0`, so the effective weight delta is zero.
    pub fn zero_b(a: DMatrix<f64>, d_out: usize) -> Self {
        let r = a.nrows();
        LoraPair {
            a,
            b: DMatrix::zeros(d_out, r),
        }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.b
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn dims(&self) -> LayerDims {
        LayerDims::new(self.a.ncols(), self.b.nrows())
    }

    /// `B·A`, the `d_out × d_in` weight delta.
    pub fn delta(&self) -> DMatrix<f64> {
        &self.b * &self.a
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|v| v.is_finite())
    }

    pub fn entry_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// A client's per-round submission.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: ClientId,
    pub arch_id: u32,
    pub layers: BTreeMap<LayerId, LoraPair>,
}

impl ClientUpdate {
    pub fn new(client_id: ClientId, arch_id: u32, layers: BTreeMap<LayerId, LoraPair>) -> Result<Self> {
        let update = ClientUpdate {
            client_id,
            arch_id,
            layers,
        };
        update.validate()?;
        Ok(update)
    }

    pub fn validate(&self) -> Result<()> {
        let mut rank = None;
        for layer in LayerId::ALL {
            let pair = self.layers.get(&layer).ok_or_else(|| {
                HorusError::InvalidInput(format!(
                    "client {} is missing layer {layer}",
                    self.client_id
                ))
            })?;
            match rank {
                None => rank = Some(pair.rank()),
                Some(r) if r != pair.rank() => {
                    return Err(HorusError::InvalidInput(format!(
                        "client {} mixes ranks {r} and {}",
                        self.client_id,
                        pair.rank()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn layer(&self, layer: LayerId) -> &LoraPair {
        &self.layers[&layer]
    }

    pub fn rank(&self) -> usize {
        self.layer(LayerId::FeatureFirst).rank()
    }

    pub fn shapes(&self) -> LayerShapes {
        self.layers.iter().map(|(l, p)| (*l, p.dims())).collect()
    }
}

/// Upload size: 8 bytes per matrix entry over both layers' A and B.
pub fn payload_bytes(u: &ClientUpdate) -> u64 {
    u.layers.values().map(|p| 8 * p.entry_count() as u64).sum()
}

/// A client pair zero-padded to the global shape, with validity masks.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedPair {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub mask_a: DMatrix<f64>,
    pub mask_b: DMatrix<f64>,
}

impl PaddedPair {
    pub fn pad(pair: &LoraPair, global: &LayerDims) -> Result<Self> {
        let dims = pair.dims();
        if !dims.fits_within(global) {
            return Err(HorusError::Config(format!(
                "client layer {}x{} exceeds global maximum {}x{}",
                dims.d_in, dims.d_out, global.d_in, global.d_out
            )));
        }
        let r = pair.rank();
        let mut a = DMatrix::zeros(r, global.d_in);
        let mut mask_a = DMatrix::zeros(r, global.d_in);
        a.view_mut((0, 0), (r, dims.d_in)).copy_from(pair.a());
        mask_a.view_mut((0, 0), (r, dims.d_in)).fill(1.0);
        let mut b = DMatrix::zeros(global.d_out, r);
        let mut mask_b = DMatrix::zeros(global.d_out, r);
        b.view_mut((0, 0), (dims.d_out, r)).copy_from(pair.b());
        mask_b.view_mut((0, 0), (dims.d_out, r)).fill(1.0);
        Ok(PaddedPair { a, b, mask_a, mask_b })
    }
}

pub fn pad_to_global(u: &ClientUpdate, dims: &LayerShapes) -> Result<BTreeMap<LayerId, PaddedPair>> {
    u.layers
        .iter()
        .map(|(layer, pair)| {
            let global = dims.get(layer).ok_or_else(|| {
                HorusError::Config(format!("no global dimensions declared for {layer}"))
            })?;
            Ok((*layer, PaddedPair::pad(pair, global)?))
        })
        .collect()
}

/// Aggregated global LoRA for one layer plus its tracked dominant directions.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalLayer {
    /// `r × d_in_max`.
    pub a: DMatrix<f64>,
    /// `d_out_max × r`.
    pub b: DMatrix<f64>,
    /// Unit vector of length `d_in_max`; `None` until the first aggregate.
    pub direction_a: Option<DVector<f64>>,
    /// Unit vector of length `r`.
    pub direction_b: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub layers: BTreeMap<LayerId, GlobalLayer>,
    pub dims: LayerShapes,
    pub rank: usize,
    /// Number of completed aggregations.
    pub round_index: u32,
}

impl GlobalState {
    /// Global state with the given initial `A` factors and `B = 0`.
    pub fn new(rank: usize, dims: LayerShapes, initial_a: BTreeMap<LayerId, DMatrix<f64>>) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for layer in LayerId::ALL {
            let d = dims.get(&layer).ok_or_else(|| {
                HorusError::Config(format!("no global dimensions declared for {layer}"))
            })?;
            let a = match initial_a.get(&layer) {
                Some(a) if a.shape() == (rank, d.d_in) => a.clone(),
                Some(a) => {
                    return Err(HorusError::Config(format!(
                        "initial A for {layer} is {:?}, expected {:?}",
                        a.shape(),
                        (rank, d.d_in)
                    )))
                }
                None => DMatrix::zeros(rank, d.d_in),
            };
            layers.insert(
                layer,
                GlobalLayer {
                    a,
                    b: DMatrix::zeros(d.d_out, rank),
                    direction_a: None,
                    direction_b: None,
                },
            );
        }
        Ok(GlobalState {
            layers,
            dims,
            rank,
            round_index: 0,
        })
    }

    pub fn zeros(rank: usize, dims: LayerShapes) -> Result<Self> {
        GlobalState::new(rank, dims, BTreeMap::new())
    }

    pub fn layer(&self, layer: LayerId) -> &GlobalLayer {
        &self.layers[&layer]
    }

    pub fn directions_initialized(&self) -> bool {
        self.layers
            .values()
            .all(|l| l.direction_a.is_some() && l.direction_b.is_some())
    }
}

/// Top-left `d_in` columns of the global `A` and top `d_out` rows of `B`.
pub fn trim_to_local(g: &GlobalState, layer: LayerId, local: LayerDims) -> Result<LoraPair> {
    let global = g
        .dims
        .get(&layer)
        .ok_or_else(|| HorusError::Config(format!("no global dimensions declared for {layer}")))?;
    if !local.fits_within(global) {
        return Err(HorusError::Config(format!(
            "local {layer} dims {}x{} exceed global {}x{}",
            local.d_in, local.d_out, global.d_in, global.d_out
        )));
    }
    let gl = g.layer(layer);
    let r = g.rank;
    let a = gl.a.view((0, 0), (r, local.d_in)).into_owned();
    let b = gl.b.view((0, 0), (local.d_out, r)).into_owned();
    LoraPair::new(a, b)
}

/// Fixed ordering used to flatten padded pairs into one vector: layers in
/// `LayerId` order, `A` then `B`, each row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatLayout {
    pub rank: usize,
    pub dims: LayerShapes,
}

impl FlatLayout {
    pub fn new(rank: usize, dims: LayerShapes) -> Self {
        FlatLayout { rank, dims }
    }

    pub fn len(&self) -> usize {
        self.dims
            .values()
            .map(|d| self.rank * (d.d_in + d.d_out))
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenated padded values and their validity mask.
    pub fn flatten(&self, padded: &BTreeMap<LayerId, PaddedPair>) -> (Vec<f64>, Vec<bool>) {
        let mut values = Vec::with_capacity(self.len());
        let mut mask = Vec::with_capacity(self.len());
        for layer in self.dims.keys() {
            let p = &padded[layer];
            for (m, k) in [(&p.a, &p.mask_a), (&p.b, &p.mask_b)] {
                for i in 0..m.nrows() {
                    for j in 0..m.ncols() {
                        values.push(m[(i, j)]);
                        mask.push(k[(i, j)] != 0.0);
                    }
                }
            }
        }
        (values, mask)
    }

    /// Splits a flat vector back into per-layer `(A, B)` at global shape.
    pub fn unflatten(&self, flat: &[f64]) -> Result<LayerFactors> {
        if flat.len() != self.len() {
            return Err(HorusError::InvalidInput(format!(
                "flat vector has {} entries, layout expects {}",
                flat.len(),
                self.len()
            )));
        }
        let mut out = BTreeMap::new();
        let mut offset = 0;
        for (layer, d) in &self.dims {
            let na = self.rank * d.d_in;
            let a = DMatrix::from_row_slice(self.rank, d.d_in, &flat[offset..offset + na]);
            offset += na;
            let nb = d.d_out * self.rank;
            let b = DMatrix::from_row_slice(d.d_out, self.rank, &flat[offset..offset + nb]);
            offset += nb;
            out.insert(*layer, (a, b));
        }
        Ok(out)
    }

    /// Rebuilds a client update of the given local shapes from a flat
    /// global-shape vector by trimming each factor.
    pub fn to_update(&self, flat: &[f64], client_id: ClientId, arch_id: u32, local: &LayerShapes) -> Result<ClientUpdate> {
        let mats = self.unflatten(flat)?;
        let mut layers = BTreeMap::new();
        for (layer, (a, b)) in mats {
            let d = local.get(&layer).ok_or_else(|| {
                HorusError::Config(format!("no local dimensions for {layer}"))
            })?;
            let a = a.view((0, 0), (self.rank, d.d_in)).into_owned();
            let b = b.view((0, 0), (d.d_out, self.rank)).into_owned();
            layers.insert(layer, LoraPair::new(a, b)?);
        }
        ClientUpdate::new(client_id, arch_id, layers)
    }
}

#[derive(Serialize, Deserialize)]
struct EncodedLayer {
    layer: LayerId,
    d_in: usize,
    d_out: usize,
}

#[derive(Serialize, Deserialize)]
struct EncodedHeader {
    client_id: ClientId,
    arch_id: u32,
    rank: usize,
    layers: Vec<EncodedLayer>,
}

const MAGIC: &[u8; 4] = b"HLRA";

/// Binary log record: `"HLRA"`, u32-le header length, JSON header, then per
/// layer `A` and `B` as row-major little-endian f64.
pub fn encode_update(u: &ClientUpdate) -> Vec<u8> {
    let header = EncodedHeader {
        client_id: u.client_id,
        arch_id: u.arch_id,
        rank: u.rank(),
        layers: u
            .layers
            .iter()
            .map(|(l, p)| EncodedLayer {
                layer: *l,
                d_in: p.dims().d_in,
                d_out: p.dims().d_out,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(8 + json.len() + payload_bytes(u) as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for pair in u.layers.values() {
        for m in [pair.a(), pair.b()] {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.extend_from_slice(&m[(i, j)].to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn decode_update(bytes: &[u8]) -> Result<ClientUpdate> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(HorusError::Encoding("missing HLRA magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() < hlen {
        return Err(HorusError::Encoding("truncated header".into()));
    }
    let header: EncodedHeader = serde_json::from_slice(&body[..hlen])
        .map_err(|e| HorusError::Encoding(format!("header: {e}")))?;
    let mut data = body[hlen..].chunks_exact(8);
    let mut next = |n: usize| -> Result<Vec<f64>> {
        (0..n)
            .map(|_| {
                data.next()
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .ok_or_else(|| HorusError::Encoding("truncated matrix data".into()))
            })
            .collect()
    };
    let r = header.rank;
    let mut layers = BTreeMap::new();
    for l in &header.layers {
        let a = DMatrix::from_row_slice(r, l.d_in, &next(r * l.d_in)?);
        let b = DMatrix::from_row_slice(l.d_out, r, &next(l.d_out * r)?);
        layers.insert(l.layer, LoraPair::new(a, b)?);
    }
    if data.next().is_some() || !data.remainder().is_empty() {
        return Err(HorusError::Encoding("trailing bytes after matrix data".into()));
    }
    ClientUpdate::new(header.client_id, header.arch_id, layers)
}
