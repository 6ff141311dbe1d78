//! C ABI over the server side of `horus-core`.
//!
//! A server handle owns the global LoRA state and a queue of client
//! submissions. Every function returns a [`HorusStatus`]; on failure the
//! message is available from [`horus_last_error_message`] on the same
//! thread. Matrices cross the boundary as row-major `double` arrays.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use horus_core::aggregation::horus_aggregate;
use horus_core::detection::{DetectionConfig, DetectionMode, FeatureSource};
use horus_core::lora::{decode_update, ClientId, ClientUpdate, GlobalState, LayerDims, LayerId, LoraPair};
use horus_core::spectral::{singular_values, spectral_entropy, topk_energy_ratio};
use horus_core::HorusError;
use nalgebra::DMatrix;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HorusStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Config = 3,
    Invariant = 4,
    Encoding = 5,
    Io = 6,
    /// Buffer supplied by the caller is too small.
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HorusLayer {
    FeatureFirst = 0,
    Classifier = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HorusFactor {
    A = 0,
    B = 1,
}

/// Global shapes, detection settings and the seed for the initial `A`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HorusServerConfig {
    pub rank: usize,
    pub feature_first_d_in: usize,
    pub feature_first_d_out: usize,
    pub classifier_d_in: usize,
    pub classifier_d_out: usize,
    pub lambda: f64,
    pub top_k: usize,
    /// When non-zero, flag this many clients; otherwise use `percentile`.
    pub top_m: usize,
    pub percentile: f64,
    /// Initial global `A` entries are drawn from `U(±1/√d_in)`; `B` starts at 0.
    pub seed: u64,
}

/// One layer of a client submission. `a` is `rank × d_in`, `b` is
/// `d_out × rank`, both row-major.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HorusLayerFactors {
    pub layer: HorusLayer,
    pub d_in: usize,
    pub d_out: usize,
    pub a: *const f64,
    pub b: *const f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct HorusRoundSummary {
    pub round_index: u32,
    pub submissions: usize,
    pub flagged: usize,
    /// Non-zero when every client was flagged and the global state was kept.
    pub skipped: u8,
    pub threshold: f64,
}

/// Opaque server handle.
pub struct HorusServer {
    global: GlobalState,
    detection: DetectionConfig,
    pending: BTreeMap<ClientId, ClientUpdate>,
    last_flagged: Vec<ClientId>,
    last_scores: BTreeMap<ClientId, f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &HorusError) -> HorusStatus {
    match e {
        HorusError::InvalidInput(_) => HorusStatus::InvalidInput,
        HorusError::Config(_) => HorusStatus::Config,
        HorusError::Invariant(_) => HorusStatus::Invariant,
        HorusError::Encoding(_) => HorusStatus::Encoding,
        HorusError::Io { .. } => HorusStatus::Io,
    }
}

struct Failure(HorusStatus, String);

impl From<HorusError> for Failure {
    fn from(e: HorusError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(HorusStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HorusStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            HorusStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            HorusStatus::Panic
        }
    }
}

fn layer_id(l: HorusLayer) -> LayerId {
    match l {
        HorusLayer::FeatureFirst => LayerId::FeatureFirst,
        HorusLayer::Classifier => LayerId::Classifier,
    }
}

/// # Safety
/// `data` must point to `rows * cols` readable doubles, or be null when the
/// product is zero.
unsafe fn read_matrix(data: *const f64, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>, Failure> {
    if rows * cols == 0 {
        return Ok(DMatrix::zeros(rows, cols));
    }
    if data.is_null() {
        return Err(null(what));
    }
    let slice = std::slice::from_raw_parts(data, rows * cols);
    Ok(DMatrix::from_row_slice(rows, cols, slice))
}

/// Length in bytes of the last error message on this thread, excluding the
/// terminating NUL.
#[no_mangle]
pub extern "C" fn horus_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message into `buf` as a NUL-terminated string,
/// truncating if needed. Returns the number of bytes written, excluding NUL.
///
/// # Safety
/// `buf` must be valid for `cap` bytes of writes.
#[no_mangle]
pub unsafe extern "C" fn horus_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    if buf.is_null() || cap == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let n = msg.len().min(cap - 1);
        ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
        *buf.add(n) = 0;
        n
    })
}

/// NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn horus_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Spectral entropy and top-`k` energy ratio of a row-major matrix.
///
/// # Safety
/// `data` must hold `rows * cols` doubles; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn horus_spectral_features(
    data: *const f64,
    rows: usize,
    cols: usize,
    k: usize,
    entropy_out: *mut f64,
    ratio_out: *mut f64,
) -> HorusStatus {
    guard(|| {
        if entropy_out.is_null() || ratio_out.is_null() {
            return Err(null("output pointer"));
        }
        if k == 0 {
            return Err(Failure(HorusStatus::InvalidInput, "k must be at least 1".into()));
        }
        let m = read_matrix(data, rows, cols, "data")?;
        let s = singular_values(&m)?;
        *entropy_out = spectral_entropy(&s);
        *ratio_out = topk_energy_ratio(&s, k);
        Ok(())
    })
}

/// Creates a server. On success `*out` owns a handle that must be released
/// with [`horus_server_free`].
///
/// # Safety
/// `config` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn horus_server_new(config: *const HorusServerConfig, out: *mut *mut HorusServer) -> HorusStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let mode = if cfg.top_m > 0 { DetectionMode::TopM(cfg.top_m) } else { DetectionMode::Percentile(cfg.percentile) };
        let detection = DetectionConfig { lambda: cfg.lambda, k: cfg.top_k, mode, source: FeatureSource::LoraA };
        detection.validate()?;
        if cfg.rank == 0 {
            return Err(Failure(HorusStatus::Config, "rank must be at least 1".into()));
        }
        let dims = BTreeMap::from([
            (LayerId::FeatureFirst, LayerDims::new(cfg.feature_first_d_in, cfg.feature_first_d_out)),
            (LayerId::Classifier, LayerDims::new(cfg.classifier_d_in, cfg.classifier_d_out)),
        ]);
        if dims.values().any(|d| d.d_in == 0 || d.d_out == 0) {
            return Err(Failure(HorusStatus::Config, "layer dimensions must be positive".into()));
        }
        let global = horus_core::sim::initial_global(cfg.rank, dims, cfg.seed)?;
        let server = HorusServer {
            global,
            detection,
            pending: BTreeMap::new(),
            last_flagged: Vec::new(),
            last_scores: BTreeMap::new(),
        };
        *out = Box::into_raw(Box::new(server));
        Ok(())
    })
}

/// Releases a server handle. Null is ignored.
///
/// # Safety
/// `server` must come from [`horus_server_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn horus_server_free(server: *mut HorusServer) {
    if !server.is_null() {
        drop(Box::from_raw(server));
    }
}

fn queue(server: &mut HorusServer, update: ClientUpdate) -> Result<(), Failure> {
    for (l, pair) in &update.layers {
        if !pair.dims().fits_within(&server.global.dims[l]) {
            return Err(Failure(
                HorusStatus::Config,
                format!("client {} layer {l} exceeds the global shape", update.client_id),
            ));
        }
    }
    if update.rank() != server.global.rank {
        return Err(Failure(
            HorusStatus::InvalidInput,
            format!("client {} has rank {}, server expects {}", update.client_id, update.rank(), server.global.rank),
        ));
    }
    server.pending.insert(update.client_id, update);
    Ok(())
}

/// Queues a client's factors for the next aggregation, replacing any
/// earlier submission from the same client in this round.
///
/// # Safety
/// `server` must be a live handle; `layers` must hold `n_layers` entries
/// whose matrix pointers are valid for their declared shapes.
#[no_mangle]
pub unsafe extern "C" fn horus_server_submit(
    server: *mut HorusServer,
    client_id: u32,
    arch_id: u32,
    rank: usize,
    layers: *const HorusLayerFactors,
    n_layers: usize,
) -> HorusStatus {
    guard(|| {
        let server = server.as_mut().ok_or_else(|| null("server"))?;
        if layers.is_null() {
            return Err(null("layers"));
        }
        let mut map = BTreeMap::new();
        for f in std::slice::from_raw_parts(layers, n_layers) {
            let a = read_matrix(f.a, rank, f.d_in, "layer a")?;
            let b = read_matrix(f.b, f.d_out, rank, "layer b")?;
            map.insert(layer_id(f.layer), LoraPair::new(a, b)?);
        }
        queue(server, ClientUpdate::new(client_id, arch_id, map)?)
    })
}

/// Queues a client update in the binary `HLRA` encoding.
///
/// # Safety
/// `server` must be a live handle and `bytes` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn horus_server_submit_encoded(server: *mut HorusServer, bytes: *const u8, len: usize) -> HorusStatus {
    guard(|| {
        let server = server.as_mut().ok_or_else(|| null("server"))?;
        if bytes.is_null() {
            return Err(null("bytes"));
        }
        let update = decode_update(std::slice::from_raw_parts(bytes, len))?;
        queue(server, update)
    })
}

/// Number of submissions waiting for the next aggregation.
///
/// # Safety
/// `server` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn horus_server_pending(server: *const HorusServer) -> usize {
    server.as_ref().map_or(0, |s| s.pending.len())
}

/// Scores, filters and aggregates the queued submissions, then clears the
/// queue. `summary` may be null.
///
/// # Safety
/// `server` must be a live handle; `summary` writable when non-null.
#[no_mangle]
pub unsafe extern "C" fn horus_server_aggregate(server: *mut HorusServer, summary: *mut HorusRoundSummary) -> HorusStatus {
    guard(|| {
        let server = server.as_mut().ok_or_else(|| null("server"))?;
        let updates = std::mem::take(&mut server.pending);
        let (next, detection, report) = horus_aggregate(&updates, &server.global, &server.detection)?;
        server.global = next;
        server.last_flagged = detection.flagged.iter().copied().collect();
        server.last_scores = detection.scores.iter().map(|(c, s)| (*c, s.score)).collect();
        if let Some(out) = summary.as_mut() {
            *out = HorusRoundSummary {
                round_index: server.global.round_index,
                submissions: updates.len(),
                flagged: server.last_flagged.len(),
                skipped: u8::from(report.skipped),
                threshold: detection.threshold,
            };
        }
        Ok(())
    })
}

/// Copies the ids flagged by the last aggregation into `ids`. `*count`
/// receives the number of flagged clients even when `cap` is too small.
///
/// # Safety
/// `server` must be a live handle, `ids` valid for `cap` writes (may be
/// null when `cap` is 0) and `count` writable.
#[no_mangle]
pub unsafe extern "C" fn horus_server_flagged(server: *const HorusServer, ids: *mut u32, cap: usize, count: *mut usize) -> HorusStatus {
    guard(|| {
        let server = server.as_ref().ok_or_else(|| null("server"))?;
        let count = count.as_mut().ok_or_else(|| null("count"))?;
        *count = server.last_flagged.len();
        if cap < server.last_flagged.len() {
            return Err(Failure(HorusStatus::BufferTooSmall, format!("need room for {} ids", server.last_flagged.len())));
        }
        if !server.last_flagged.is_empty() {
            if ids.is_null() {
                return Err(null("ids"));
            }
            ptr::copy_nonoverlapping(server.last_flagged.as_ptr(), ids, server.last_flagged.len());
        }
        Ok(())
    })
}

/// HOPS score of `client_id` from the last aggregation.
///
/// # Safety
/// `server` must be a live handle and `score` writable.
#[no_mangle]
pub unsafe extern "C" fn horus_server_score(server: *const HorusServer, client_id: u32, score: *mut f64) -> HorusStatus {
    guard(|| {
        let server = server.as_ref().ok_or_else(|| null("server"))?;
        let out = score.as_mut().ok_or_else(|| null("score"))?;
        *out = *server.last_scores.get(&client_id).ok_or_else(|| {
            Failure(HorusStatus::InvalidInput, format!("no score for client {client_id} in the last round"))
        })?;
        Ok(())
    })
}

/// Shape of a global factor.
///
/// # Safety
/// `server` must be a live handle; `rows` and `cols` writable.
#[no_mangle]
pub unsafe extern "C" fn horus_server_global_shape(
    server: *const HorusServer,
    layer: HorusLayer,
    factor: HorusFactor,
    rows: *mut usize,
    cols: *mut usize,
) -> HorusStatus {
    guard(|| {
        let server = server.as_ref().ok_or_else(|| null("server"))?;
        let (r, c) = (rows.as_mut().ok_or_else(|| null("rows"))?, cols.as_mut().ok_or_else(|| null("cols"))?);
        let gl = server.global.layer(layer_id(layer));
        let m = match factor {
            HorusFactor::A => &gl.a,
            HorusFactor::B => &gl.b,
        };
        (*r, *c) = m.shape();
        Ok(())
    })
}

/// Copies a global factor, row-major, into `buf`.
///
/// # Safety
/// `server` must be a live handle and `buf` valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn horus_server_global_factor(
    server: *const HorusServer,
    layer: HorusLayer,
    factor: HorusFactor,
    buf: *mut f64,
    cap: usize,
) -> HorusStatus {
    guard(|| {
        let server = server.as_ref().ok_or_else(|| null("server"))?;
        let gl = server.global.layer(layer_id(layer));
        let m = match factor {
            HorusFactor::A => &gl.a,
            HorusFactor::B => &gl.b,
        };
        if cap < m.len() {
            return Err(Failure(HorusStatus::BufferTooSmall, format!("need room for {} values", m.len())));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        let out = std::slice::from_raw_parts_mut(buf, m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out[i * m.ncols() + j] = m[(i, j)];
            }
        }
        Ok(())
    })
}

/// Human-readable name of a status code.
#[no_mangle]
pub extern "C" fn horus_status_name(status: HorusStatus) -> *const c_char {
    let s: &'static CStr = match status {
        HorusStatus::Ok => c"ok",
        HorusStatus::NullPointer => c"null pointer",
        HorusStatus::InvalidInput => c"invalid input",
        HorusStatus::Config => c"configuration error",
        HorusStatus::Invariant => c"invariant violation",
        HorusStatus::Encoding => c"malformed encoding",
        HorusStatus::Io => c"i/o error",
        HorusStatus::BufferTooSmall => c"buffer too small",
        HorusStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}
