//! The mapping service: keyframe ingestion with dedupe, covisibility-based
//! window selection, initial prediction and window refinement, plus depth
//! metrics.

mod service;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use log::{debug, info, warn};
use thiserror::Error;

use crate::depth_codec::{ConditioningSet, Decoder, DepthCode, LinearDecoder};
use crate::factors::Correspondence;
use crate::geometry::{Intrinsics, Pose};
use crate::image::DenseImage;
use crate::noise_sim::SparseObservation;
use crate::optimizer::{build_problem, refine_window, OptimizerConfig, SolveError, SolveReport};

pub use service::{MapperHandle, MapperService};

/// Reprojection error assigned to landmarks that have not been matched yet.
pub const UNMATCHED_REP_ERROR: f64 = 10.0;
/// Keyframes per optimization window.
pub const WINDOW_SIZE: usize = 4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("keyframe {id}: {reason}")]
    InvalidPacket { id: u64, reason: String },
    #[error("unknown keyframe {0}")]
    UnknownKeyframe(u64),
    #[error("no valid ground-truth pixels")]
    NoValidPixels,
    #[error("prediction is {0}x{1} but ground truth is {2}x{3}")]
    Dimensions(usize, usize, usize, usize),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("mapper thread stopped")]
    Disconnected,
}

/// One SLAM keyframe as delivered to the mapper.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframePacket {
    pub id: u64,
    pub timestamp: f64,
    /// Camera-to-world.
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub intensity: DenseImage,
    pub sparse_depth: DenseImage,
    pub rep_error: DenseImage,
    pub observations: Vec<SparseObservation>,
    /// Matches to other keyframes; `pixel_i` lies in this keyframe.
    pub matches: Vec<(u64, Vec<Correspondence>)>,
    pub gt_depth: Option<DenseImage>,
}

impl KeyframePacket {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |reason: String| PipelineError::InvalidPacket { id: self.id, reason };
        let k = &self.intrinsics;
        k.validate().map_err(|e| bad(e.to_string()))?;
        let dims = (k.width, k.height);
        let mut images = vec![("intensity", &self.intensity), ("sparse_depth", &self.sparse_depth), ("rep_error", &self.rep_error)];
        if let Some(gt) = &self.gt_depth {
            images.push(("gt_depth", gt));
        }
        for (name, img) in images {
            if (img.width(), img.height()) != dims {
                return Err(bad(format!(
                    "{name} is {}x{}, intrinsics say {}x{}",
                    img.width(),
                    img.height(),
                    dims.0,
                    dims.1
                )));
            }
        }
        if !self.timestamp.is_finite() {
            return Err(bad("non-finite timestamp".into()));
        }
        for (i, (&d, &r)) in self.sparse_depth.data().iter().zip(self.rep_error.data()).enumerate() {
            let valid = DenseImage::is_valid_depth(d);
            if valid && !(r >= 0.0 && r.is_finite()) {
                return Err(bad(format!("pixel {i}: rep_error {r} at a sparse point")));
            }
            if !valid && (d != 0.0 || r != 0.0) {
                return Err(bad(format!("pixel {i}: depth {d} / rep_error {r} where no sparse point is recorded")));
            }
        }
        for (other, list) in &self.matches {
            for c in list {
                if !k.contains(&c.pixel_i) || !k.contains(&c.pixel_j) {
                    return Err(bad(format!("match with keyframe {other} lies outside the image")));
                }
            }
        }
        Ok(())
    }

    pub fn conditioning(&self) -> ConditioningSet {
        ConditioningSet {
            intensity: self.intensity.clone(),
            sparse_depth: self.sparse_depth.clone(),
            rep_error: self.rep_error.clone(),
        }
    }

    pub fn landmark_ids(&self) -> BTreeSet<u64> {
        self.observations.iter().map(|o| o.landmark_id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ack {
    /// New keyframe; a window ending at it was scheduled.
    Scheduled,
    /// Known id: pose and sparse points were updated in place.
    Duplicate,
}

#[derive(Debug)]
pub struct MapperState {
    window_size: usize,
    packets: BTreeMap<u64, KeyframePacket>,
    landmarks: HashMap<u64, BTreeSet<u64>>,
    decoders: HashMap<u64, Arc<LinearDecoder>>,
    codes: HashMap<u64, DepthCode>,
    initial: BTreeMap<u64, DenseImage>,
    refined: BTreeMap<u64, DenseImage>,
    processed: BTreeSet<u64>,
    skipped: BTreeSet<u64>,
    pending: Option<Vec<u64>>,
    /// Number of initial (zero-code) predictions made.
    pub predictions: usize,
    /// Windows scheduled, including superseded ones.
    pub windows_scheduled: usize,
    pub windows_superseded: usize,
    pub windows_processed: usize,
}

impl Default for MapperState {
    fn default() -> Self {
        Self::with_window_size(WINDOW_SIZE)
    }
}

impl MapperState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_window_size(window_size: usize) -> Self {
        Self {
            window_size: window_size.max(1),
            packets: BTreeMap::new(),
            landmarks: HashMap::new(),
            decoders: HashMap::new(),
            codes: HashMap::new(),
            initial: BTreeMap::new(),
            refined: BTreeMap::new(),
            processed: BTreeSet::new(),
            skipped: BTreeSet::new(),
            pending: None,
            predictions: 0,
            windows_scheduled: 0,
            windows_superseded: 0,
            windows_processed: 0,
        }
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn packet(&self, id: u64) -> Option<&KeyframePacket> {
        self.packets.get(&id)
    }

    pub fn keyframe_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.packets.keys().copied()
    }

    pub fn is_processed(&self, id: u64) -> bool {
        self.processed.contains(&id)
    }

    pub fn processed(&self) -> &BTreeSet<u64> {
        &self.processed
    }

    pub fn skipped(&self) -> &BTreeSet<u64> {
        &self.skipped
    }

    pub fn pending_window(&self) -> Option<&[u64]> {
        self.pending.as_deref()
    }

    pub fn take_pending(&mut self) -> Option<Vec<u64>> {
        self.pending.take()
    }

    pub fn code(&self, id: u64) -> Option<&DepthCode> {
        self.codes.get(&id)
    }

    pub fn decoder(&self, id: u64) -> Option<&Arc<LinearDecoder>> {
        self.decoders.get(&id)
    }

    pub fn initial_depth(&self, id: u64) -> Option<&DenseImage> {
        self.initial.get(&id)
    }

    pub fn refined_depth(&self, id: u64) -> Option<&DenseImage> {
        self.refined.get(&id)
    }

    pub fn refined_depths(&self) -> &BTreeMap<u64, DenseImage> {
        &self.refined
    }

    pub fn initial_depths(&self) -> &BTreeMap<u64, DenseImage> {
        &self.initial
    }

    fn timestamp(&self, id: u64) -> f64 {
        self.packets[&id].timestamp
    }
}

/// Accepts a keyframe. New ids schedule a window ending at them, replacing
/// any window still pending; known ids only refresh pose and sparse points.
pub fn ingest(packet: KeyframePacket, state: &mut MapperState) -> Result<Ack, PipelineError> {
    packet.validate()?;
    let id = packet.id;
    state.landmarks.insert(id, packet.landmark_ids());
    if let Some(existing) = state.packets.get_mut(&id) {
        existing.pose = packet.pose;
        existing.timestamp = packet.timestamp;
        existing.sparse_depth = packet.sparse_depth;
        existing.rep_error = packet.rep_error;
        existing.observations = packet.observations;
        existing.matches = packet.matches;
        debug!("keyframe {id} re-sent; updated in place");
        return Ok(Ack::Duplicate);
    }
    state.packets.insert(id, packet);
    let window = select_window(id, state);
    if state.pending.replace(window).is_some() {
        state.windows_superseded += 1;
    }
    state.windows_scheduled += 1;
    Ok(Ack::Scheduled)
}

/// Latest keyframe plus up to `window_size - 1` others: the most covisible (shared
/// landmark ids, ties to the newer keyframe), topped up with the most recent.
/// Returned in timestamp order.
pub fn select_window(latest_id: u64, state: &MapperState) -> Vec<u64> {
    let Some(latest) = state.landmarks.get(&latest_id) else {
        return Vec::new();
    };
    let mut others: Vec<(usize, f64, u64)> = state
        .packets
        .keys()
        .filter(|&&id| id != latest_id && !state.skipped.contains(&id))
        .map(|&id| {
            let shared = state.landmarks.get(&id).map_or(0, |l| l.intersection(latest).count());
            (shared, state.timestamp(id), id)
        })
        .collect();
    others.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.total_cmp(&a.1)).then(b.2.cmp(&a.2)));
    let slots = state.window_size - 1;
    let mut chosen: Vec<u64> = others.iter().filter(|o| o.0 > 0).take(slots).map(|o| o.2).collect();
    if chosen.len() < slots {
        let mut recent: Vec<&(usize, f64, u64)> = others.iter().filter(|o| !chosen.contains(&o.2)).collect();
        recent.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.2.cmp(&a.2)));
        let need = slots - chosen.len();
        chosen.extend(recent.into_iter().take(need).map(|o| o.2));
    }
    chosen.push(latest_id);
    chosen.sort_by(|&a, &b| state.timestamp(a).total_cmp(&state.timestamp(b)).then(a.cmp(&b)));
    chosen
}

#[derive(Debug, Clone)]
pub struct WindowOutcome {
    /// Keyframes actually optimized, in window order.
    pub ids: Vec<u64>,
    pub skipped: Vec<u64>,
    pub report: Option<SolveReport>,
}

/// Conditions the decoder and decodes the zero code for a keyframe seen for
/// the first time. Returns false when the keyframe had to be skipped.
fn predict(id: u64, state: &mut MapperState, decoder: &Decoder) -> Result<bool, PipelineError> {
    if state.decoders.contains_key(&id) {
        return Ok(true);
    }
    let packet = state.packets.get(&id).ok_or(PipelineError::UnknownKeyframe(id))?;
    match decoder.condition(&packet.conditioning()) {
        Ok(dec) => {
            let code = DepthCode::zeros(dec.code_size());
            let depth = dec.decode(&code).map_err(SolveError::from)?.depth;
            state.initial.insert(id, depth);
            state.codes.insert(id, code);
            state.decoders.insert(id, Arc::new(dec));
            state.predictions += 1;
            Ok(true)
        }
        Err(e) => {
            warn!("keyframe {id} skipped: {e}");
            state.skipped.insert(id);
            Ok(false)
        }
    }
}

/// Predicts depth for new keyframes in the window and refines the window.
pub fn process_window(
    window: &[u64],
    state: &mut MapperState,
    decoder: &Decoder,
    config: &OptimizerConfig,
) -> Result<WindowOutcome, PipelineError> {
    let mut ids = Vec::with_capacity(window.len());
    let mut skipped = Vec::new();
    for &id in window {
        if !state.packets.contains_key(&id) {
            return Err(PipelineError::UnknownKeyframe(id));
        }
        if state.skipped.contains(&id) {
            skipped.push(id);
            continue;
        }
        if !predict(id, state, decoder)? {
            skipped.push(id);
            continue;
        }
        ids.push(id);
    }
    let mut report = None;
    if ids.len() >= 2 {
        let packets: Vec<&KeyframePacket> = ids.iter().map(|id| &state.packets[id]).collect();
        let codes = ids.iter().map(|id| state.codes[id].clone()).collect();
        let decoders: Vec<Arc<LinearDecoder>> = ids.iter().map(|id| Arc::clone(&state.decoders[id])).collect();
        let problem = build_problem(&packets, codes, &decoders, config)?;
        let refined = refine_window(problem)?;
        for ((id, code), depth) in ids.iter().zip(refined.codes).zip(refined.depths) {
            state.codes.insert(*id, code);
            state.refined.insert(*id, depth);
            state.processed.insert(*id);
        }
        info!(
            "window {:?}: energy {:.4e} -> {:.4e} in {} steps",
            ids, refined.report.initial_energy, refined.report.final_energy, refined.report.iterations
        );
        report = Some(refined.report);
    } else {
        for id in &ids {
            let depth = state.initial[id].clone();
            state.refined.entry(*id).or_insert(depth);
            state.processed.insert(*id);
        }
    }
    state.windows_processed += 1;
    Ok(WindowOutcome { ids, skipped, report })
}

/// Runs the pending window, if any. Keyframes whose own window was
/// superseded before it ran still get an initial prediction.
pub fn process_pending(
    state: &mut MapperState,
    decoder: &Decoder,
    config: &OptimizerConfig,
) -> Result<Option<WindowOutcome>, PipelineError> {
    let Some(w) = state.take_pending() else {
        return Ok(None);
    };
    let outcome = process_window(&w, state, decoder, config)?;
    let unseen: Vec<u64> = state
        .packets
        .keys()
        .filter(|id| !state.decoders.contains_key(id) && !state.skipped.contains(id))
        .copied()
        .collect();
    for id in unseen {
        predict(id, state, decoder)?;
    }
    Ok(Some(outcome))
}

/// Deterministic replay: ingest each packet and process its window before
/// the next arrives.
pub fn run_lockstep(
    packets: impl IntoIterator<Item = KeyframePacket>,
    mut state: MapperState,
    decoder: &Decoder,
    config: &OptimizerConfig,
) -> Result<MapperState, PipelineError> {
    for p in packets {
        ingest(p, &mut state)?;
        process_pending(&mut state, decoder, config)?;
    }
    Ok(state)
}

/// Mean absolute and root-mean-square error over pixels with valid ground truth.
pub fn evaluate(pred: &DenseImage, gt: &DenseImage) -> Result<(f64, f64), PipelineError> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(PipelineError::Dimensions(pred.width(), pred.height(), gt.width(), gt.height()));
    }
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if !DenseImage::is_valid_depth(g) {
            continue;
        }
        let e = p as f64 - g as f64;
        abs += e.abs();
        sq += e * e;
        n += 1;
    }
    if n == 0 {
        return Err(PipelineError::NoValidPixels);
    }
    Ok((abs / n as f64, (sq / n as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Initial,
    Refined,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::Refined => "refined",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub kf_id: u64,
    pub stage: Stage,
    pub mae: f64,
    pub rmse: f64,
}

/// Per-keyframe metrics for every keyframe that has ground truth.
pub fn collect_metrics(state: &MapperState) -> Result<Vec<MetricsRow>, PipelineError> {
    let mut rows = Vec::new();
    for (id, packet) in &state.packets {
        let Some(gt) = &packet.gt_depth else { continue };
        for (stage, map) in [(Stage::Initial, &state.initial), (Stage::Refined, &state.refined)] {
            if let Some(pred) = map.get(id) {
                let (mae, rmse) = evaluate(pred, gt)?;
                rows.push(MetricsRow { kf_id: *id, stage, mae, rmse });
            }
        }
    }
    Ok(rows)
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("kf_id,stage,mae,rmse\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6}", r.kf_id, r.stage.name(), r.mae, r.rmse);
    }
    s
}
