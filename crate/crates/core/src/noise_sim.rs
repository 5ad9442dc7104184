//! Simulation of SLAM-like sparse inputs: keypoint-based depth
//! sparsification, an exponentially modified Gaussian (EMG) model of
//! reprojection errors, and perturbation of sparse depths along rays through
//! a virtual keyframe so that each point's reprojection error in the
//! reference frame matches a sampled value.

use log::{debug, warn};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use thiserror::Error;

use crate::depth_codec::ConditioningSet;
use crate::geometry::{project, unproject, Intrinsics, PixelCoord, Pose};
use crate::image::{Channel, DenseImage, ImageError};

/// Maximum distance between a reference frame and its virtual keyframe.
pub const MAX_VIRTUAL_BASELINE: f64 = 2.0;
/// Keypoints kept per frame when simulating training inputs.
pub const DEFAULT_KEYPOINTS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("invalid EMG parameters: {0}")]
    InvalidParams(String),
    #[error("sample count must be at least 1")]
    EmptyRequest,
    #[error("no valid depth anywhere in the frame")]
    NoValidDepth,
    #[error("virtual keyframe is {0:.3} m from the reference (limit {MAX_VIRTUAL_BASELINE} m)")]
    BaselineTooLong(f64),
    #[error("point not visible: {0}")]
    NotVisible(String),
    #[error("root search failed: {0}")]
    RootSearch(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// How the caption's "Mean" parameter is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanConvention {
    /// `loc` is the location of the Gaussian component.
    #[default]
    Location,
    /// `loc` is the mean of the whole distribution; the Gaussian location is
    /// `loc - k * scale`.
    DistributionMean,
}

/// Exponentially modified Gaussian: `Normal(loc, scale^2) + Exp(1 / (k * scale))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmgParams {
    pub k: f64,
    pub loc: f64,
    pub scale: f64,
    pub convention: MeanConvention,
}

impl Default for EmgParams {
    /// Fit of ORB-SLAM3 reprojection errors: K = 4.31, loc = 0.44, scale = 0.20.
    fn default() -> Self {
        Self { k: 4.31, loc: 0.44, scale: 0.20, convention: MeanConvention::Location }
    }
}

impl EmgParams {
    pub fn new(k: f64, loc: f64, scale: f64) -> Result<Self, NoiseError> {
        let p = Self { k, loc, scale, convention: MeanConvention::Location };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        if !(self.k > 0.0 && self.scale > 0.0 && self.loc.is_finite() && self.k.is_finite() && self.scale.is_finite()) {
            return Err(NoiseError::InvalidParams(format!(
                "need k > 0 and scale > 0, got k={} loc={} scale={}",
                self.k, self.loc, self.scale
            )));
        }
        Ok(())
    }

    /// Location of the Gaussian component.
    pub fn gaussian_location(&self) -> f64 {
        match self.convention {
            MeanConvention::Location => self.loc,
            MeanConvention::DistributionMean => self.loc - self.k * self.scale,
        }
    }

    /// Mean of the untruncated distribution.
    pub fn mean(&self) -> f64 {
        self.gaussian_location() + self.k * self.scale
    }

    /// Variance of the untruncated distribution.
    pub fn variance(&self) -> f64 {
        self.scale * self.scale * (1.0 + self.k * self.k)
    }
}

/// Streaming EMG sampler; negative draws are rejected and redrawn.
pub struct EmgSampler {
    normal: Normal<f64>,
    exp: Exp<f64>,
}

impl EmgSampler {
    pub fn new(params: &EmgParams) -> Result<Self, NoiseError> {
        params.validate()?;
        let normal = Normal::new(params.gaussian_location(), params.scale)
            .map_err(|e| NoiseError::InvalidParams(e.to_string()))?;
        let exp = Exp::new(1.0 / (params.k * params.scale)).map_err(|e| NoiseError::InvalidParams(e.to_string()))?;
        Ok(Self { normal, exp })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let x = self.normal.sample(rng) + self.exp.sample(rng);
            if x >= 0.0 {
                return x;
            }
        }
    }
}

pub fn sample_emg(params: &EmgParams, rng_seed: u64, n: usize) -> Result<Vec<f64>, NoiseError> {
    if n == 0 {
        return Err(NoiseError::EmptyRequest);
    }
    let sampler = EmgSampler::new(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok((0..n).map(|_| sampler.sample(&mut rng)).collect())
}

/// A landmark as seen from one keyframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseObservation {
    pub landmark_id: u64,
    pub pixel: PixelCoord,
    /// Depth along the camera z axis, meters.
    pub depth: f64,
    /// Reprojection error, pixels.
    pub rep_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sparsification {
    pub observations: Vec<SparseObservation>,
    /// Number of observations that came from the corner detector; the rest
    /// are random padding.
    pub corner_count: usize,
    /// Fewer valid pixels than requested points: every valid pixel was returned.
    pub short: bool,
}

/// Non-max-suppression radius of the corner detector, pixels.
pub const NMS_RADIUS: usize = 5;

/// Minimum-eigenvalue corner score of the 3x3 structure tensor built from
/// central-difference gradients.
pub fn corner_scores(img: &DenseImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for v in 1..h.saturating_sub(1) {
        for u in 1..w.saturating_sub(1) {
            gx[v * w + u] = 0.5 * (img.get(u + 1, v) as f64 - img.get(u - 1, v) as f64);
            gy[v * w + u] = 0.5 * (img.get(u, v + 1) as f64 - img.get(u, v - 1) as f64);
        }
    }
    let mut score = vec![0.0; w * h];
    for v in 2..h.saturating_sub(2) {
        for u in 2..w.saturating_sub(2) {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for dv in 0..3 {
                for du in 0..3 {
                    let i = (v + dv - 1) * w + (u + du - 1);
                    a += gx[i] * gx[i];
                    b += gx[i] * gy[i];
                    c += gy[i] * gy[i];
                }
            }
            let tr = 0.5 * (a + c);
            let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            score[v * w + u] = (tr - disc).max(0.0);
        }
    }
    score
}

/// Strongest corners after greedy non-max suppression, strongest first.
pub fn detect_corners(img: &DenseImage, radius: usize) -> Vec<(usize, usize, f64)> {
    let w = img.width();
    let scores = corner_scores(img);
    let max = scores.iter().cloned().fold(0.0, f64::max);
    if max <= 1e-12 {
        return Vec::new();
    }
    let threshold = 1e-3 * max;
    let mut cand: Vec<(usize, f64)> = scores.iter().enumerate().filter(|(_, &s)| s > threshold).map(|(i, &s)| (i, s)).collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    let mut blocked = vec![false; scores.len()];
    let h = img.height();
    for (i, s) in cand {
        if blocked[i] {
            continue;
        }
        let (u, v) = (i % w, i / w);
        kept.push((u, v, s));
        for bv in v.saturating_sub(radius)..=(v + radius).min(h - 1) {
            for bu in u.saturating_sub(radius)..=(u + radius).min(w - 1) {
                blocked[bv * w + bu] = true;
            }
        }
    }
    kept
}

/// Picks `n_points` sparse depth samples at corner-like pixels, padding with
/// uniformly random valid pixels when there are too few corners.
pub fn sparsify_depth(
    intensity: &DenseImage,
    depth: &DenseImage,
    n_points: usize,
    rng_seed: u64,
) -> Result<Sparsification, NoiseError> {
    intensity.check_dims(depth)?;
    if n_points == 0 {
        return Err(NoiseError::EmptyRequest);
    }
    let w = depth.width();
    let valid: Vec<usize> = (0..depth.len()).filter(|&i| DenseImage::is_valid_depth(depth.data()[i])).collect();
    if valid.is_empty() {
        return Err(NoiseError::NoValidDepth);
    }
    let mut chosen: Vec<usize> = detect_corners(intensity, NMS_RADIUS)
        .into_iter()
        .map(|(u, v, _)| v * w + u)
        .filter(|&i| DenseImage::is_valid_depth(depth.data()[i]))
        .take(n_points)
        .collect();
    let corner_count = chosen.len();
    let short = valid.len() < n_points;
    if chosen.len() < n_points {
        let mut taken = vec![false; depth.len()];
        chosen.iter().for_each(|&i| taken[i] = true);
        let mut rest: Vec<usize> = valid.into_iter().filter(|&i| !taken[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        rest.shuffle(&mut rng);
        let need = n_points - chosen.len();
        chosen.extend(rest.into_iter().take(need));
    }
    let observations = chosen
        .into_iter()
        .enumerate()
        .map(|(n, i)| SparseObservation {
            landmark_id: n as u64,
            pixel: PixelCoord::new((i % w) as f64, (i / w) as f64),
            depth: depth.data()[i] as f64,
            rep_error: 0.0,
        })
        .collect();
    Ok(Sparsification { observations, corner_count, short })
}

/// Reprojection-error tolerance of the root search, pixels.
pub const PERTURB_TOLERANCE: f64 = 1e-3;
const PERTURB_MAX_ITERS: usize = 60;
/// Coarse samples used to bracket the first crossing before bisection.
const PERTURB_SCAN_STEPS: usize = 256;

/// Moves an observation's 3D point along the ray through the virtual
/// keyframe's camera center until its reprojection in the reference frame is
/// displaced by `target_err` pixels. Poses are camera-to-world.
///
/// The displacement `t` (meters along the unit ray direction, positive away
/// from the virtual camera) is searched over `[-0.5 d, 2 d]` restricted to
/// the side given by `sign`: the first crossing of the target is bracketed by
/// a coarse scan and refined by bisection. When that side cannot reach the
/// target (the ray runs close to the epipole), the other side is tried.
pub fn perturb_along_ray(
    obs: &SparseObservation,
    ref_pose: &Pose,
    virt_pose: &Pose,
    k: &Intrinsics,
    target_err: f64,
    sign: f64,
) -> Result<SparseObservation, NoiseError> {
    perturb_point_along_ray(obs, ref_pose, virt_pose, k, target_err, sign).map(|p| p.observation)
}

/// Output of [`perturb_point_along_ray`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbedPoint {
    /// Keypoint pixel unchanged, depth replaced by the displaced point's z.
    pub observation: SparseObservation,
    /// The displaced 3D point in world coordinates.
    pub point_world: Vector3<f64>,
}

/// Like [`perturb_along_ray`] but also returns the displaced 3D point.
pub fn perturb_point_along_ray(
    obs: &SparseObservation,
    ref_pose: &Pose,
    virt_pose: &Pose,
    k: &Intrinsics,
    target_err: f64,
    sign: f64,
) -> Result<PerturbedPoint, NoiseError> {
    match perturb_one_side(obs, ref_pose, virt_pose, k, target_err, sign) {
        Err(NoiseError::RootSearch(first)) => perturb_one_side(obs, ref_pose, virt_pose, k, target_err, -sign)
            .map_err(|e| match e {
                NoiseError::RootSearch(second) => NoiseError::RootSearch(format!("{first}; other side: {second}")),
                other => other,
            }),
        r => r,
    }
}

fn perturb_one_side(
    obs: &SparseObservation,
    ref_pose: &Pose,
    virt_pose: &Pose,
    k: &Intrinsics,
    target_err: f64,
    sign: f64,
) -> Result<PerturbedPoint, NoiseError> {
    let baseline = (ref_pose.center() - virt_pose.center()).norm();
    if baseline > MAX_VIRTUAL_BASELINE {
        return Err(NoiseError::BaselineTooLong(baseline));
    }
    if !(target_err >= 0.0) {
        return Err(NoiseError::InvalidParams(format!("target error {target_err} must be non-negative")));
    }
    let p_ref = unproject(&obs.pixel, obs.depth, k).map_err(|e| NoiseError::NotVisible(e.to_string()))?;
    let p_world = ref_pose.transform_point(&p_ref);
    if target_err == 0.0 {
        return Ok(PerturbedPoint { observation: *obs, point_world: p_world });
    }
    let virt_inv = virt_pose.inverse();
    project(&virt_inv.transform_point(&p_world), k).map_err(|e| NoiseError::NotVisible(format!("virtual frame: {e}")))?;

    let c_v = virt_pose.center();
    let ray = p_world - c_v;
    let range = ray.norm();
    if range < 1e-9 {
        return Err(NoiseError::NotVisible("point coincides with the virtual camera center".into()));
    }
    let dir = ray / range;
    let ref_inv = ref_pose.inverse();

    // Reference-frame displacement after moving by t; None when the point
    // leaves the valid region (behind either camera).
    let displaced = |t: f64| -> Option<(f64, Vector3<f64>, Vector3<f64>)> {
        if range + t <= 1e-6 * range {
            return None;
        }
        let p = p_world + dir * t;
        let pc = ref_inv.transform_point(&p);
        let x = project(&pc, k).ok()?;
        Some((x.distance(&obs.pixel), pc, p))
    };

    let t_end = if sign >= 0.0 { 2.0 * obs.depth } else { -0.5 * obs.depth };
    let mut lo = 0.0;
    let mut hi = None;
    for s in 1..=PERTURB_SCAN_STEPS {
        let t = t_end * s as f64 / PERTURB_SCAN_STEPS as f64;
        match displaced(t) {
            Some((e, _, _)) if e >= target_err => {
                hi = Some(t);
                break;
            }
            Some(_) => lo = t,
            None => break,
        }
    }
    let mut hi = hi.ok_or_else(|| {
        NoiseError::RootSearch(format!(
            "reference displacement never reaches {target_err:.3} px within the depth bounds (point near the epipole?)"
        ))
    })?;

    let mut best = None;
    for _ in 0..PERTURB_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        let (e, pc, pw) = displaced(mid).ok_or_else(|| NoiseError::RootSearch("left valid region during bisection".into()))?;
        if (e - target_err).abs() < PERTURB_TOLERANCE {
            best = Some((pc, pw));
            break;
        }
        if e < target_err {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (pc, pw) = best.ok_or_else(|| NoiseError::RootSearch("bisection did not converge".into()))?;
    if !(pc.z > 0.0) {
        return Err(NoiseError::NotVisible("perturbed point is behind the reference camera".into()));
    }
    Ok(PerturbedPoint { observation: SparseObservation { depth: pc.z, rep_error: target_err, ..*obs }, point_world: pw })
}

/// A frame with ground-truth depth, as used for training-pair generation.
#[derive(Debug, Clone)]
pub struct GroundTruthFrame<'a> {
    pub intensity: &'a DenseImage,
    pub depth: &'a DenseImage,
    pub pose: Pose,
}

/// Result of [`build_training_pair`].
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub conditioning: ConditioningSet,
    pub gt_depth: DenseImage,
    pub observations: Vec<SparseObservation>,
    /// Points dropped because the root search failed.
    pub dropped: usize,
}

/// Writes observations into sparse-depth and reprojection-error images.
pub fn rasterize_observations(obs: &[SparseObservation], width: usize, height: usize) -> (DenseImage, DenseImage) {
    let mut sparse = DenseImage::filled(width, height, Channel::Depth, 0.0);
    let mut rep = DenseImage::filled(width, height, Channel::ReprojectionError, 0.0);
    for o in obs {
        let (u, v) = (o.pixel.u.round(), o.pixel.v.round());
        if u < 0.0 || v < 0.0 || u >= width as f64 || v >= height as f64 || !(o.depth > 0.0) {
            continue;
        }
        let (u, v) = (u as usize, v as usize);
        // First writer wins so repeated pixels stay deterministic.
        if sparse.get(u, v) == 0.0 {
            sparse.set(u, v, o.depth as f32);
            rep.set(u, v, o.rep_error as f32);
        }
    }
    (sparse, rep)
}

/// Simulates SLAM-like conditioning for one frame: sparsify, draw one EMG
/// reprojection error per point, and perturb each point along its ray
/// through the neighbour ("virtual keyframe") with a random sign.
pub fn build_training_pair(
    frame: &GroundTruthFrame,
    neighbor_pose: &Pose,
    k: &Intrinsics,
    emg: Option<&EmgParams>,
    n_points: usize,
    seed: u64,
) -> Result<TrainingPair, NoiseError> {
    let baseline = (frame.pose.center() - neighbor_pose.center()).norm();
    if baseline > MAX_VIRTUAL_BASELINE {
        return Err(NoiseError::BaselineTooLong(baseline));
    }
    let sparse = sparsify_depth(frame.intensity, frame.depth, n_points, seed)?;
    if sparse.short {
        warn!("only {} valid depth pixels for {} requested points", sparse.observations.len(), n_points);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let sampler = emg.map(EmgSampler::new).transpose()?;
    let mut out = Vec::with_capacity(sparse.observations.len());
    let mut dropped = 0;
    for o in &sparse.observations {
        let target = sampler.as_ref().map_or(0.0, |s| s.sample(&mut rng));
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        match perturb_along_ray(o, &frame.pose, neighbor_pose, k, target, sign) {
            Ok(p) => out.push(p),
            Err(e) => {
                debug!("dropping landmark {}: {e}", o.landmark_id);
                dropped += 1;
            }
        }
    }
    let (sparse_depth, rep_error) = rasterize_observations(&out, frame.depth.width(), frame.depth.height());
    let conditioning = ConditioningSet::new(frame.intensity.clone(), sparse_depth, rep_error)
        .map_err(|e| NoiseError::InvalidParams(e.to_string()))?;
    Ok(TrainingPair { conditioning, gt_depth: frame.depth.clone(), observations: out, dropped })
}
