//! Residuals and code Jacobians for the window factor graph: photometric,
//! reprojection, sparse geometric and zero-code prior factors, with Huber
//! robustification applied per residual block.
//!
//! All decoders are affine in proximity space, so every Jacobian is the
//! chain `d residual / d prox * d prox / d code`, where the second factor is
//! a (bilinearly interpolated) row of the decoder Jacobian.

use log::debug;
use nalgebra::{DMatrix, Matrix2x3, Matrix3, RowVector2, Vector2, Vector3};

use crate::depth_codec::{DepthCode, LinearDecoder};
use crate::geometry::{Intrinsics, PixelCoord, Pose};
use crate::image::DenseImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorKind {
    Photometric,
    Reprojection,
    Geometric,
    Prior,
}

impl FactorKind {
    pub fn name(self) -> &'static str {
        match self {
            FactorKind::Photometric => "photometric",
            FactorKind::Reprojection => "reprojection",
            FactorKind::Geometric => "geometric",
            FactorKind::Prior => "prior",
        }
    }
}

/// A matched keypoint pair between frames i and j.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pixel_i: PixelCoord,
    pub pixel_j: PixelCoord,
    pub landmark_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuberParams {
    pub delta: f64,
}

impl HuberParams {
    pub fn new(delta: f64) -> Option<Self> {
        (delta > 0.0 && delta.is_finite()).then_some(Self { delta })
    }

    /// Huber cost of a residual norm: `s^2` inside the knee, `2 delta s - delta^2` outside.
    pub fn rho(&self, s: f64) -> f64 {
        if s <= self.delta {
            s * s
        } else {
            2.0 * self.delta * s - self.delta * self.delta
        }
    }
}

/// IRLS weight of the Huber cost for a residual of norm `r`.
pub fn huber_weight(residual_norm: f64, p: HuberParams) -> f64 {
    if residual_norm <= p.delta {
        1.0
    } else {
        p.delta / residual_norm
    }
}

/// Evaluated factor. Residuals are grouped into blocks of `block_dim`
/// values; Huber weighting acts on each block's Euclidean norm.
#[derive(Debug, Clone)]
pub struct FactorResidual {
    pub kind: FactorKind,
    pub block_dim: usize,
    pub residuals: Vec<f64>,
    /// One matrix per involved code (`[c_i]` or `[c_i, c_j]`), each with one
    /// row per residual and one column per code entry. Empty when only
    /// residuals were requested.
    pub jacobians: Vec<DMatrix<f64>>,
    /// Per-block IRLS weights.
    pub robust_weights: Vec<f64>,
    /// `None` means purely quadratic.
    pub huber: Option<HuberParams>,
}

impl FactorResidual {
    fn empty(kind: FactorKind, block_dim: usize, huber: Option<HuberParams>) -> Self {
        Self { kind, block_dim, residuals: Vec::new(), jacobians: Vec::new(), robust_weights: Vec::new(), huber }
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }

    pub fn block_count(&self) -> usize {
        self.residuals.len() / self.block_dim
    }

    pub fn block_norm(&self, b: usize) -> f64 {
        let r = &self.residuals[b * self.block_dim..(b + 1) * self.block_dim];
        r.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Robustified energy `sum_b rho(|r_b|)`.
    pub fn energy(&self) -> f64 {
        (0..self.block_count())
            .map(|b| {
                let s = self.block_norm(b);
                self.huber.map_or(s * s, |h| h.rho(s))
            })
            .sum()
    }

    fn finish(mut self) -> Self {
        self.robust_weights = (0..self.block_count())
            .map(|b| self.huber.map_or(1.0, |h| huber_weight(self.block_norm(b), h)))
            .collect();
        self
    }
}

/// One keyframe as seen by the factors.
#[derive(Debug, Clone, Copy)]
pub struct FactorFrame<'a> {
    pub intensity: &'a DenseImage,
    /// Camera-to-world.
    pub pose: &'a Pose,
    pub decoder: &'a LinearDecoder,
}

/// Whether to compute Jacobians alongside residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Eval {
    Residuals,
    Linearize,
}

struct Rigid {
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

impl Rigid {
    fn between(frame_i: &Pose, frame_j: &Pose) -> Self {
        let t_ji = Pose::relative(frame_i, frame_j);
        Self { r: t_ji.rotation_matrix(), t: t_ji.translation() }
    }
}

/// A pixel of frame i warped into frame j through a proximity value, with
/// derivatives with respect to that proximity.
struct ProxWarp {
    pixel: PixelCoord,
    depth_j: f64,
    d_pixel: Vector2<f64>,
    d_depth_j: f64,
}

/// Below this proximity the factors continue depth along the tangent of
/// `a/p - a`, so codes that push a pixel past infinity still see a residual
/// and a gradient back instead of silently dropping the sample.
pub const MIN_FACTOR_PROXIMITY: f64 = 0.02;

/// Depth and `d depth / d prox` as seen by the factors.
pub fn factor_depth(prox: f64, a: f64) -> Option<(f64, f64)> {
    if !(prox < 1.0) {
        return None;
    }
    if prox >= MIN_FACTOR_PROXIMITY {
        return Some((a / prox - a, -a / (prox * prox)));
    }
    let p0 = MIN_FACTOR_PROXIMITY;
    let slope = -a / (p0 * p0);
    Some((a / p0 - a + slope * (prox - p0), slope))
}

fn warp_proximity(x: &PixelCoord, prox: f64, a: f64, rig: &Rigid, k: &Intrinsics) -> Option<ProxWarp> {
    let (d, dd_dp) = factor_depth(prox, a)?;
    let ray = k.ray(x);
    let p_j = rig.r * (ray * d) + rig.t;
    if !(p_j.z > 1e-9) {
        return None;
    }
    let pixel = PixelCoord::new(k.fx * p_j.x / p_j.z + k.cx, k.fy * p_j.y / p_j.z + k.cy);
    let dp_dd = rig.r * ray;
    let jp: Matrix2x3<f64> = k.projection_jacobian(&p_j);
    Some(ProxWarp { pixel, depth_j: p_j.z, d_pixel: jp * dp_dd * dd_dp, d_depth_j: dp_dd.z * dd_dp })
}

fn finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

fn assemble(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

/// `r(x) = I_i[x] - I_j[w_ji(x, D_i[x])]` for every in-view sample, with
/// the Jacobian with respect to `c_i`.
pub fn photometric_factor(
    kf_i: &FactorFrame,
    kf_j: &FactorFrame,
    code_i: &DepthCode,
    k: &Intrinsics,
    samples: &[PixelCoord],
    huber: Option<HuberParams>,
    eval: Eval,
) -> FactorResidual {
    photometric_with_images(kf_i, kf_j, kf_i.intensity, kf_j.intensity, code_i, k, samples, huber, eval)
}

/// Photometric factor with explicit (for instance blurred) intensity images.
#[allow(clippy::too_many_arguments)]
pub fn photometric_with_images(
    kf_i: &FactorFrame,
    kf_j: &FactorFrame,
    img_i: &DenseImage,
    img_j: &DenseImage,
    code_i: &DepthCode,
    k: &Intrinsics,
    samples: &[PixelCoord],
    huber: Option<HuberParams>,
    eval: Eval,
) -> FactorResidual {
    let dec = kf_i.decoder;
    let n = dec.code_size();
    let a = dec.proximity_params().a;
    let rig = Rigid::between(kf_i.pose, kf_j.pose);
    let mut out = FactorResidual::empty(FactorKind::Photometric, 1, huber);
    let mut jac = Vec::new();
    let mut row = vec![0.0; n];
    for x in samples {
        let Some(p) = dec.sample(x.u, x.v, code_i.as_slice(), &mut row) else { continue };
        let Some(w) = warp_proximity(x, p.value, a, &rig, k) else { continue };
        if !k.contains(&w.pixel) {
            continue;
        }
        let (Some(si), Some(sj)) = (img_i.sample(x.u, x.v), img_j.sample(w.pixel.u, w.pixel.v)) else { continue };
        let r = si.value - sj.value;
        if !r.is_finite() {
            continue;
        }
        let g = -(RowVector2::new(sj.d_du, sj.d_dv) * w.d_pixel)[0];
        if eval == Eval::Linearize {
            let start = jac.len();
            jac.extend(row.iter().map(|&j| g * j));
            if !finite(&jac[start..]) {
                jac.truncate(start);
                continue;
            }
        }
        out.residuals.push(r);
    }
    if out.is_empty() {
        debug!("photometric factor has no in-view samples");
    }
    if eval == Eval::Linearize {
        out.jacobians.push(assemble(out.residuals.len(), n, &jac));
    }
    out.finish()
}

/// `r = w_ji(x_i, D_i[x_i]) - x_j` per match, a 2-vector in pixels.
pub fn reprojection_factor(
    kf_i: &FactorFrame,
    kf_j: &FactorFrame,
    code_i: &DepthCode,
    k: &Intrinsics,
    matches: &[Correspondence],
    huber: Option<HuberParams>,
    eval: Eval,
) -> FactorResidual {
    let dec = kf_i.decoder;
    let n = dec.code_size();
    let a = dec.proximity_params().a;
    let rig = Rigid::between(kf_i.pose, kf_j.pose);
    let mut out = FactorResidual::empty(FactorKind::Reprojection, 2, huber);
    let mut jac = Vec::new();
    let mut row = vec![0.0; n];
    for m in matches {
        let x = &m.pixel_i;
        let Some(p) = dec.sample(x.u, x.v, code_i.as_slice(), &mut row) else { continue };
        let Some(w) = warp_proximity(x, p.value, a, &rig, k) else { continue };
        if !k.contains(&w.pixel) {
            continue;
        }
        let r = [w.pixel.u - m.pixel_j.u, w.pixel.v - m.pixel_j.v];
        if !finite(&r) {
            continue;
        }
        if eval == Eval::Linearize {
            let start = jac.len();
            for axis in 0..2 {
                jac.extend(row.iter().map(|&j| w.d_pixel[axis] * j));
            }
            if !finite(&jac[start..]) {
                jac.truncate(start);
                continue;
            }
        }
        out.residuals.extend_from_slice(&r);
    }
    if out.is_empty() {
        debug!("reprojection factor: all matches out of view");
    }
    if eval == Eval::Linearize {
        out.jacobians.push(assemble(out.residuals.len(), n, &jac));
    }
    out.finish()
}

/// `r(x) = z_j(T_ji pi^-1(x, D_i[x])) - D_j[x_hat]` with Jacobians for both
/// codes.
#[allow(clippy::too_many_arguments)]
pub fn sparse_geometric_factor(
    kf_i: &FactorFrame,
    kf_j: &FactorFrame,
    code_i: &DepthCode,
    code_j: &DepthCode,
    k: &Intrinsics,
    samples: &[PixelCoord],
    huber: Option<HuberParams>,
    eval: Eval,
) -> FactorResidual {
    let (dec_i, dec_j) = (kf_i.decoder, kf_j.decoder);
    let (ni, nj) = (dec_i.code_size(), dec_j.code_size());
    let a_i = dec_i.proximity_params().a;
    let a_j = dec_j.proximity_params().a;
    let rig = Rigid::between(kf_i.pose, kf_j.pose);
    let mut out = FactorResidual::empty(FactorKind::Geometric, 1, huber);
    let (mut jac_i, mut jac_j) = (Vec::new(), Vec::new());
    let mut row_i = vec![0.0; ni];
    let mut row_j = vec![0.0; nj];
    for x in samples {
        let Some(p) = dec_i.sample(x.u, x.v, code_i.as_slice(), &mut row_i) else { continue };
        let Some(w) = warp_proximity(x, p.value, a_i, &rig, k) else { continue };
        if !k.contains(&w.pixel) {
            continue;
        }
        let Some(q) = dec_j.sample(w.pixel.u, w.pixel.v, code_j.as_slice(), &mut row_j) else { continue };
        let Some((d_j, dd_dq)) = factor_depth(q.value, a_j) else { continue };
        let r = w.depth_j - d_j;
        if !r.is_finite() {
            continue;
        }
        if eval == Eval::Linearize {
            // d r / d p_i: direct depth change minus the sampled depth moving with x_hat.
            let grad_q = q.d_du * w.d_pixel[0] + q.d_dv * w.d_pixel[1];
            let gi = w.d_depth_j - dd_dq * grad_q;
            let gj = -dd_dq;
            let (si, sj) = (jac_i.len(), jac_j.len());
            jac_i.extend(row_i.iter().map(|&j| gi * j));
            jac_j.extend(row_j.iter().map(|&j| gj * j));
            if !finite(&jac_i[si..]) || !finite(&jac_j[sj..]) {
                jac_i.truncate(si);
                jac_j.truncate(sj);
                continue;
            }
        }
        out.residuals.push(r);
    }
    if out.is_empty() {
        debug!("geometric factor has no in-view samples");
    }
    if eval == Eval::Linearize {
        out.jacobians.push(assemble(out.residuals.len(), ni, &jac_i));
        out.jacobians.push(assemble(out.residuals.len(), nj, &jac_j));
    }
    out.finish()
}

/// `r = sqrt(weight) c`. Kept purely quadratic.
pub fn zero_code_prior(code: &DepthCode, weight: f64) -> FactorResidual {
    assert!(weight > 0.0, "prior weight must be positive");
    let s = weight.sqrt();
    let n = code.len();
    let mut out = FactorResidual::empty(FactorKind::Prior, 1, None);
    out.residuals = code.as_slice().iter().map(|c| s * c).collect();
    out.jacobians.push(DMatrix::identity(n, n) * s);
    out.finish()
}

/// Regular sample grid with the given stride, offset to sit away from the
/// image border by half a stride.
pub fn grid_samples(width: usize, height: usize, stride: usize) -> Vec<PixelCoord> {
    let stride = stride.max(1);
    let off = stride / 2;
    let mut out = Vec::with_capacity((width / stride + 1) * (height / stride + 1));
    let mut v = off;
    while v < height {
        let mut u = off;
        while u < width {
            out.push(PixelCoord::new(u as f64, v as f64));
            u += stride;
        }
        v += stride;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth_codec::{analytic_decoder, AnalyticParams, ConditioningSet};
    use crate::image::Channel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const W: usize = 64;
    const H: usize = 48;

    fn k() -> Intrinsics {
        Intrinsics::new(60.0, 60.0, 31.5, 23.5, W, H).unwrap()
    }

    fn textured() -> DenseImage {
        DenseImage::from_fn(W, H, Channel::Intensity, |u, v| {
            (0.5 + 0.25 * (u as f32 * 0.31).sin() + 0.2 * (v as f32 * 0.23 + u as f32 * 0.05).cos()) as f32
        })
    }

    fn decoder(depth: f32, seed: u64) -> LinearDecoder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sparse = DenseImage::filled(W, H, Channel::Depth, 0.0);
        for _ in 0..40 {
            let (u, v) = (rng.random_range(0..W), rng.random_range(0..H));
            sparse.set(u, v, depth + rng.random_range(-0.2..0.2));
        }
        let rep = DenseImage::filled(W, H, Channel::ReprojectionError, 0.5);
        let cond = ConditioningSet::new(textured(), sparse, rep).unwrap();
        analytic_decoder(&cond, 8, &AnalyticParams::default()).unwrap()
    }

    #[test]
    fn huber_weight_examples() {
        let p = HuberParams::new(0.5).unwrap();
        assert_eq!(huber_weight(0.0, p), 1.0);
        assert_eq!(huber_weight(0.5, p), 1.0);
        assert_eq!(huber_weight(1.0, p), 0.5);
        assert!(HuberParams::new(0.0).is_none());
        // rho is continuous at the knee
        assert!((p.rho(0.5) - p.rho(0.5 + 1e-12)).abs() < 1e-10);
    }

    #[test]
    fn prior_examples() {
        let f = zero_code_prior(&DepthCode::zeros(4), 1.0);
        assert!(f.residuals.iter().all(|&r| r == 0.0));
        let f = zero_code_prior(&DepthCode::unit(4, 1), 4.0);
        assert_eq!(f.block_count(), 4);
        assert!((f.residuals.iter().map(|r| r * r).sum::<f64>().sqrt() - 2.0).abs() < 1e-15);
        assert_eq!(f.jacobians[0], DMatrix::identity(4, 4) * 2.0);
    }

    #[test]
    fn photometric_identity_is_zero() {
        let img = textured();
        let dec = decoder(2.0, 1);
        let pose = Pose::identity();
        let f = FactorFrame { intensity: &img, pose: &pose, decoder: &dec };
        let r = photometric_factor(&f, &f, &DepthCode::zeros(8), &k(), &grid_samples(W, H, 4), None, Eval::Linearize);
        assert!(!r.is_empty());
        assert!(r.residuals.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn constant_images_give_zero_photometric() {
        let img = DenseImage::filled(W, H, Channel::Intensity, 0.3);
        let dec = decoder(2.0, 1);
        let (pi, pj) = (Pose::identity(), Pose::from_translation(Vector3::new(0.1, 0.0, 0.0)));
        let fi = FactorFrame { intensity: &img, pose: &pi, decoder: &dec };
        let fj = FactorFrame { intensity: &img, pose: &pj, decoder: &dec };
        let code = DepthCode::from_vec(vec![0.3; 8]).unwrap();
        let r = photometric_factor(&fi, &fj, &code, &k(), &grid_samples(W, H, 4), None, Eval::Residuals);
        assert!(r.residuals.iter().all(|&x| x.abs() < 1e-6));
    }

    #[test]
    fn geometric_offset_example() {
        let img = textured();
        let dec = decoder(2.0, 3);
        let pose = Pose::identity();
        let f = FactorFrame { intensity: &img, pose: &pose, decoder: &dec };
        let code = DepthCode::zeros(8);
        let samples = grid_samples(W, H, 4);
        let r = sparse_geometric_factor(&f, &f, &code, &code, &k(), &samples, None, Eval::Residuals);
        assert!(r.residuals.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn out_of_view_samples_are_dropped_cleanly() {
        let img = textured();
        let dec = decoder(2.0, 4);
        let (pi, pj) = (Pose::identity(), Pose::from_translation(Vector3::new(3.0, 0.0, 0.0)));
        let fi = FactorFrame { intensity: &img, pose: &pi, decoder: &dec };
        let fj = FactorFrame { intensity: &img, pose: &pj, decoder: &dec };
        let code = DepthCode::zeros(8);
        let s = grid_samples(W, H, 4);
        let r = photometric_factor(&fi, &fj, &code, &k(), &s, None, Eval::Linearize);
        assert!(r.residuals.len() < s.len());
        assert_eq!(r.jacobians[0].nrows(), r.residuals.len());
        assert!(r.jacobians[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn grid_is_regular() {
        let g = grid_samples(256, 192, 4);
        assert_eq!(g.len(), 64 * 48);
        assert_eq!(g[0], PixelCoord::new(2.0, 2.0));
    }
}
