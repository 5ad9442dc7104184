//! Sliding-window refinement of per-keyframe depth codes. Poses are fixed;
//! the stacked code vector is found by Levenberg-Marquardt on the total
//! robustified factor energy, with IRLS weights for the Huber blocks.

use std::sync::Arc;

use log::{debug, trace};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::depth_codec::{CodecError, DepthCode, LinearDecoder};
use crate::factors::{
    grid_samples, photometric_with_images, reprojection_factor, sparse_geometric_factor, zero_code_prior, Correspondence,
    Eval, FactorFrame, FactorKind, FactorResidual, HuberParams,
};
use crate::geometry::{Intrinsics, PixelCoord, Pose};
use crate::image::DenseImage;
use crate::pipeline::KeyframePacket;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("window needs at least 2 keyframes, got {0}")]
    WindowTooSmall(usize),
    #[error("window inputs disagree: {0}")]
    Mismatch(String),
    #[error("initial energy is not finite ({0})")]
    NonFiniteEnergy(f64),
    #[error("normal equations stayed indefinite up to damping {0:e}; codes left unchanged")]
    Cholesky(f64),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorFlags {
    pub photometric: bool,
    pub reprojection: bool,
    pub geometric: bool,
    pub prior: bool,
}

impl Default for FactorFlags {
    fn default() -> Self {
        Self { photometric: true, reprojection: true, geometric: true, prior: true }
    }
}

impl FactorFlags {
    pub fn prior_only() -> Self {
        Self { photometric: false, reprojection: false, geometric: false, prior: true }
    }

    pub fn enabled(&self, kind: FactorKind) -> bool {
        match kind {
            FactorKind::Photometric => self.photometric,
            FactorKind::Reprojection => self.reprojection,
            FactorKind::Geometric => self.geometric,
            FactorKind::Prior => self.prior,
        }
    }
}

/// Per-type energy multipliers. The prior entry is the prior weight of each
/// code dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorWeights {
    pub photometric: f64,
    pub reprojection: f64,
    pub geometric: f64,
    pub prior: f64,
}

impl Default for FactorWeights {
    fn default() -> Self {
        Self { photometric: 1.0, reprojection: 1.0, geometric: 10.0, prior: 1.0 }
    }
}

impl FactorWeights {
    pub fn get(&self, kind: FactorKind) -> f64 {
        match kind {
            FactorKind::Photometric => self.photometric,
            FactorKind::Reprojection => self.reprojection,
            FactorKind::Geometric => self.geometric,
            // The prior weight is folded into the residual.
            FactorKind::Prior => 1.0,
        }
    }
}

/// Huber thresholds in each factor's residual units; `None` disables
/// robustification for that type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuberDeltas {
    pub photometric: Option<f64>,
    pub reprojection: Option<f64>,
    pub geometric: Option<f64>,
}

impl Default for HuberDeltas {
    fn default() -> Self {
        Self { photometric: Some(0.1), reprojection: Some(2.0), geometric: Some(0.1) }
    }
}

impl HuberDeltas {
    fn params(&self, kind: FactorKind) -> Option<HuberParams> {
        let d = match kind {
            FactorKind::Photometric => self.photometric,
            FactorKind::Reprojection => self.reprojection,
            FactorKind::Geometric => self.geometric,
            FactorKind::Prior => None,
        };
        d.and_then(HuberParams::new)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Give up on a step once damping exceeds this.
    pub max_damping: f64,
    pub relative_tolerance: f64,
    pub step_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 10.0,
            max_damping: 1e12,
            relative_tolerance: 1e-6,
            step_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub flags: FactorFlags,
    pub weights: FactorWeights,
    pub huber: HuberDeltas,
    pub solver: SolverConfig,
    /// Pixel stride of the photometric/geometric sample grid.
    pub sample_stride: usize,
    /// Coarse-to-fine strides; empty means a single level at `sample_stride`.
    pub pyramid: Vec<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            flags: FactorFlags::default(),
            weights: FactorWeights::default(),
            huber: HuberDeltas::default(),
            solver: SolverConfig::default(),
            sample_stride: 4,
            pyramid: Vec::new(),
        }
    }
}

impl OptimizerConfig {
    pub fn with_pyramid(mut self) -> Self {
        self.pyramid = vec![16, 8, 4];
        self
    }
}

/// A keyframe inside the optimization window.
#[derive(Debug, Clone)]
pub struct WindowFrame {
    pub id: u64,
    pub pose: Pose,
    pub intensity: DenseImage,
    pub decoder: Arc<LinearDecoder>,
    pub matches: Vec<(u64, Vec<Correspondence>)>,
}

/// One factor of the graph; `i == j` for priors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactorSpec {
    pub kind: FactorKind,
    pub i: usize,
    pub j: usize,
}

#[derive(Debug, Clone)]
pub struct WindowProblem {
    pub frames: Vec<WindowFrame>,
    pub codes: Vec<DepthCode>,
    pub intrinsics: Intrinsics,
    pub factors: Vec<FactorSpec>,
    pub config: OptimizerConfig,
    samples: Vec<PixelCoord>,
    /// Intensity images used by photometric factors (blurred on coarse levels).
    photo_images: Vec<DenseImage>,
    matches: Vec<Vec<Correspondence>>,
}

/// Fixed topology: for each consecutive pair, photometric, reprojection and
/// geometric factors in both directions, then one prior per code.
pub fn factor_topology(n: usize, flags: &FactorFlags) -> Vec<FactorSpec> {
    let mut out = Vec::new();
    for p in 0..n.saturating_sub(1) {
        for kind in [FactorKind::Photometric, FactorKind::Reprojection, FactorKind::Geometric] {
            if flags.enabled(kind) {
                out.push(FactorSpec { kind, i: p, j: p + 1 });
                out.push(FactorSpec { kind, i: p + 1, j: p });
            }
        }
    }
    if flags.prior {
        out.extend((0..n).map(|i| FactorSpec { kind: FactorKind::Prior, i, j: i }));
    }
    out
}

fn matches_between(frames: &[WindowFrame], i: usize, j: usize) -> Vec<Correspondence> {
    let id_j = frames[j].id;
    if let Some((_, m)) = frames[i].matches.iter().find(|(other, _)| *other == id_j) {
        return m.clone();
    }
    let id_i = frames[i].id;
    frames[j]
        .matches
        .iter()
        .find(|(other, _)| *other == id_i)
        .map(|(_, m)| {
            m.iter()
                .map(|c| Correspondence { pixel_i: c.pixel_j, pixel_j: c.pixel_i, landmark_id: c.landmark_id })
                .collect()
        })
        .unwrap_or_default()
}

/// Separable box blur with clamped borders.
fn box_blur(img: &DenseImage, radius: usize) -> DenseImage {
    if radius == 0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; w * h];
        for v in 0..h {
            for u in 0..w {
                let mut acc = 0.0f64;
                let r = radius as isize;
                for o in -r..=r {
                    let (uu, vv) = if horizontal {
                        ((u as isize + o).clamp(0, w as isize - 1) as usize, v)
                    } else {
                        (u, (v as isize + o).clamp(0, h as isize - 1) as usize)
                    };
                    acc += src[vv * w + uu] as f64;
                }
                out[v * w + u] = (acc / (2 * radius + 1) as f64) as f32;
            }
        }
        out
    };
    let tmp = pass(img.data(), true);
    let data = pass(&tmp, false);
    DenseImage::new(w, h, img.channel(), data).expect("same size")
}

impl WindowProblem {
    pub fn new(
        frames: Vec<WindowFrame>,
        codes: Vec<DepthCode>,
        intrinsics: Intrinsics,
        config: OptimizerConfig,
    ) -> Result<Self, SolveError> {
        if frames.len() < 2 {
            return Err(SolveError::WindowTooSmall(frames.len()));
        }
        if codes.len() != frames.len() {
            return Err(SolveError::Mismatch(format!("{} codes for {} keyframes", codes.len(), frames.len())));
        }
        for (f, c) in frames.iter().zip(&codes) {
            let d = &f.decoder;
            if c.len() != d.code_size() {
                return Err(CodecError::CodeSize { want: d.code_size(), got: c.len() }.into());
            }
            if (d.width(), d.height()) != (intrinsics.width, intrinsics.height)
                || (f.intensity.width(), f.intensity.height()) != (intrinsics.width, intrinsics.height)
            {
                return Err(SolveError::Mismatch(format!("keyframe {} does not match the intrinsics resolution", f.id)));
            }
        }
        let factors = factor_topology(frames.len(), &config.flags);
        let matches = factors
            .iter()
            .map(|s| if s.kind == FactorKind::Reprojection { matches_between(&frames, s.i, s.j) } else { Vec::new() })
            .collect();
        let samples = grid_samples(intrinsics.width, intrinsics.height, config.sample_stride);
        let photo_images = frames.iter().map(|f| f.intensity.clone()).collect();
        Ok(Self { frames, codes, intrinsics, factors, config, samples, photo_images, matches })
    }

    pub fn code_size(&self) -> usize {
        self.codes[0].len()
    }

    /// Sets the sample stride and the photometric image blur for one
    /// coarse-to-fine level.
    pub fn set_level(&mut self, stride: usize, blur_radius: usize) {
        self.config.sample_stride = stride;
        self.samples = grid_samples(self.intrinsics.width, self.intrinsics.height, stride);
        self.photo_images = self.frames.iter().map(|f| box_blur(&f.intensity, blur_radius)).collect();
    }

    fn frame(&self, i: usize) -> FactorFrame<'_> {
        FactorFrame { intensity: &self.photo_images[i], pose: &self.frames[i].pose, decoder: &self.frames[i].decoder }
    }

    /// Variables touched by a factor, in Jacobian order.
    pub fn variables(spec: &FactorSpec) -> Vec<usize> {
        match spec.kind {
            FactorKind::Geometric => vec![spec.i, spec.j],
            _ => vec![spec.i],
        }
    }

    pub fn evaluate_factor(&self, index: usize, codes: &[DepthCode], eval: Eval) -> FactorResidual {
        let s = self.factors[index];
        let k = &self.intrinsics;
        let huber = self.config.huber.params(s.kind);
        match s.kind {
            FactorKind::Photometric => {
                let (fi, fj) = (self.frame(s.i), self.frame(s.j));
                photometric_with_images(&fi, &fj, fi.intensity, fj.intensity, &codes[s.i], k, &self.samples, huber, eval)
            }
            FactorKind::Reprojection => {
                reprojection_factor(&self.frame(s.i), &self.frame(s.j), &codes[s.i], k, &self.matches[index], huber, eval)
            }
            FactorKind::Geometric => sparse_geometric_factor(
                &self.frame(s.i),
                &self.frame(s.j),
                &codes[s.i],
                &codes[s.j],
                k,
                &self.samples,
                huber,
                eval,
            ),
            FactorKind::Prior => zero_code_prior(&codes[s.i], self.config.weights.prior),
        }
    }

    /// Total weighted robust energy at `codes`.
    pub fn energy(&self, codes: &[DepthCode]) -> f64 {
        let parts: Vec<f64> = (0..self.factors.len())
            .into_par_iter()
            .map(|f| self.config.weights.get(self.factors[f].kind) * self.evaluate_factor(f, codes, Eval::Residuals).energy())
            .collect();
        parts.iter().sum()
    }

    /// Energy of one factor type, unweighted.
    pub fn energy_of(&self, kind: FactorKind, codes: &[DepthCode]) -> f64 {
        (0..self.factors.len())
            .filter(|&f| self.factors[f].kind == kind)
            .map(|f| self.evaluate_factor(f, codes, Eval::Residuals).energy())
            .sum()
    }

    /// Gauss-Newton system `(H, g)` with `H = sum J^T W J`, `g = sum J^T W r`.
    fn normal_equations(&self, codes: &[DepthCode]) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.code_size();
        let total = n * self.frames.len();
        let blocks: Vec<Vec<(usize, usize, DMatrix<f64>)>> = (0..self.factors.len())
            .into_par_iter()
            .map(|f| {
                let res = self.evaluate_factor(f, codes, Eval::Linearize);
                if res.is_empty() {
                    return Vec::new();
                }
                let lambda = self.config.weights.get(res.kind);
                let vars = Self::variables(&self.factors[f]);
                let row_w: DVector<f64> = DVector::from_iterator(
                    res.residuals.len(),
                    (0..res.residuals.len()).map(|r| lambda * res.robust_weights[r / res.block_dim]),
                );
                let r = DVector::from_column_slice(&res.residuals);
                let wr = r.component_mul(&row_w);
                let mut out = Vec::new();
                for (a, &va) in vars.iter().enumerate() {
                    let mut wj = res.jacobians[a].clone();
                    for (mut row, w) in wj.row_iter_mut().zip(row_w.iter()) {
                        row *= *w;
                    }
                    let g = res.jacobians[a].tr_mul(&wr);
                    out.push((va, usize::MAX, DMatrix::from_column_slice(n, 1, g.as_slice())));
                    for (b, &vb) in vars.iter().enumerate() {
                        out.push((va, vb, wj.tr_mul(&res.jacobians[b])));
                    }
                }
                out
            })
            .collect();
        let mut h = DMatrix::zeros(total, total);
        let mut g = DVector::zeros(total);
        for factor in blocks {
            for (a, b, m) in factor {
                if b == usize::MAX {
                    let mut seg = g.rows_mut(a * n, n);
                    seg += m.column(0);
                } else {
                    let mut view = h.view_mut((a * n, b * n), (n, n));
                    view += &m;
                }
            }
        }
        (h, g)
    }

    /// Gradient of [`WindowProblem::energy`] with respect to the stacked
    /// codes, from the Gauss-Newton model (exact for the Huber cost).
    pub fn gradient(&self, codes: &[DepthCode]) -> DVector<f64> {
        self.normal_equations(codes).1 * 2.0
    }
}

/// Assembles the window factor graph from keyframe packets. `codes` and
/// `decoders` are aligned with `window`.
pub fn build_problem(
    window: &[&KeyframePacket],
    codes: Vec<DepthCode>,
    decoders: &[Arc<LinearDecoder>],
    config: &OptimizerConfig,
) -> Result<WindowProblem, SolveError> {
    if window.len() < 2 {
        return Err(SolveError::WindowTooSmall(window.len()));
    }
    if decoders.len() != window.len() {
        return Err(SolveError::Mismatch(format!("{} decoders for {} keyframes", decoders.len(), window.len())));
    }
    let k = window[0].intrinsics;
    let frames = window
        .iter()
        .zip(decoders)
        .map(|(p, d)| {
            if p.intrinsics != k {
                return Err(SolveError::Mismatch(format!("keyframe {} has different intrinsics", p.id)));
            }
            Ok(WindowFrame {
                id: p.id,
                pose: p.pose,
                intensity: p.intensity.clone(),
                decoder: Arc::clone(d),
                matches: p.matches.clone(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    WindowProblem::new(frames, codes, k, config.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    ZeroEnergy,
    RelativeEnergy,
    SmallStep,
    MaxIterations,
    /// Damping grew past its limit without finding a descent step.
    NoDescent,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub initial_energy: f64,
    pub final_energy: f64,
    /// Accepted steps.
    pub iterations: usize,
    /// Energy before the first step and after every accepted step.
    pub energies: Vec<f64>,
    pub converged: bool,
    pub termination: Termination,
    pub codes: Vec<DepthCode>,
}

fn stack(codes: &[DepthCode]) -> DVector<f64> {
    DVector::from_iterator(codes.iter().map(|c| c.len()).sum(), codes.iter().flat_map(|c| c.as_slice().iter().copied()))
}

fn unstack(x: &DVector<f64>, n: usize, count: usize) -> Vec<DepthCode> {
    (0..count)
        .map(|i| DepthCode::from_vec(x.as_slice()[i * n..(i + 1) * n].to_vec()).expect("finite step"))
        .collect()
}

/// Levenberg-Marquardt on the stacked codes. Steps are accepted only when
/// the energy strictly decreases.
pub fn solve(problem: &WindowProblem) -> Result<SolveReport, SolveError> {
    let cfg = problem.config.solver;
    let n = problem.code_size();
    let count = problem.frames.len();
    let mut codes = problem.codes.clone();
    let mut energy = problem.energy(&codes);
    if !energy.is_finite() {
        return Err(SolveError::NonFiniteEnergy(energy));
    }
    let initial_energy = energy;
    let mut energies = vec![energy];
    let mut mu = cfg.initial_damping;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    while iterations < cfg.max_iterations {
        if energy == 0.0 {
            termination = Termination::ZeroEnergy;
            break;
        }
        let (h, g) = problem.normal_equations(&codes);
        let x = stack(&codes);
        let mut accepted = None;
        let mut small_step = false;
        loop {
            let mut damped = h.clone();
            for d in 0..damped.nrows() {
                damped[(d, d)] += mu;
            }
            let Some(chol) = damped.cholesky() else {
                mu *= cfg.damping_up;
                if mu > cfg.max_damping {
                    return Err(SolveError::Cholesky(mu));
                }
                continue;
            };
            let step = chol.solve(&(-&g));
            let step_norm = step.norm();
            if !step_norm.is_finite() {
                return Err(SolveError::Cholesky(mu));
            }
            if step_norm < cfg.step_tolerance {
                small_step = true;
            }
            let trial = unstack(&(&x + &step), n, count);
            let e_new = problem.energy(&trial);
            trace!("lm mu={mu:e} |step|={step_norm:e} energy {energy:e} -> {e_new:e}");
            if e_new.is_finite() && e_new < energy {
                mu = (mu / cfg.damping_down).max(1e-15);
                accepted = Some((trial, e_new));
                break;
            }
            if small_step {
                break;
            }
            mu *= cfg.damping_up;
            if mu > cfg.max_damping {
                break;
            }
        }
        match accepted {
            Some((trial, e_new)) => {
                let rel = (energy - e_new) / energy.max(f64::MIN_POSITIVE);
                assert!(e_new <= energy, "accepted step increased the energy");
                codes = trial;
                energy = e_new;
                energies.push(energy);
                iterations += 1;
                if small_step {
                    termination = Termination::SmallStep;
                    break;
                }
                if rel < cfg.relative_tolerance {
                    termination = Termination::RelativeEnergy;
                    break;
                }
            }
            None => {
                termination = if small_step { Termination::SmallStep } else { Termination::NoDescent };
                break;
            }
        }
    }
    if energy == 0.0 {
        termination = Termination::ZeroEnergy;
    }
    debug!("lm finished after {iterations} steps: {initial_energy:.6e} -> {energy:.6e} ({termination:?})");
    Ok(SolveReport {
        initial_energy,
        final_energy: energy,
        iterations,
        energies,
        converged: termination != Termination::MaxIterations,
        termination,
        codes,
    })
}

/// Runs the solve, coarse-to-fine when the config lists pyramid strides.
/// The report covers the finest level, with iterations summed over levels.
pub fn solve_with_levels(problem: &mut WindowProblem) -> Result<SolveReport, SolveError> {
    let levels = problem.config.pyramid.clone();
    if levels.is_empty() {
        return solve(problem);
    }
    let fine = *levels.last().expect("nonempty");
    let mut iterations = 0;
    let mut report = None;
    for &stride in &levels {
        problem.set_level(stride, stride.saturating_sub(fine) / 4);
        let r = solve(problem)?;
        iterations += r.iterations;
        problem.codes = r.codes.clone();
        report = Some(r);
    }
    let mut report = report.expect("at least one level");
    report.iterations = iterations;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct RefinedWindow {
    pub codes: Vec<DepthCode>,
    pub depths: Vec<DenseImage>,
    pub report: SolveReport,
}

/// Refines the window's codes and decodes the resulting depth maps.
pub fn refine_window(mut problem: WindowProblem) -> Result<RefinedWindow, SolveError> {
    let report = solve_with_levels(&mut problem)?;
    let depths = problem
        .frames
        .iter()
        .zip(&report.codes)
        .map(|(f, c)| f.decoder.decode(c).map(|o| o.depth))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RefinedWindow { codes: report.codes.clone(), depths, report })
}

/// Mean |geometric residual| over all geometric pairs of a window, in
/// meters. Independent of which factors the problem enables.
pub fn mean_geometric_residual(problem: &WindowProblem, codes: &[DepthCode]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    let n = problem.frames.len();
    for p in 0..n.saturating_sub(1) {
        for (i, j) in [(p, p + 1), (p + 1, p)] {
            let r = sparse_geometric_factor(
                &problem.frame(i),
                &problem.frame(j),
                &codes[i],
                &codes[j],
                &problem.intrinsics,
                &problem.samples,
                None,
                Eval::Residuals,
            );
            sum += r.residuals.iter().map(|x| x.abs()).sum::<f64>();
            count += r.residuals.len();
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}
