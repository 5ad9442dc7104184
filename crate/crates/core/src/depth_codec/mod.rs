//! Compact depth representation.
//!
//! A keyframe's dense depth is parameterized by a short latent code. Decoders
//! map `(code, conditioning images)` to a proximity map, an uncertainty map and
//! the Jacobian of the proximity map with respect to the code. Every decoder
//! used by the optimizer is affine in the code: the analytic decoder is affine
//! by construction, the learned network is linearized once at the zero code.

mod analytic;
mod network;

pub use analytic::{analytic_decoder, AnalyticParams};
pub use network::{Layer, Network, NetworkHeader};

#[cfg(test)]
pub(crate) use network::tests as network_fixtures;

use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::geometry::ProximityParams;
use crate::image::{BilinearStencil, Channel, DenseImage, ImageError};

/// Default latent code length.
pub const DEFAULT_CODE_SIZE: usize = 32;
/// Default decoder resolution (width, height).
pub const DEFAULT_RESOLUTION: (usize, usize) = (256, 192);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("conditioning is {got_w}x{got_h} but the decoder expects {want_w}x{want_h}")]
    DimensionMismatch { want_w: usize, want_h: usize, got_w: usize, got_h: usize },
    #[error("code has length {got}, decoder expects {want}")]
    CodeSize { want: usize, got: usize },
    #[error("insufficient conditioning: {0} valid sparse points, need at least 3")]
    InsufficientConditioning(usize),
    #[error("non-positive uncertainty {value} at pixel {index}")]
    NonPositiveUncertainty { index: usize, value: f64 },
    #[error("no valid ground-truth pixels")]
    NoValidPixels,
    #[error("invalid conditioning: {0}")]
    InvalidConditioning(String),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Latent code of one keyframe's dense depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthCode(Vec<f64>);

impl DepthCode {
    pub fn zeros(size: usize) -> Self {
        Self(vec![0.0; size])
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self, CodecError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CodecError::InvalidConditioning("non-finite code entry".into()));
        }
        Ok(Self(values))
    }

    /// Unit vector along dimension `k`.
    pub fn unit(size: usize, k: usize) -> Self {
        let mut c = Self::zeros(size);
        c.0[k] = 1.0;
        c
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Images a decoder is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSet {
    pub intensity: DenseImage,
    /// Sparse depth in meters, `0` where there is no measurement.
    pub sparse_depth: DenseImage,
    /// Reprojection error in pixels, meaningful only where `sparse_depth` is valid.
    pub rep_error: DenseImage,
}

impl ConditioningSet {
    pub fn new(intensity: DenseImage, sparse_depth: DenseImage, rep_error: DenseImage) -> Result<Self, CodecError> {
        intensity.check_dims(&sparse_depth)?;
        intensity.check_dims(&rep_error)?;
        for (i, (&d, &r)) in sparse_depth.data().iter().zip(rep_error.data()).enumerate() {
            if DenseImage::is_valid_depth(d) && !(r >= 0.0 && r.is_finite()) {
                return Err(CodecError::InvalidConditioning(format!(
                    "reprojection error {r} at pixel {i} must be a finite non-negative value"
                )));
            }
        }
        Ok(Self { intensity, sparse_depth, rep_error })
    }

    pub fn width(&self) -> usize {
        self.intensity.width()
    }

    pub fn height(&self) -> usize {
        self.intensity.height()
    }

    /// Valid sparse points as `(u, v, depth, rep_error)`.
    pub fn sparse_points(&self) -> Vec<(usize, usize, f64, f64)> {
        let w = self.width();
        self.sparse_depth
            .data()
            .iter()
            .zip(self.rep_error.data())
            .enumerate()
            .filter(|(_, (&d, _))| DenseImage::is_valid_depth(d))
            .map(|(i, (&d, &r))| (i % w, i / w, d as f64, r as f64))
            .collect()
    }
}

/// Decoded depth, uncertainty and code Jacobian of one keyframe.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub depth: DenseImage,
    pub uncertainty: DenseImage,
    /// Decoded proximity map, kept in double precision.
    pub proximity: Vec<f64>,
    /// `(width * height) x code_size`, d proximity / d code.
    pub jacobian: DMatrix<f64>,
}

/// A decoder in affine form: `prox(c) = prior + J c`, with a fixed
/// uncertainty map. Immutable and cheap to share behind an `Arc`.
#[derive(Debug, Clone)]
pub struct LinearDecoder {
    width: usize,
    height: usize,
    code_size: usize,
    proximity: ProximityParams,
    prior: Vec<f64>,
    /// Pixel-major Jacobian: row `i` occupies `[i * code_size, (i + 1) * code_size)`.
    basis: Arc<Vec<f64>>,
    uncertainty: Vec<f64>,
}

/// Bilinear proximity sample with spatial derivatives. The code Jacobian row
/// is written into a caller-provided buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProximitySample {
    pub value: f64,
    pub d_du: f64,
    pub d_dv: f64,
}

impl LinearDecoder {
    pub fn new(
        width: usize,
        height: usize,
        code_size: usize,
        proximity: ProximityParams,
        prior: Vec<f64>,
        basis: Arc<Vec<f64>>,
        uncertainty: Vec<f64>,
    ) -> Result<Self, CodecError> {
        let n = width * height;
        if prior.len() != n || uncertainty.len() != n || basis.len() != n * code_size {
            return Err(CodecError::InvalidConditioning(format!(
                "decoder buffers do not match {width}x{height} with code size {code_size}"
            )));
        }
        if let Some((index, &value)) = uncertainty.iter().enumerate().find(|(_, &b)| !(b > 0.0)) {
            return Err(CodecError::NonPositiveUncertainty { index, value });
        }
        Ok(Self { width, height, code_size, proximity, prior, basis, uncertainty })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn code_size(&self) -> usize {
        self.code_size
    }

    pub fn proximity_params(&self) -> ProximityParams {
        self.proximity
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn uncertainty(&self) -> &[f64] {
        &self.uncertainty
    }

    #[inline]
    pub fn jacobian_row(&self, idx: usize) -> &[f64] {
        &self.basis[idx * self.code_size..(idx + 1) * self.code_size]
    }

    fn check_code(&self, code: &DepthCode) -> Result<(), CodecError> {
        if code.len() != self.code_size {
            return Err(CodecError::CodeSize { want: self.code_size, got: code.len() });
        }
        Ok(())
    }

    #[inline]
    pub fn proximity_at(&self, idx: usize, code: &[f64]) -> f64 {
        self.prior[idx] + dot(self.jacobian_row(idx), code)
    }

    pub fn proximity_map(&self, code: &DepthCode) -> Result<Vec<f64>, CodecError> {
        self.check_code(code)?;
        Ok((0..self.prior.len()).map(|i| self.proximity_at(i, code.as_slice())).collect())
    }

    /// Bilinear sample of the proximity field at a continuous pixel. `row`
    /// receives d prox / d code at that location.
    pub fn sample(&self, u: f64, v: f64, code: &[f64], row: &mut [f64]) -> Option<ProximitySample> {
        let s = BilinearStencil::new(self.width, self.height, u, v)?;
        row.iter_mut().for_each(|r| *r = 0.0);
        let mut out = ProximitySample { value: 0.0, d_du: 0.0, d_dv: 0.0 };
        for c in 0..4 {
            let idx = s.idx[c];
            let p = self.proximity_at(idx, code);
            out.value += s.w[c] * p;
            out.d_du += s.dw_du[c] * p;
            out.d_dv += s.dw_dv[c] * p;
            for (r, j) in row.iter_mut().zip(self.jacobian_row(idx)) {
                *r += s.w[c] * j;
            }
        }
        Some(out)
    }

    /// Depth map (meters) from a proximity map; pixels outside `(0, 1)` are
    /// marked invalid (0).
    pub fn proximity_to_depth_image(&self, prox: &[f64]) -> DenseImage {
        let a = self.proximity.a;
        let data = prox
            .iter()
            .map(|&p| if p > 0.0 && p < 1.0 { (a / p - a) as f32 } else { 0.0 })
            .collect();
        DenseImage::new(self.width, self.height, Channel::Depth, data).expect("sizes match")
    }

    pub fn decode(&self, code: &DepthCode) -> Result<DecoderOutput, CodecError> {
        let proximity = self.proximity_map(code)?;
        let depth = self.proximity_to_depth_image(&proximity);
        let uncertainty = DenseImage::new(
            self.width,
            self.height,
            Channel::Uncertainty,
            self.uncertainty.iter().map(|&b| b as f32).collect(),
        )?;
        let jacobian = DMatrix::from_row_slice(self.prior.len(), self.code_size, &self.basis);
        Ok(DecoderOutput { depth, uncertainty, proximity, jacobian })
    }

    /// Least-squares code whose decoded proximity best matches `target`
    /// (in proximity units) over pixels where `mask` is true.
    pub fn project_onto_basis(&self, target: &[f64], mask: &[bool]) -> DepthCode {
        let n = self.code_size;
        let mut ata = DMatrix::<f64>::zeros(n, n);
        let mut atb = nalgebra::DVector::<f64>::zeros(n);
        for (i, (&t, &m)) in target.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            let row = self.jacobian_row(i);
            let r = t - self.prior[i];
            for a in 0..n {
                atb[a] += row[a] * r;
                for b in 0..n {
                    ata[(a, b)] += row[a] * row[b];
                }
            }
        }
        for a in 0..n {
            ata[(a, a)] += 1e-12;
        }
        let x = ata.cholesky().map(|c| c.solve(&atb)).unwrap_or_else(|| nalgebra::DVector::zeros(n));
        DepthCode(x.iter().copied().collect())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Source of per-keyframe decoders.
#[derive(Debug, Clone)]
pub enum Decoder {
    Analytic { code_size: usize, params: AnalyticParams },
    Learned(Arc<Network>),
}

impl Decoder {
    pub fn analytic(code_size: usize, proximity: ProximityParams) -> Self {
        Decoder::Analytic { code_size, params: AnalyticParams { proximity, ..AnalyticParams::default() } }
    }

    pub fn code_size(&self) -> usize {
        match self {
            Decoder::Analytic { code_size, .. } => *code_size,
            Decoder::Learned(net) => net.header().code_size,
        }
    }

    /// Conditions the decoder on one keyframe's images and returns its affine form.
    pub fn condition(&self, cond: &ConditioningSet) -> Result<LinearDecoder, CodecError> {
        match self {
            Decoder::Analytic { code_size, params } => analytic_decoder(cond, *code_size, params),
            Decoder::Learned(net) => net.linearize(cond),
        }
    }
}

/// Decodes `code` for the keyframe described by `cond`.
pub fn decode(code: &DepthCode, cond: &ConditioningSet, decoder: &Decoder) -> Result<DecoderOutput, CodecError> {
    decoder.condition(cond)?.decode(code)
}

/// Builds a learned decoder from a weight bundle.
pub fn load_learned_decoder(bytes: &[u8]) -> Result<Decoder, crate::io::FormatError> {
    Ok(Decoder::Learned(Arc::new(crate::io::weights::decode_weights(bytes)?)))
}

/// Uncertainty-weighted reconstruction error
/// `sum |pred - gt| / b + ln b` over pixels where `gt` is valid.
///
/// The value space is whatever the inputs carry; pass proximity images to
/// evaluate in proximity space.
pub fn recon_error(pred: &DenseImage, gt: &DenseImage, b: &DenseImage) -> Result<f64, CodecError> {
    pred.check_dims(gt)?;
    pred.check_dims(b)?;
    let mut total = 0.0;
    let mut valid = 0usize;
    for (i, ((&p, &g), &u)) in pred.data().iter().zip(gt.data()).zip(b.data()).enumerate() {
        if !DenseImage::is_valid_depth(g) {
            continue;
        }
        let u = u as f64;
        if !(u > 0.0) {
            return Err(CodecError::NonPositiveUncertainty { index: i, value: u });
        }
        total += (p as f64 - g as f64).abs() / u + u.ln();
        valid += 1;
    }
    if valid == 0 {
        return Err(CodecError::NoValidPixels);
    }
    Ok(total)
}

/// Converts a depth image to proximity (invalid depth maps to 0).
pub fn depth_to_proximity_image(depth: &DenseImage, params: &ProximityParams) -> DenseImage {
    depth.map(Channel::Proximity, |d| {
        if DenseImage::is_valid_depth(d) {
            (params.a / (params.a + d as f64)) as f32
        } else {
            0.0
        }
    })
}
