//! Single-channel float rasters with a fixed semantic tag.

use thiserror::Error;

/// What the values of a [`DenseImage`] mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    /// Gray-scale intensity in `[0, 1]`.
    Intensity,
    /// Depth in meters; `0` marks an invalid pixel.
    Depth,
    /// Proximity `a / (a + d)` in `[0, 1]`.
    Proximity,
    /// Reprojection error in pixels.
    ReprojectionError,
    /// Strictly positive uncertainty.
    Uncertainty,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("expected {expected} values for a {width}x{height} image, got {got}")]
    SizeMismatch { width: usize, height: usize, expected: usize, got: usize },
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

/// Row-major grid of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseImage {
    width: usize,
    height: usize,
    channel: Channel,
    data: Vec<f32>,
}

/// Bilinear sample of an image together with its spatial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub value: f64,
    pub d_du: f64,
    pub d_dv: f64,
}

/// Corner indices and weights of a bilinear lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearStencil {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    /// d weight / du for each corner.
    pub dw_du: [f64; 4],
    /// d weight / dv for each corner.
    pub dw_dv: [f64; 4],
}

impl BilinearStencil {
    /// Stencil at a continuous pixel coordinate, or `None` outside
    /// `[0, w-1] x [0, h-1]`. Integer coordinates address pixel centers.
    pub fn new(width: usize, height: usize, u: f64, v: f64) -> Option<Self> {
        if !(u >= 0.0 && v >= 0.0 && u <= (width - 1) as f64 && v <= (height - 1) as f64) || width < 2 || height < 2 {
            return None;
        }
        let u0 = (u.floor() as usize).min(width - 2);
        let v0 = (v.floor() as usize).min(height - 2);
        let fu = u - u0 as f64;
        let fv = v - v0 as f64;
        let i00 = v0 * width + u0;
        Some(Self {
            idx: [i00, i00 + 1, i00 + width, i00 + width + 1],
            w: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
            dw_du: [-(1.0 - fv), 1.0 - fv, -fv, fv],
            dw_dv: [-(1.0 - fu), -fu, 1.0 - fu, fu],
        })
    }
}

impl DenseImage {
    pub fn new(width: usize, height: usize, channel: Channel, data: Vec<f32>) -> Result<Self, ImageError> {
        if width * height != data.len() {
            return Err(ImageError::SizeMismatch { width, height, expected: width * height, got: data.len() });
        }
        Ok(Self { width, height, channel, data })
    }

    pub fn filled(width: usize, height: usize, channel: Channel, value: f32) -> Self {
        Self { width, height, channel, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, channel: Channel, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self { width, height, channel, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: f32) {
        self.data[v * self.width + u] = value;
    }

    pub fn same_dims(&self, other: &DenseImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_dims(&self, other: &DenseImage) -> Result<(), ImageError> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(ImageError::DimensionMismatch(self.width, self.height, other.width, other.height))
        }
    }

    /// Valid depth pixels are strictly positive and finite.
    pub fn is_valid_depth(value: f32) -> bool {
        value > 0.0 && value.is_finite()
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| Self::is_valid_depth(d)).count()
    }

    /// Bilinear sample with the exact derivative of the interpolant.
    pub fn sample(&self, u: f64, v: f64) -> Option<Sample> {
        let s = BilinearStencil::new(self.width, self.height, u, v)?;
        let mut out = Sample { value: 0.0, d_du: 0.0, d_dv: 0.0 };
        for c in 0..4 {
            let val = self.data[s.idx[c]] as f64;
            out.value += s.w[c] * val;
            out.d_du += s.dw_du[c] * val;
            out.d_dv += s.dw_dv[c] * val;
        }
        Some(out)
    }

    pub fn map(&self, channel: Channel, f: impl Fn(f32) -> f32) -> DenseImage {
        DenseImage {
            width: self.width,
            height: self.height,
            channel,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}
