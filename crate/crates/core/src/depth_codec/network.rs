//! Inference side of the learned decoder.
//!
//! A network is a flat list of layers executed in order over a channel-major
//! tensor, with a stack for skip connections. The code enters through
//! `CodeConcat` layers. The last layer must be `OutputHead`, which turns a
//! two-channel tensor into proximity (sigmoid) and uncertainty (softplus).

use std::sync::Arc;

use super::{CodecError, ConditioningSet, DepthCode, LinearDecoder};
use crate::geometry::ProximityParams;
use crate::image::DenseImage;

/// Fixed input/output contract of a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkHeader {
    pub code_size: usize,
    pub width: usize,
    pub height: usize,
    /// Proximity scale used to normalize sparse depth and decode proximity.
    pub proximity_a: f32,
    /// Scale of the reprojection-error normalization `s / (s + r)`.
    pub rep_error_scale: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Same-padded stride-1 convolution. `weight` is `[out][in][k][k]`.
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, weight: Vec<f32>, bias: Vec<f32> },
    /// 2x2 average pooling.
    AvgPool2,
    /// 2x nearest-neighbour upsampling.
    Upsample2,
    Relu,
    Sigmoid,
    /// Pushes a copy of the current tensor onto the skip stack.
    Push,
    /// Pops the skip stack and appends its channels after the current ones.
    ConcatPop,
    /// Appends `out_ch` spatially constant channels equal to `W c + b`.
    /// `weight` is `[out][code]`.
    CodeConcat { code_size: usize, out_ch: usize, weight: Vec<f32>, bias: Vec<f32> },
    /// Channel 0 -> sigmoid proximity, channel 1 -> softplus uncertainty.
    OutputHead,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::AvgPool2 => "avgpool2",
            Layer::Upsample2 => "upsample2",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Push => "push",
            Layer::ConcatPop => "concat_pop",
            Layer::CodeConcat { .. } => "code_concat",
            Layer::OutputHead => "output_head",
        }
    }
}

#[derive(Debug, Clone)]
struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    fn plane(&self, ch: usize) -> &[f64] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }
}

/// Value and (optional) tangent along one code direction.
type Dual = (Tensor, Option<Tensor>);

/// Minimum uncertainty emitted by the head.
const UNCERTAINTY_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    header: NetworkHeader,
    layers: Vec<Layer>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Network {
    /// Validates the layer shapes against the header by a symbolic pass.
    pub fn new(header: NetworkHeader, layers: Vec<Layer>) -> Result<Self, CodecError> {
        let net = Self { header, layers };
        net.check_shapes()?;
        Ok(net)
    }

    pub fn header(&self) -> &NetworkHeader {
        &self.header
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn check_shapes(&self) -> Result<(), CodecError> {
        let bad = |i: usize, l: &Layer, msg: String| CodecError::InvalidNetwork(format!("layer {i} ({}): {msg}", l.name()));
        let (mut c, mut h, mut w) = (3usize, self.header.height, self.header.width);
        let mut stack: Vec<(usize, usize, usize)> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv2d { in_ch, out_ch, kernel, weight, bias } => {
                    if *in_ch != c {
                        return Err(bad(i, layer, format!("expects {in_ch} input channels, tensor has {c}")));
                    }
                    if kernel % 2 == 0 {
                        return Err(bad(i, layer, format!("kernel size {kernel} must be odd")));
                    }
                    if weight.len() != out_ch * in_ch * kernel * kernel || bias.len() != *out_ch {
                        return Err(bad(i, layer, "weight/bias sizes do not match the descriptor".into()));
                    }
                    c = *out_ch;
                }
                Layer::AvgPool2 => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(bad(i, layer, format!("cannot pool a {w}x{h} tensor")));
                    }
                    h /= 2;
                    w /= 2;
                }
                Layer::Upsample2 => {
                    h *= 2;
                    w *= 2;
                }
                Layer::Relu | Layer::Sigmoid => {}
                Layer::Push => stack.push((c, h, w)),
                Layer::ConcatPop => {
                    let (sc, sh, sw) = stack.pop().ok_or_else(|| bad(i, layer, "skip stack is empty".into()))?;
                    if (sh, sw) != (h, w) {
                        return Err(bad(i, layer, format!("skip tensor is {sw}x{sh}, current is {w}x{h}")));
                    }
                    c += sc;
                }
                Layer::CodeConcat { code_size, out_ch, weight, bias } => {
                    if *code_size != self.header.code_size {
                        return Err(bad(i, layer, format!("code size {code_size} != header {}", self.header.code_size)));
                    }
                    if weight.len() != out_ch * code_size || bias.len() != *out_ch {
                        return Err(bad(i, layer, "weight/bias sizes do not match the descriptor".into()));
                    }
                    c += out_ch;
                }
                Layer::OutputHead => {
                    if i + 1 != self.layers.len() {
                        return Err(bad(i, layer, "output head must be the last layer".into()));
                    }
                    if c != 2 {
                        return Err(bad(i, layer, format!("expects 2 channels, tensor has {c}")));
                    }
                }
            }
        }
        if !matches!(self.layers.last(), Some(Layer::OutputHead)) {
            return Err(CodecError::InvalidNetwork("network must end with an output head".into()));
        }
        if (h, w) != (self.header.height, self.header.width) {
            return Err(CodecError::InvalidNetwork(format!(
                "output is {w}x{h}, header says {}x{}",
                self.header.width, self.header.height
            )));
        }
        Ok(())
    }

    /// The three-channel input tensor: intensity, sparse proximity (0 where
    /// missing) and reprojection confidence `s / (s + r)` (0 where missing).
    fn input_tensor(&self, cond: &ConditioningSet) -> Result<Tensor, CodecError> {
        let (w, h) = (self.header.width, self.header.height);
        if cond.width() != w || cond.height() != h {
            return Err(CodecError::DimensionMismatch { want_w: w, want_h: h, got_w: cond.width(), got_h: cond.height() });
        }
        let n = w * h;
        let mut t = Tensor::zeros(3, h, w);
        let a = self.header.proximity_a as f64;
        let s = self.header.rep_error_scale as f64;
        for i in 0..n {
            t.data[i] = cond.intensity.data()[i] as f64;
            let d = cond.sparse_depth.data()[i];
            if DenseImage::is_valid_depth(d) {
                t.data[n + i] = a / (a + d as f64);
                t.data[2 * n + i] = s / (s + cond.rep_error.data()[i] as f64);
            }
        }
        Ok(t)
    }

    fn conv(x: &Tensor, out_ch: usize, kernel: usize, weight: &[f32], bias: Option<&[f32]>) -> Tensor {
        let (h, w) = (x.h, x.w);
        let r = (kernel / 2) as isize;
        let mut y = Tensor::zeros(out_ch, h, w);
        for o in 0..out_ch {
            let out = &mut y.data[o * h * w..(o + 1) * h * w];
            if let Some(b) = bias {
                out.iter_mut().for_each(|v| *v = b[o] as f64);
            }
            for i in 0..x.c {
                let inp = x.plane(i);
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let wv = weight[((o * x.c + i) * kernel + ky) * kernel + kx] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = ky as isize - r;
                        let dx = kx as isize - r;
                        for yy in 0..h {
                            let sy = yy as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src = &inp[sy as usize * w..(sy as usize + 1) * w];
                            let dst = &mut out[yy * w..(yy + 1) * w];
                            let x0 = (-dx).max(0) as usize;
                            let x1 = (w as isize - dx.max(0)) as usize;
                            for xx in x0..x1 {
                                dst[xx] += wv * src[(xx as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn pool(x: &Tensor) -> Tensor {
        let (h, w) = (x.h / 2, x.w / 2);
        let mut y = Tensor::zeros(x.c, h, w);
        for c in 0..x.c {
            let p = x.plane(c);
            for yy in 0..h {
                for xx in 0..w {
                    let s = p[2 * yy * x.w + 2 * xx]
                        + p[2 * yy * x.w + 2 * xx + 1]
                        + p[(2 * yy + 1) * x.w + 2 * xx]
                        + p[(2 * yy + 1) * x.w + 2 * xx + 1];
                    y.data[(c * h + yy) * w + xx] = 0.25 * s;
                }
            }
        }
        y
    }

    fn upsample(x: &Tensor) -> Tensor {
        let (h, w) = (x.h * 2, x.w * 2);
        let mut y = Tensor::zeros(x.c, h, w);
        for c in 0..x.c {
            let p = x.plane(c);
            for yy in 0..h {
                for xx in 0..w {
                    y.data[(c * h + yy) * w + xx] = p[(yy / 2) * x.w + xx / 2];
                }
            }
        }
        y
    }

    fn concat(a: Tensor, b: Tensor) -> Tensor {
        let mut data = a.data;
        data.extend_from_slice(&b.data);
        Tensor { c: a.c + b.c, h: a.h, w: a.w, data }
    }

    fn constant_channels(h: usize, w: usize, values: &[f64]) -> Tensor {
        let mut t = Tensor::zeros(values.len(), h, w);
        for (c, &v) in values.iter().enumerate() {
            t.data[c * h * w..(c + 1) * h * w].iter_mut().for_each(|x| *x = v);
        }
        t
    }

    /// Forward pass; with `direction = Some(k)` also propagates the tangent
    /// along code dimension `k` (forward-mode differentiation).
    fn run(&self, input: Tensor, code: &[f64], direction: Option<usize>) -> Dual {
        let mut value = input;
        let mut tangent: Option<Tensor> = None;
        let mut stack: Vec<Dual> = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv2d { out_ch, kernel, weight, bias, .. } => {
                    value = Self::conv(&value, *out_ch, *kernel, weight, Some(bias));
                    tangent = tangent.map(|t| Self::conv(&t, *out_ch, *kernel, weight, None));
                }
                Layer::AvgPool2 => {
                    value = Self::pool(&value);
                    tangent = tangent.map(|t| Self::pool(&t));
                }
                Layer::Upsample2 => {
                    value = Self::upsample(&value);
                    tangent = tangent.map(|t| Self::upsample(&t));
                }
                Layer::Relu => {
                    if let Some(t) = tangent.as_mut() {
                        for (dt, &x) in t.data.iter_mut().zip(&value.data) {
                            if x <= 0.0 {
                                *dt = 0.0;
                            }
                        }
                    }
                    value.data.iter_mut().for_each(|x| *x = x.max(0.0));
                }
                Layer::Sigmoid => {
                    value.data.iter_mut().for_each(|x| *x = sigmoid(*x));
                    if let Some(t) = tangent.as_mut() {
                        for (dt, &s) in t.data.iter_mut().zip(&value.data) {
                            *dt *= s * (1.0 - s);
                        }
                    }
                }
                Layer::Push => stack.push((value.clone(), tangent.clone())),
                Layer::ConcatPop => {
                    let (sv, st) = stack.pop().expect("validated skip stack");
                    let (c_cur, c_skip, h, w) = (value.c, sv.c, value.h, value.w);
                    value = Self::concat(value, sv);
                    tangent = match (tangent, st) {
                        (None, None) => None,
                        (t, s) => Some(Self::concat(
                            t.unwrap_or_else(|| Tensor::zeros(c_cur, h, w)),
                            s.unwrap_or_else(|| Tensor::zeros(c_skip, h, w)),
                        )),
                    };
                }
                Layer::CodeConcat { code_size, out_ch, weight, bias } => {
                    let vals: Vec<f64> = (0..*out_ch)
                        .map(|o| {
                            bias[o] as f64
                                + (0..*code_size).map(|k| weight[o * code_size + k] as f64 * code[k]).sum::<f64>()
                        })
                        .collect();
                    let (c_cur, h, w) = (value.c, value.h, value.w);
                    value = Self::concat(value, Self::constant_channels(h, w, &vals));
                    if let Some(k) = direction {
                        let dvals: Vec<f64> = (0..*out_ch).map(|o| weight[o * code_size + k] as f64).collect();
                        let t = tangent.take().unwrap_or_else(|| Tensor::zeros(c_cur, h, w));
                        tangent = Some(Self::concat(t, Self::constant_channels(h, w, &dvals)));
                    }
                }
                Layer::OutputHead => {
                    let n = value.h * value.w;
                    for i in 0..n {
                        let s = sigmoid(value.data[i]);
                        value.data[i] = s;
                        if let Some(t) = tangent.as_mut() {
                            t.data[i] *= s * (1.0 - s);
                        }
                        value.data[n + i] = softplus(value.data[n + i]).max(UNCERTAINTY_FLOOR);
                    }
                }
            }
        }
        (value, tangent)
    }

    /// Full nonlinear forward pass: `(proximity, uncertainty)` per pixel.
    pub fn forward(&self, code: &DepthCode, cond: &ConditioningSet) -> Result<(Vec<f64>, Vec<f64>), CodecError> {
        if code.len() != self.header.code_size {
            return Err(CodecError::CodeSize { want: self.header.code_size, got: code.len() });
        }
        let input = self.input_tensor(cond)?;
        let (out, _) = self.run(input, code.as_slice(), None);
        let n = out.h * out.w;
        Ok((out.data[..n].to_vec(), out.data[n..2 * n].to_vec()))
    }

    /// Affine form at the zero code: prior and uncertainty from the forward
    /// pass, Jacobian from one forward-mode pass per code dimension.
    pub fn linearize(&self, cond: &ConditioningSet) -> Result<LinearDecoder, CodecError> {
        let hdr = self.header;
        let zero = vec![0.0; hdr.code_size];
        let input = self.input_tensor(cond)?;
        let (out, _) = self.run(input.clone(), &zero, None);
        let n = hdr.width * hdr.height;
        let prior = out.data[..n].to_vec();
        let uncertainty = out.data[n..2 * n].to_vec();

        let columns: Vec<Option<Vec<f64>>> = {
            use rayon::prelude::*;
            (0..hdr.code_size)
                .into_par_iter()
                .map(|k| self.run(input.clone(), &zero, Some(k)).1.map(|t| t.data[..n].to_vec()))
                .collect()
        };
        let mut basis = vec![0.0; n * hdr.code_size];
        for (k, col) in columns.iter().enumerate() {
            // `None`: the code never reached the output along this direction.
            if let Some(col) = col {
                for (i, &v) in col.iter().enumerate() {
                    basis[i * hdr.code_size + k] = v;
                }
            }
        }
        let proximity = ProximityParams::new(hdr.proximity_a as f64)
            .map_err(|e| CodecError::InvalidNetwork(e.to_string()))?;
        LinearDecoder::new(hdr.width, hdr.height, hdr.code_size, proximity, prior, Arc::new(basis), uncertainty)
    }
}
