//! CMWT decoder weight bundles.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic "CMWT" | version u32 (= 1)
//! code_size u32 | width u32 | height u32 | proximity_a f32 | rep_error_scale f32
//! layer_count u32
//! per layer: kind u32 | param_count u32 | params u32 * param_count
//! per layer, per tensor: element_count u32 | f32 * element_count
//! crc32 u32 over every preceding byte
//! ```
//!
//! Layer kinds and their params/tensors:
//!
//! | kind | layer        | params             | tensors                     |
//! |------|--------------|--------------------|-----------------------------|
//! | 1    | conv2d       | in, out, kernel    | weight[out][in][k][k], bias[out] |
//! | 2    | avgpool2     |                    |                             |
//! | 3    | upsample2    |                    |                             |
//! | 4    | relu         |                    |                             |
//! | 5    | sigmoid      |                    |                             |
//! | 6    | push         |                    |                             |
//! | 7    | concat_pop   |                    |                             |
//! | 8    | code_concat  | code_size, out     | weight[out][code], bias[out] |
//! | 9    | output_head  |                    |                             |

use std::fs;
use std::path::Path;

use super::FormatError;
use crate::depth_codec::{Layer, Network, NetworkHeader};

pub const MAGIC: [u8; 4] = *b"CMWT";
pub const VERSION: u32 = 1;

fn kind_code(layer: &Layer) -> u32 {
    match layer {
        Layer::Conv2d { .. } => 1,
        Layer::AvgPool2 => 2,
        Layer::Upsample2 => 3,
        Layer::Relu => 4,
        Layer::Sigmoid => 5,
        Layer::Push => 6,
        Layer::ConcatPop => 7,
        Layer::CodeConcat { .. } => 8,
        Layer::OutputHead => 9,
    }
}

fn kind_name(code: u32) -> &'static str {
    match code {
        1 => "conv2d",
        2 => "avgpool2",
        3 => "upsample2",
        4 => "relu",
        5 => "sigmoid",
        6 => "push",
        7 => "concat_pop",
        8 => "code_concat",
        9 => "output_head",
        _ => "unknown",
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &[f32]) {
    put_u32(out, t.len() as u32);
    for v in t {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_weights(net: &Network) -> Vec<u8> {
    let h = net.header();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, h.code_size as u32);
    put_u32(&mut out, h.width as u32);
    put_u32(&mut out, h.height as u32);
    out.extend_from_slice(&h.proximity_a.to_le_bytes());
    out.extend_from_slice(&h.rep_error_scale.to_le_bytes());
    put_u32(&mut out, net.layers().len() as u32);
    for layer in net.layers() {
        put_u32(&mut out, kind_code(layer));
        let params: Vec<u32> = match layer {
            Layer::Conv2d { in_ch, out_ch, kernel, .. } => vec![*in_ch as u32, *out_ch as u32, *kernel as u32],
            Layer::CodeConcat { code_size, out_ch, .. } => vec![*code_size as u32, *out_ch as u32],
            _ => Vec::new(),
        };
        put_u32(&mut out, params.len() as u32);
        for p in params {
            put_u32(&mut out, p);
        }
    }
    for layer in net.layers() {
        match layer {
            Layer::Conv2d { weight, bias, .. } | Layer::CodeConcat { weight, bias, .. } => {
                put_tensor(&mut out, weight);
                put_tensor(&mut out, bias);
            }
            _ => {}
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_bits(self.u32()?))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.bytes.len() {
            return Err(FormatError::Truncated { expected: self.pos + n, got: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

struct LayerDesc {
    kind: u32,
    params: Vec<u32>,
}

fn read_tensor(r: &mut Reader, layer: usize, kind: u32, what: &str, expected: usize) -> Result<Vec<f32>, FormatError> {
    let n = r.u32()? as usize;
    if n != expected {
        return Err(FormatError::Shape {
            layer,
            kind: kind_name(kind).into(),
            detail: format!("{what} has {n} elements, descriptor implies {expected}"),
        });
    }
    (0..n).map(|_| r.f32()).collect()
}

pub fn decode_weights(bytes: &[u8]) -> Result<Network, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated { expected: 4, got: bytes.len() });
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    if bytes.len() < 12 {
        return Err(FormatError::Truncated { expected: 12, got: bytes.len() });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([trailer[0], trailer[1], trailer[2], trailer[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::UnknownVersion(version.to_string()));
    }
    let header = NetworkHeader {
        code_size: r.u32()? as usize,
        width: r.u32()? as usize,
        height: r.u32()? as usize,
        proximity_a: r.f32()?,
        rep_error_scale: r.f32()?,
    };
    let n_layers = r.u32()? as usize;
    let mut descs = Vec::with_capacity(n_layers.min(4096));
    for i in 0..n_layers {
        let kind = r.u32()?;
        let n_params = r.u32()? as usize;
        let params = (0..n_params).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let want = match kind {
            1 => 3,
            8 => 2,
            2..=7 | 9 => 0,
            _ => return Err(FormatError::Descriptor(format!("layer {i}: unknown kind {kind}"))),
        };
        if params.len() != want {
            return Err(FormatError::Shape {
                layer: i,
                kind: kind_name(kind).into(),
                detail: format!("expected {want} params, got {}", params.len()),
            });
        }
        descs.push(LayerDesc { kind, params });
    }
    let mut layers = Vec::with_capacity(descs.len());
    for (i, d) in descs.iter().enumerate() {
        let layer = match d.kind {
            1 => {
                let (in_ch, out_ch, kernel) = (d.params[0] as usize, d.params[1] as usize, d.params[2] as usize);
                let weight = read_tensor(&mut r, i, d.kind, "weight", out_ch * in_ch * kernel * kernel)?;
                let bias = read_tensor(&mut r, i, d.kind, "bias", out_ch)?;
                Layer::Conv2d { in_ch, out_ch, kernel, weight, bias }
            }
            8 => {
                let (code_size, out_ch) = (d.params[0] as usize, d.params[1] as usize);
                let weight = read_tensor(&mut r, i, d.kind, "weight", out_ch * code_size)?;
                let bias = read_tensor(&mut r, i, d.kind, "bias", out_ch)?;
                Layer::CodeConcat { code_size, out_ch, weight, bias }
            }
            2 => Layer::AvgPool2,
            3 => Layer::Upsample2,
            4 => Layer::Relu,
            5 => Layer::Sigmoid,
            6 => Layer::Push,
            7 => Layer::ConcatPop,
            _ => Layer::OutputHead,
        };
        layers.push(layer);
    }
    if r.pos != body.len() {
        return Err(FormatError::Descriptor(format!("{} trailing bytes before checksum", body.len() - r.pos)));
    }
    Network::new(header, layers).map_err(|e| FormatError::Descriptor(e.to_string()))
}

pub fn write_weights(path: &Path, net: &Network) -> Result<(), FormatError> {
    fs::write(path, encode_weights(net)).map_err(|e| FormatError::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<Network, FormatError> {
    let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
    decode_weights(&bytes).map_err(|e| e.at(path))
}
