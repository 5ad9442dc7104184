//! File formats: PFM float images, the sequence manifest, CMWT decoder
//! weights and ASCII PLY meshes. All binary multi-byte values are
//! little-endian.

pub mod manifest;
pub mod pfm;
pub mod ply;
pub mod sequence;
pub mod weights;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use manifest::{KeyframeRecord, SequenceManifest, MANIFEST_FILE};
pub use pfm::{decode_pfm, encode_pfm, read_float_image, write_float_image};
pub use ply::{encode_ply, write_ply};
pub use sequence::{load_sequence, save_sequence};
pub use weights::{decode_weights, encode_weights, read_weights, write_weights};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {inner}")]
    At { path: PathBuf, inner: Box<FormatError> },
    #[error("pfm: {0}")]
    Pfm(String),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("keyframe {keyframe}: missing required key `{key}`")]
    MissingKey { keyframe: u64, key: &'static str },
    #[error("unknown format version {0}")]
    UnknownVersion(String),
    #[error("referenced file does not exist: {0}")]
    MissingFile(PathBuf),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("layer {layer} ({kind}): {detail}")]
    Shape { layer: usize, kind: String, detail: String },
    #[error("invalid descriptor: {0}")]
    Descriptor(String),
    #[error("invalid content: {0}")]
    Invalid(String),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
}

impl FormatError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        FormatError::Io { path: path.to_path_buf(), source }
    }

    /// Attaches the file the error came from.
    pub(crate) fn at(self, path: &Path) -> Self {
        match self {
            e @ (FormatError::Io { .. } | FormatError::At { .. } | FormatError::MissingFile(_)) => e,
            e => FormatError::At { path: path.to_path_buf(), inner: Box::new(e) },
        }
    }
}
