//! Sequence directories: a manifest plus per-keyframe PFM images.
//!
//! ```text
//! <dir>/manifest.txt
//! <dir>/frames/<id>_intensity.pfm
//! <dir>/frames/<id>_sparse_depth.pfm
//! <dir>/frames/<id>_rep_error.pfm
//! <dir>/frames/<id>_gt_depth.pfm        (optional)
//! ```

use std::fs;
use std::path::Path;

use super::manifest::{KeyframeRecord, SequenceManifest, MANIFEST_FILE};
use super::pfm::{read_float_image, write_float_image};
use super::FormatError;
use crate::image::Channel;
use crate::pipeline::KeyframePacket;

pub const FRAMES_DIR: &str = "frames";

fn frame_path(id: u64, what: &str) -> String {
    format!("{FRAMES_DIR}/{id:06}_{what}.pfm")
}

/// Writes packets as a sequence directory. All packets must share intrinsics.
pub fn save_sequence(dir: &Path, packets: &[KeyframePacket]) -> Result<(), FormatError> {
    let first = packets.first().ok_or_else(|| FormatError::Invalid("cannot save an empty sequence".into()))?;
    let intrinsics = first.intrinsics;
    fs::create_dir_all(dir.join(FRAMES_DIR)).map_err(|e| FormatError::io(&dir.join(FRAMES_DIR), e))?;
    let mut keyframes = Vec::with_capacity(packets.len());
    for p in packets {
        if p.intrinsics != intrinsics {
            return Err(FormatError::Invalid(format!("keyframe {} has different intrinsics", p.id)));
        }
        let rec = KeyframeRecord {
            id: p.id,
            timestamp: p.timestamp,
            pose: p.pose,
            intensity: frame_path(p.id, "intensity"),
            sparse_depth: frame_path(p.id, "sparse_depth"),
            rep_error: frame_path(p.id, "rep_error"),
            gt_depth: p.gt_depth.as_ref().map(|_| frame_path(p.id, "gt_depth")),
            observations: p.observations.clone(),
            matches: p.matches.clone(),
        };
        write_float_image(&dir.join(&rec.intensity), &p.intensity)?;
        write_float_image(&dir.join(&rec.sparse_depth), &p.sparse_depth)?;
        write_float_image(&dir.join(&rec.rep_error), &p.rep_error)?;
        if let (Some(path), Some(gt)) = (&rec.gt_depth, &p.gt_depth) {
            write_float_image(&dir.join(path), gt)?;
        }
        keyframes.push(rec);
    }
    let manifest = SequenceManifest { intrinsics, keyframes };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| FormatError::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<SequenceManifest, FormatError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| FormatError::io(&path, e))?;
    SequenceManifest::parse(&text).map_err(|e| e.at(&path))
}

/// Loads every keyframe listed in the manifest, in manifest order.
pub fn load_sequence(dir: &Path) -> Result<Vec<KeyframePacket>, FormatError> {
    let manifest = read_manifest(dir)?;
    let image = |rel: &str, channel: Channel| {
        let path = dir.join(rel);
        if !path.is_file() {
            return Err(FormatError::MissingFile(path));
        }
        read_float_image(&path, channel)
    };
    manifest
        .keyframes
        .into_iter()
        .map(|rec| {
            let packet = KeyframePacket {
                id: rec.id,
                timestamp: rec.timestamp,
                pose: rec.pose,
                intrinsics: manifest.intrinsics,
                intensity: image(&rec.intensity, Channel::Intensity)?,
                sparse_depth: image(&rec.sparse_depth, Channel::Depth)?,
                rep_error: image(&rec.rep_error, Channel::ReprojectionError)?,
                observations: rec.observations,
                matches: rec.matches,
                gt_depth: rec.gt_depth.as_deref().map(|p| image(p, Channel::Depth)).transpose()?,
            };
            packet.validate().map_err(|e| FormatError::Invalid(e.to_string()))?;
            Ok(packet)
        })
        .collect()
}
