//! Sequence manifest: a line-oriented UTF-8 text file.
//!
//! ```text
//! codemap-sequence 1
//! intrinsics <fx> <fy> <cx> <cy> <width> <height>
//! keyframe <id>
//! timestamp <seconds>
//! pose <tx> <ty> <tz> <qw> <qx> <qy> <qz>
//! intensity <relative path>
//! sparse_depth <relative path>
//! rep_error <relative path>
//! gt_depth <relative path>                      (optional)
//! obs <landmark_id> <u> <v> <depth> <rep_error>  (repeated)
//! match <other_id> <landmark_id> <u_i> <v_i> <u_j> <v_j>  (repeated)
//! end
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Numbers are printed
//! in shortest round-trip form, so `print(parse(text)) == text` for text in
//! canonical form.

use std::fmt::Write as _;
use std::str::FromStr;

use super::FormatError;
use crate::factors::Correspondence;
use crate::geometry::{Intrinsics, PixelCoord, Pose};
use crate::noise_sim::SparseObservation;

pub const MANIFEST_FILE: &str = "manifest.txt";
const HEADER: &str = "codemap-sequence";
const VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeRecord {
    pub id: u64,
    pub timestamp: f64,
    pub pose: Pose,
    pub intensity: String,
    pub sparse_depth: String,
    pub rep_error: String,
    pub gt_depth: Option<String>,
    pub observations: Vec<SparseObservation>,
    /// Matches grouped by the other keyframe, in file order.
    pub matches: Vec<(u64, Vec<Correspondence>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceManifest {
    pub intrinsics: Intrinsics,
    pub keyframes: Vec<KeyframeRecord>,
}

fn fmt_pose(p: &Pose) -> String {
    let t = p.translation();
    let q = p.quaternion_wxyz();
    format!("{} {} {} {} {} {} {}", t.x, t.y, t.z, q[0], q[1], q[2], q[3])
}

impl SequenceManifest {
    pub fn to_text(&self) -> String {
        let k = &self.intrinsics;
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER} {VERSION}");
        let _ = writeln!(s, "intrinsics {} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
        for kf in &self.keyframes {
            let _ = writeln!(s, "keyframe {}", kf.id);
            let _ = writeln!(s, "timestamp {}", kf.timestamp);
            let _ = writeln!(s, "pose {}", fmt_pose(&kf.pose));
            let _ = writeln!(s, "intensity {}", kf.intensity);
            let _ = writeln!(s, "sparse_depth {}", kf.sparse_depth);
            let _ = writeln!(s, "rep_error {}", kf.rep_error);
            if let Some(gt) = &kf.gt_depth {
                let _ = writeln!(s, "gt_depth {gt}");
            }
            for o in &kf.observations {
                let _ = writeln!(s, "obs {} {} {} {} {}", o.landmark_id, o.pixel.u, o.pixel.v, o.depth, o.rep_error);
            }
            for (other, list) in &kf.matches {
                for m in list {
                    let _ = writeln!(
                        s,
                        "match {other} {} {} {} {} {}",
                        m.landmark_id, m.pixel_i.u, m.pixel_i.v, m.pixel_j.u, m.pixel_j.v
                    );
                }
            }
            s.push_str("end\n");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let (ln, first) = lines.next().ok_or(FormatError::Manifest { line: 1, msg: "empty manifest".into() })?;
        let toks: Vec<&str> = first.split_whitespace().collect();
        if toks.first() != Some(&HEADER) {
            return Err(FormatError::Manifest { line: ln, msg: format!("expected `{HEADER} <version>` header") });
        }
        match toks.get(1) {
            Some(&VERSION) if toks.len() == 2 => {}
            Some(v) => return Err(FormatError::UnknownVersion((*v).to_string())),
            None => return Err(FormatError::Manifest { line: ln, msg: "missing version".into() }),
        }

        let mut intrinsics: Option<Intrinsics> = None;
        let mut keyframes: Vec<KeyframeRecord> = Vec::new();
        let mut current: Option<Partial> = None;

        for (ln, line) in lines {
            let mut toks = line.split_whitespace();
            let key = toks.next().expect("non-empty line");
            let args: Vec<&str> = toks.collect();
            let err = |msg: String| FormatError::Manifest { line: ln, msg };
            match (key, current.as_mut()) {
                ("intrinsics", None) => {
                    let v = nums::<f64>(&args[..args.len().min(4)], 4, ln)?;
                    let wh = nums::<usize>(args.get(4..).unwrap_or(&[]), 2, ln)?;
                    intrinsics =
                        Some(Intrinsics::new(v[0], v[1], v[2], v[3], wh[0], wh[1]).map_err(|e| err(e.to_string()))?);
                }
                ("keyframe", None) => {
                    let id = nums::<u64>(&args, 1, ln)?[0];
                    if keyframes.iter().any(|k| k.id == id) {
                        return Err(err(format!("duplicate keyframe id {id}")));
                    }
                    current = Some(Partial::new(id));
                }
                ("end", Some(_)) => {
                    keyframes.push(current.take().expect("inside keyframe").finish()?);
                }
                ("timestamp", Some(p)) => p.timestamp = Some(nums::<f64>(&args, 1, ln)?[0]),
                ("pose", Some(p)) => {
                    let v = nums::<f64>(&args, 7, ln)?;
                    p.pose = Some(Pose::from_parts([v[0], v[1], v[2]], [v[3], v[4], v[5], v[6]]).map_err(|e| err(e.to_string()))?);
                }
                ("intensity", Some(p)) => p.intensity = Some(path_arg(&args, ln)?),
                ("sparse_depth", Some(p)) => p.sparse_depth = Some(path_arg(&args, ln)?),
                ("rep_error", Some(p)) => p.rep_error = Some(path_arg(&args, ln)?),
                ("gt_depth", Some(p)) => p.gt_depth = Some(path_arg(&args, ln)?),
                ("obs", Some(p)) => {
                    let id = nums::<u64>(&args[..args.len().min(1)], 1, ln)?[0];
                    let v = nums::<f64>(&args[1..], 4, ln)?;
                    if !(v[2] > 0.0) || !(v[3] >= 0.0) {
                        return Err(err("observation depth must be > 0 and rep_error >= 0".into()));
                    }
                    p.observations.push(SparseObservation {
                        landmark_id: id,
                        pixel: PixelCoord::new(v[0], v[1]),
                        depth: v[2],
                        rep_error: v[3],
                    });
                }
                ("match", Some(p)) => {
                    let ids = nums::<u64>(&args[..args.len().min(2)], 2, ln)?;
                    let v = nums::<f64>(args.get(2..).unwrap_or(&[]), 4, ln)?;
                    let m = Correspondence {
                        pixel_i: PixelCoord::new(v[0], v[1]),
                        pixel_j: PixelCoord::new(v[2], v[3]),
                        landmark_id: ids[1],
                    };
                    match p.matches.last_mut() {
                        Some((other, list)) if *other == ids[0] => list.push(m),
                        _ => p.matches.push((ids[0], vec![m])),
                    }
                }
                (k, Some(_)) if k == "intrinsics" || k == "keyframe" => {
                    return Err(err(format!("`{k}` inside an unterminated keyframe block")))
                }
                (k, None) if k != "end" => return Err(err(format!("`{k}` outside a keyframe block"))),
                (k, _) => return Err(err(format!("unexpected key `{k}`"))),
            }
        }
        if let Some(p) = current {
            return Err(FormatError::Manifest {
                line: text.lines().count(),
                msg: format!("keyframe {} is missing `end`", p.id),
            });
        }
        let intrinsics = intrinsics.ok_or(FormatError::Manifest { line: 0, msg: "missing `intrinsics`".into() })?;
        Ok(Self { intrinsics, keyframes })
    }
}

fn nums<T: FromStr>(args: &[&str], n: usize, line: usize) -> Result<Vec<T>, FormatError> {
    if args.len() != n {
        return Err(FormatError::Manifest { line, msg: format!("expected {n} values, got {}", args.len()) });
    }
    args.iter()
        .map(|a| a.parse::<T>().map_err(|_| FormatError::Manifest { line, msg: format!("cannot parse `{a}`") }))
        .collect()
}

fn path_arg(args: &[&str], line: usize) -> Result<String, FormatError> {
    if args.len() != 1 {
        return Err(FormatError::Manifest { line, msg: "expected a single relative path".into() });
    }
    let p = args[0];
    if p.starts_with('/') || p.split('/').any(|c| c == "..") {
        return Err(FormatError::Manifest { line, msg: format!("path `{p}` must be relative to the sequence root") });
    }
    Ok(p.to_string())
}

struct Partial {
    id: u64,
    timestamp: Option<f64>,
    pose: Option<Pose>,
    intensity: Option<String>,
    sparse_depth: Option<String>,
    rep_error: Option<String>,
    gt_depth: Option<String>,
    observations: Vec<SparseObservation>,
    matches: Vec<(u64, Vec<Correspondence>)>,
}

impl Partial {
    fn new(id: u64) -> Self {
        Self {
            id,
            timestamp: None,
            pose: None,
            intensity: None,
            sparse_depth: None,
            rep_error: None,
            gt_depth: None,
            observations: Vec::new(),
            matches: Vec::new(),
        }
    }

    fn finish(self) -> Result<KeyframeRecord, FormatError> {
        let missing = |key| FormatError::MissingKey { keyframe: self.id, key };
        Ok(KeyframeRecord {
            id: self.id,
            timestamp: self.timestamp.ok_or_else(|| missing("timestamp"))?,
            pose: self.pose.ok_or_else(|| missing("pose"))?,
            intensity: self.intensity.clone().ok_or_else(|| missing("intensity"))?,
            sparse_depth: self.sparse_depth.clone().ok_or_else(|| missing("sparse_depth"))?,
            rep_error: self.rep_error.clone().ok_or_else(|| missing("rep_error"))?,
            gt_depth: self.gt_depth,
            observations: self.observations,
            matches: self.matches,
        })
    }
}
