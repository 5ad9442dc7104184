//! Synthetic ground-truth sequences: ray-cast textured planes and
//! axis-aligned boxes, with exact landmarks, matches and sparse depth.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::factors::Correspondence;
use crate::geometry::{project, unproject, Intrinsics, PixelCoord, Pose};
use crate::image::{Channel, DenseImage};
use crate::noise_sim::{
    perturb_along_ray, rasterize_observations, sparsify_depth, EmgParams, EmgSampler, NoiseError, SparseObservation,
    MAX_VIRTUAL_BASELINE,
};
use crate::pipeline::{KeyframePacket, UNMATCHED_REP_ERROR};

/// Correspondences kept per keyframe pair.
pub const MAX_MATCHES_PER_PAIR: usize = 200;
const MIN_DEPTH: f64 = 0.2;
const MAX_DEPTH: f64 = 20.0;
/// Relative depth tolerance of the landmark visibility test.
const OCCLUSION_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("frame {index} out of range (sequence has {len})")]
    FrameOutOfRange { index: usize, len: usize },
    #[error("scene file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Texture {
    /// Band-limited value noise; `cell` is the coarsest lattice spacing in meters.
    Noise { seed: u64, cell: f64 },
    Flat { value: f64 },
}

impl Texture {
    pub fn noise(seed: u64) -> Self {
        Texture::Noise { seed, cell: 0.2 }
    }

    /// Intensity at 2D surface coordinates (meters), in `[0, 1]`.
    pub fn eval(&self, s: f64, t: f64) -> f64 {
        match *self {
            Texture::Flat { value } => value,
            Texture::Noise { seed, cell } => {
                let mut acc = 0.0;
                let mut amp_sum = 0.0;
                let mut amp = 1.0;
                let mut c = cell;
                for octave in 0..2u64 {
                    acc += amp * value_noise(seed.wrapping_add(octave * 0x51_7cc1), s / c, t / c);
                    amp_sum += amp;
                    amp *= 0.6;
                    c *= 0.5;
                }
                (0.1 + 0.8 * acc / amp_sum).clamp(0.0, 1.0)
            }
        }
    }
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let mut z = seed ^ (ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (iy as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let smooth = |t: f64| t * t * t * (t * (6.0 * t - 15.0) + 10.0);
    let (sx, sy) = (smooth(x - fx), smooth(y - fy));
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * sx;
    let bottom = c + (d - c) * sx;
    top + (bottom - top) * sy
}

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Rectangle in the local xy plane of `pose` (plane-to-world), extending
    /// `half_extent` in local x and y.
    Plane { pose: Pose, half_extent: [f64; 2], texture: Texture },
    AxisBox { min: Vector3<f64>, max: Vector3<f64>, texture: Texture },
}

struct Hit {
    t: f64,
    intensity: f64,
}

impl Primitive {
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        match self {
            Primitive::Plane { pose, half_extent, texture } => {
                let r = pose.rotation_matrix();
                let n = r.column(2).into_owned();
                let denom = n.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = n.dot(&(pose.translation() - origin)) / denom;
                if !(t > 0.0) {
                    return None;
                }
                let local = r.transpose() * (origin + dir * t - pose.translation());
                if local.x.abs() > half_extent[0] || local.y.abs() > half_extent[1] {
                    return None;
                }
                Some(Hit { t, intensity: texture.eval(local.x, local.y) })
            }
            Primitive::AxisBox { min, max, texture } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for a in 0..3 {
                    if dir[a].abs() < 1e-15 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((min[a] - origin[a]) / dir[a], (max[a] - origin[a]) / dir[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis = a;
                    }
                    t1 = t1.min(tb);
                }
                if t0 > t1 || !(t0 > 0.0) {
                    return None;
                }
                let p = origin + dir * t0;
                let (s, q) = match axis {
                    0 => (p.y, p.z),
                    1 => (p.x, p.z),
                    _ => (p.x, p.y),
                };
                // Offset per face so adjacent faces do not share a pattern.
                let face_shift = 10.0 * (axis as f64 + 1.0);
                Some(Hit { t: t0, intensity: texture.eval(s + face_shift, q) })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    /// Camera-to-world poses.
    pub trajectory: Vec<Pose>,
    pub intrinsics: Intrinsics,
}

/// Depth along the camera z axis for a pixel ray, and the hit intensity.
fn cast(spec: &SceneSpec, pose: &Pose, x: &PixelCoord) -> Option<(f64, f64)> {
    let ray_c = spec.intrinsics.ray(x);
    let dir = pose.rotation_matrix() * ray_c;
    let origin = pose.translation();
    spec.primitives
        .iter()
        .filter_map(|p| p.intersect(&origin, &dir))
        .min_by(|a, b| a.t.total_cmp(&b.t))
        .map(|h| (h.t, h.intensity))
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.intrinsics.validate().map_err(|e| SynthError::InvalidScene(e.to_string()))?;
        if self.trajectory.is_empty() {
            return Err(SynthError::InvalidScene("empty trajectory".into()));
        }
        if self.primitives.is_empty() {
            return Err(SynthError::InvalidScene("no primitives".into()));
        }
        let k = &self.intrinsics;
        for (f, pose) in self.trajectory.iter().enumerate() {
            let mut hits = 0;
            for gy in 0..9 {
                for gx in 0..9 {
                    let x = PixelCoord::new((k.width - 1) as f64 * gx as f64 / 8.0, (k.height - 1) as f64 * gy as f64 / 8.0);
                    if let Some((d, _)) = cast(self, pose, &x) {
                        if !(d > MIN_DEPTH && d < MAX_DEPTH) {
                            return Err(SynthError::InvalidScene(format!("frame {f}: depth {d:.3} m outside (0.2, 20)")));
                        }
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                return Err(SynthError::InvalidScene(format!("frame {f} sees no primitive")));
            }
        }
        Ok(())
    }

    /// Ray-cast intensity and depth; pixels that hit nothing get depth 0 and
    /// intensity 0.
    pub fn render(&self, index: usize) -> Result<(DenseImage, DenseImage), SynthError> {
        let pose = self
            .trajectory
            .get(index)
            .ok_or(SynthError::FrameOutOfRange { index, len: self.trajectory.len() })?;
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..h)
            .into_par_iter()
            .map(|v| {
                let mut inten = vec![0.0f32; w];
                let mut depth = vec![0.0f32; w];
                for u in 0..w {
                    if let Some((d, i)) = cast(self, pose, &PixelCoord::new(u as f64, v as f64)) {
                        depth[u] = d as f32;
                        inten[u] = i as f32;
                    }
                }
                (inten, depth)
            })
            .collect();
        let (mut inten, mut depth) = (Vec::with_capacity(w * h), Vec::with_capacity(w * h));
        for (i, d) in rows {
            inten.extend(i);
            depth.extend(d);
        }
        Ok((
            DenseImage::new(w, h, Channel::Intensity, inten).expect("sized"),
            DenseImage::new(w, h, Channel::Depth, depth).expect("sized"),
        ))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("codemap-scene 1\n");
        let k = &self.intrinsics;
        let _ = writeln!(s, "intrinsics {} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
        let tex = |t: &Texture| match *t {
            Texture::Noise { seed, cell } => format!("noise {seed} {cell}"),
            Texture::Flat { value } => format!("flat {value}"),
        };
        let pose = |p: &Pose| {
            let t = p.translation();
            let q = p.quaternion_wxyz();
            format!("{} {} {} {} {} {} {}", t.x, t.y, t.z, q[0], q[1], q[2], q[3])
        };
        for p in &self.primitives {
            match p {
                Primitive::Plane { pose: pp, half_extent, texture } => {
                    let _ = writeln!(s, "plane {} {} {} {}", pose(pp), half_extent[0], half_extent[1], tex(texture));
                }
                Primitive::AxisBox { min, max, texture } => {
                    let _ = writeln!(s, "box {} {} {} {} {} {} {}", min.x, min.y, min.z, max.x, max.y, max.z, tex(texture));
                }
            }
        }
        for p in &self.trajectory {
            let _ = writeln!(s, "camera {}", pose(p));
        }
        s
    }

    /// Parses the scene text format:
    ///
    /// ```text
    /// codemap-scene 1
    /// intrinsics <fx> <fy> <cx> <cy> <width> <height>
    /// plane <tx ty tz qw qx qy qz> <half_x> <half_y> <texture>
    /// box <minx miny minz> <maxx maxy maxz> <texture>
    /// camera <tx ty tz qw qx qy qz>
    /// ```
    ///
    /// where `<texture>` is `noise <seed> <cell>` or `flat <value>`.
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let mut intrinsics = None;
        let mut primitives = Vec::new();
        let mut trajectory = Vec::new();
        let mut header = false;
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let err = |msg: String| SynthError::Parse { line, msg };
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = l.split_whitespace().collect();
            if !header {
                if toks != ["codemap-scene", "1"] {
                    return Err(err(format!("expected header `codemap-scene 1`, got `{l}`")));
                }
                header = true;
                continue;
            }
            let nums = |from: usize, count: usize| -> Result<Vec<f64>, SynthError> {
                if toks.len() < from + count {
                    return Err(err(format!("`{}` needs {count} numbers", toks[0])));
                }
                toks[from..from + count]
                    .iter()
                    .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number `{t}`"))))
                    .collect()
            };
            let texture = |from: usize| -> Result<Texture, SynthError> {
                match toks.get(from) {
                    Some(&"noise") if toks.len() == from + 3 => Ok(Texture::Noise {
                        seed: toks[from + 1].parse().map_err(|_| err(format!("bad seed `{}`", toks[from + 1])))?,
                        cell: nums(from + 2, 1)?[0],
                    }),
                    Some(&"flat") if toks.len() == from + 2 => Ok(Texture::Flat { value: nums(from + 1, 1)?[0] }),
                    _ => Err(err("texture must be `noise <seed> <cell>` or `flat <value>`".into())),
                }
            };
            let pose_at = |from: usize| -> Result<Pose, SynthError> {
                let v = nums(from, 7)?;
                Pose::from_parts([v[0], v[1], v[2]], [v[3], v[4], v[5], v[6]]).map_err(|e| err(e.to_string()))
            };
            match toks[0] {
                "intrinsics" => {
                    let v = nums(1, 6)?;
                    if toks.len() != 7 || v[4].fract() != 0.0 || v[5].fract() != 0.0 {
                        return Err(err("intrinsics: fx fy cx cy width height".into()));
                    }
                    intrinsics = Some(
                        Intrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize).map_err(|e| err(e.to_string()))?,
                    );
                }
                "plane" => {
                    let pose = pose_at(1)?;
                    let he = nums(8, 2)?;
                    primitives.push(Primitive::Plane { pose, half_extent: [he[0], he[1]], texture: texture(10)? });
                }
                "box" => {
                    let v = nums(1, 6)?;
                    let (min, max) = (Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]));
                    if (0..3).any(|a| min[a] >= max[a]) {
                        return Err(err("box min must be below max on every axis".into()));
                    }
                    primitives.push(Primitive::AxisBox { min, max, texture: texture(7)? });
                }
                "camera" => {
                    if toks.len() != 8 {
                        return Err(err("camera: tx ty tz qw qx qy qz".into()));
                    }
                    trajectory.push(pose_at(1)?);
                }
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }
        let intrinsics = intrinsics.ok_or(SynthError::Parse { line: 0, msg: "missing intrinsics".into() })?;
        let spec = Self { primitives, trajectory, intrinsics };
        spec.validate()?;
        Ok(spec)
    }
}

/// Default camera: 256x192 with a ~65 degree horizontal field of view.
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics::new(200.0, 200.0, 127.5, 95.5, 256, 192).expect("valid")
}

fn look_at(eye: [f64; 3], target: [f64; 3]) -> Pose {
    Pose::look_at(Vector3::from(eye), Vector3::from(target), Vector3::new(0.0, -1.0, 0.0))
}

/// A textured, slightly slanted wall about 2.5 m away, seen by cameras
/// moving sideways in 8 cm steps.
pub fn wall_scene(frames: usize, seed: u64) -> SceneSpec {
    let wall = Pose::from_axis_angle(Vector3::new(0.0, 0.25, 0.0), Vector3::new(0.0, 0.0, 2.5));
    SceneSpec {
        primitives: vec![Primitive::Plane { pose: wall, half_extent: [6.0, 6.0], texture: Texture::noise(seed) }],
        trajectory: (0..frames)
            .map(|f| {
                let x = 0.08 * (f as f64 - (frames as f64 - 1.0) / 2.0);
                look_at([x, 0.0, 0.0], [x * 0.5, 0.0, 2.5])
            })
            .collect(),
        intrinsics: default_intrinsics(),
    }
}

/// Same geometry as [`wall_scene`] with a uniform color.
pub fn textureless_wall_scene(frames: usize) -> SceneSpec {
    let mut s = wall_scene(frames, 0);
    if let Primitive::Plane { texture, .. } = &mut s.primitives[0] {
        *texture = Texture::Flat { value: 0.5 };
    }
    s
}

/// A fronto-parallel textured plane at `z` seen by an identity camera.
pub fn fronto_plane_scene(z: f64, seed: u64) -> SceneSpec {
    SceneSpec {
        primitives: vec![Primitive::Plane {
            pose: Pose::from_translation(Vector3::new(0.0, 0.0, z)),
            half_extent: [100.0, 100.0],
            texture: Texture::noise(seed),
        }],
        trajectory: vec![Pose::identity()],
        intrinsics: default_intrinsics(),
    }
}

/// A 0.6 m box centered at the origin, orbited by `frames` cameras from
/// slightly above, 1.8 m away.
pub fn box_scene(frames: usize, seed: u64) -> SceneSpec {
    let h = 0.3;
    SceneSpec {
        primitives: vec![Primitive::AxisBox {
            min: Vector3::new(-h, -h, -h),
            max: Vector3::new(h, h, h),
            texture: Texture::noise(seed),
        }],
        trajectory: (0..frames)
            .map(|f| {
                let a = std::f64::consts::TAU * f as f64 / frames as f64;
                // y points down in camera convention; cameras sit above the box.
                look_at([1.8 * a.cos(), -1.0, 1.8 * a.sin()], [0.0, 0.0, 0.0])
            })
            .collect(),
        intrinsics: default_intrinsics(),
    }
}

pub fn preset(name: &str, frames: usize, seed: u64) -> Option<SceneSpec> {
    match name {
        "wall" => Some(wall_scene(frames, seed)),
        "textureless" => Some(textureless_wall_scene(frames)),
        "plane" => {
            let mut s = fronto_plane_scene(2.0, seed);
            s.trajectory = (0..frames.max(1)).map(|f| Pose::from_translation(Vector3::new(0.05 * f as f64, 0.0, 0.0))).collect();
            Some(s)
        }
        "box" => Some(box_scene(frames, seed)),
        _ => None,
    }
}

/// Options for [`make_sequence`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceOptions {
    pub n_points: usize,
    pub noise: Option<EmgParams>,
    pub seed: u64,
    /// Seconds between frames.
    pub frame_interval: f64,
}

impl Default for SequenceOptions {
    fn default() -> Self {
        Self { n_points: 500, noise: None, seed: 0, frame_interval: 0.5 }
    }
}

struct Landmark {
    source: usize,
    point: Vector3<f64>,
}

fn visible(depth: &DenseImage, k: &Intrinsics, p_cam: &Vector3<f64>) -> Option<PixelCoord> {
    let x = project(p_cam, k).ok()?;
    if !k.contains(&x) {
        return None;
    }
    let d = depth.get(x.u.round() as usize, x.v.round() as usize) as f64;
    ((d - p_cam.z).abs() <= OCCLUSION_TOLERANCE * p_cam.z + 0.02).then_some(x)
}

/// Renders the scene and builds keyframe packets with exact landmarks.
///
/// Each frame's keypoints become landmarks. A landmark is observed in every
/// frame where it projects inside the image without occlusion; its
/// reprojection error is [`UNMATCHED_REP_ERROR`] when no other frame sees it.
/// Matches between two frames use landmarks whose source is one of them, so
/// the source pixel is an integer pixel with exact depth.
pub fn make_sequence(spec: &SceneSpec, opts: &SequenceOptions) -> Result<Vec<KeyframePacket>, SynthError> {
    spec.validate()?;
    let nf = spec.trajectory.len();
    if nf < 2 {
        return Err(SynthError::InvalidScene("a sequence needs at least 2 frames".into()));
    }
    let k = spec.intrinsics;
    let renders: Vec<(DenseImage, DenseImage)> = (0..nf).map(|f| spec.render(f)).collect::<Result<_, _>>()?;
    let world_to_cam: Vec<Pose> = spec.trajectory.iter().map(|p| p.inverse()).collect();

    // Landmarks from each frame's keypoints.
    let mut landmarks = Vec::new();
    let mut keypoints: Vec<Vec<(u64, SparseObservation)>> = Vec::with_capacity(nf);
    for (f, (inten, depth)) in renders.iter().enumerate() {
        let sp = sparsify_depth(inten, depth, opts.n_points, opts.seed.wrapping_add(f as u64))?;
        let mut kp = Vec::with_capacity(sp.observations.len());
        for mut o in sp.observations {
            let id = landmarks.len() as u64;
            let p = unproject(&o.pixel, o.depth, &k).map_err(|e| SynthError::InvalidScene(e.to_string()))?;
            landmarks.push(Landmark { source: f, point: spec.trajectory[f].transform_point(&p) });
            o.landmark_id = id;
            kp.push((id, o));
        }
        keypoints.push(kp);
    }

    // Visibility of every landmark in every frame.
    let seen: Vec<BTreeMap<u64, SparseObservation>> = (0..nf)
        .into_par_iter()
        .map(|g| {
            let mut out = BTreeMap::new();
            for (id, l) in landmarks.iter().enumerate() {
                let p = world_to_cam[g].transform_point(&l.point);
                if l.source == g {
                    continue;
                }
                if let Some(x) = visible(&renders[g].1, &k, &p) {
                    out.insert(id as u64, SparseObservation { landmark_id: id as u64, pixel: x, depth: p.z, rep_error: 0.0 });
                }
            }
            out
        })
        .collect();
    let mut times_seen = vec![0usize; landmarks.len()];
    for s in &seen {
        for id in s.keys() {
            times_seen[*id as usize] += 1;
        }
    }

    let sampler = opts.noise.as_ref().map(EmgSampler::new).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0f_e46);
    let mut packets = Vec::with_capacity(nf);
    for f in 0..nf {
        let mut own = Vec::with_capacity(keypoints[f].len());
        for &(id, o) in &keypoints[f] {
            let matched = times_seen[id as usize] > 0;
            if !matched {
                own.push(SparseObservation { rep_error: UNMATCHED_REP_ERROR, ..o });
                continue;
            }
            match &sampler {
                None => own.push(o),
                Some(s) => {
                    let target = s.sample(&mut rng);
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let virt = nearest_neighbor(&spec.trajectory, f);
                    let Some(v) = virt else {
                        own.push(SparseObservation { rep_error: UNMATCHED_REP_ERROR, ..o });
                        continue;
                    };
                    if let Ok(p) = perturb_along_ray(&o, &spec.trajectory[f], &spec.trajectory[v], &k, target, sign) {
                        own.push(p);
                    }
                }
            }
        }
        let (sparse_depth, rep_error) = rasterize_observations(&own, k.width, k.height);
        let mut observations = own.clone();
        observations.extend(seen[f].values().copied());

        let mut matches = Vec::new();
        for g in 0..nf {
            if g == f {
                continue;
            }
            let mut list: Vec<Correspondence> = Vec::new();
            // Landmarks from f seen in g, then landmarks from g seen in f.
            for &(id, o) in &keypoints[f] {
                if let Some(og) = seen[g].get(&id) {
                    list.push(Correspondence { pixel_i: o.pixel, pixel_j: og.pixel, landmark_id: id });
                }
            }
            for &(id, o) in &keypoints[g] {
                if let Some(of) = seen[f].get(&id) {
                    list.push(Correspondence { pixel_i: of.pixel, pixel_j: o.pixel, landmark_id: id });
                }
            }
            if list.is_empty() {
                continue;
            }
            if list.len() > MAX_MATCHES_PER_PAIR {
                let n = list.len();
                list = (0..MAX_MATCHES_PER_PAIR).map(|i| list[i * n / MAX_MATCHES_PER_PAIR]).collect();
            }
            matches.push((g as u64, list));
        }

        let (intensity, gt) = renders[f].clone();
        packets.push(KeyframePacket {
            id: f as u64,
            timestamp: f as f64 * opts.frame_interval,
            pose: spec.trajectory[f],
            intrinsics: k,
            intensity,
            sparse_depth,
            rep_error,
            observations,
            matches,
            gt_depth: Some(gt),
        });
    }
    Ok(packets)
}

/// Closest other camera within the virtual-keyframe baseline limit.
pub fn nearest_neighbor(trajectory: &[Pose], f: usize) -> Option<usize> {
    let c = trajectory[f].center();
    trajectory
        .iter()
        .enumerate()
        .filter(|(g, _)| *g != f)
        .map(|(g, p)| (g, (p.center() - c).norm()))
        .filter(|(_, d)| *d <= MAX_VIRTUAL_BASELINE)
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(g, _)| g)
}

/// Adds zero-mean Gaussian noise of standard deviation `sigma` to a code.
pub fn perturb_code<R: Rng + ?Sized>(code: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    let n = rand_distr::Normal::new(0.0, sigma).expect("sigma >= 0");
    code.iter().map(|c| c + rand_distr::Distribution::sample(&n, rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fronto_plane_depth_is_constant() {
        let (_, d) = fronto_plane_scene(2.0, 1).render(0).unwrap();
        assert!(d.data().iter().all(|&v| (v as f64 - 2.0).abs() < 1e-6));
    }

    #[test]
    fn translated_camera_sees_closer_plane() {
        let mut s = fronto_plane_scene(2.0, 1);
        s.trajectory = vec![Pose::from_translation(Vector3::new(0.0, 0.0, 0.5))];
        let (_, d) = s.render(0).unwrap();
        assert!(d.data().iter().all(|&v| (v as f64 - 1.5).abs() < 1e-6));
    }

    #[test]
    fn render_is_deterministic_and_textured() {
        let s = wall_scene(2, 7);
        let a = s.render(1).unwrap();
        let b = s.render(1).unwrap();
        assert_eq!(a, b);
        let (lo, hi) = a.0.data().iter().fold((1.0f32, 0.0f32), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(hi - lo > 0.3);
        assert!(matches!(s.render(2), Err(SynthError::FrameOutOfRange { .. })));
    }

    #[test]
    fn scene_text_round_trip() {
        for s in [wall_scene(3, 4), box_scene(4, 2), textureless_wall_scene(2)] {
            let text = s.to_text();
            let back = SceneSpec::parse(&text).unwrap();
            assert_eq!(back.to_text(), text);
        }
        assert!(matches!(SceneSpec::parse("codemap-scene 1\nfoo 1\n"), Err(SynthError::Parse { line: 2, .. })));
    }

    #[test]
    fn camera_facing_away_is_invalid() {
        let mut s = fronto_plane_scene(2.0, 0);
        s.trajectory = vec![Pose::from_axis_angle(Vector3::new(0.0, std::f64::consts::PI, 0.0), Vector3::zeros())];
        assert!(s.validate().is_err());
    }
}
