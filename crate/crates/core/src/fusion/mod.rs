//! Batch TSDF fusion of depth maps with known poses, mesh extraction and
//! median-based scale alignment for monocular trajectories.

mod marching_cubes;

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Intrinsics, Pose};
use crate::image::DenseImage;

pub use marching_cubes::extract_mesh;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("invalid volume parameters: {0}")]
    InvalidParams(String),
    #[error("depth image is {got_w}x{got_h}, intrinsics expect {want_w}x{want_h}")]
    Dimensions { want_w: usize, want_h: usize, got_w: usize, got_h: usize },
    #[error("no valid depth values to take a median of")]
    NoValidDepth,
    #[error("invalid median {0}")]
    InvalidMedian(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsdfParams {
    pub voxel_size: f64,
    pub truncation: f64,
    pub max_weight: f32,
}

impl Default for TsdfParams {
    fn default() -> Self {
        Self { voxel_size: 0.02, truncation: 0.08, max_weight: 100.0 }
    }
}

/// Largest grid [`fuse_views`] will allocate.
pub const MAX_VOXELS: usize = 64 << 20;

/// Dense voxel grid. Voxel `(x, y, z)` sits at `origin + voxel_size * (x, y, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub truncation: f64,
    pub max_weight: f32,
    /// Signed distance divided by the truncation, in `[-1, 1]`. Index is
    /// `x + dims[0] * (y + dims[1] * z)`.
    pub tsdf: Vec<f32>,
    pub weight: Vec<f32>,
}

impl TsdfVolume {
    pub fn new(origin: Vector3<f64>, dims: [usize; 3], params: TsdfParams) -> Result<Self, FusionError> {
        if !(params.voxel_size > 0.0 && params.truncation > 0.0 && params.max_weight > 0.0) {
            return Err(FusionError::InvalidParams(format!("{params:?}")));
        }
        if dims.contains(&0) {
            return Err(FusionError::InvalidParams(format!("zero-sized grid {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if n > MAX_VOXELS {
            return Err(FusionError::InvalidParams(format!("grid {dims:?} exceeds {MAX_VOXELS} voxels")));
        }
        Ok(Self {
            origin,
            voxel_size: params.voxel_size,
            dims,
            truncation: params.truncation,
            max_weight: params.max_weight,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
        })
    }

    /// Grid covering the axis-aligned box `[min, max]`.
    pub fn covering(min: Vector3<f64>, max: Vector3<f64>, params: TsdfParams) -> Result<Self, FusionError> {
        let ext = max - min;
        if !(ext.x > 0.0 && ext.y > 0.0 && ext.z > 0.0) {
            return Err(FusionError::InvalidParams(format!("empty bounds {min:?} .. {max:?}")));
        }
        let dims = [0, 1, 2].map(|a| (ext[a] / params.voxel_size).ceil() as usize + 1);
        Self::new(min, dims, params)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        self.origin + Vector3::new(x as f64, y as f64, z as f64) * self.voxel_size
    }

    pub fn observed_count(&self) -> usize {
        self.weight.iter().filter(|&&w| w > 0.0).count()
    }

    /// Projective TSDF update from one depth map. `pose` is camera-to-world;
    /// depth is looked up at the nearest pixel. Voxels farther than the
    /// truncation behind the observed surface are left untouched.
    pub fn integrate(&mut self, depth: &DenseImage, pose: &Pose, k: &Intrinsics) -> Result<(), FusionError> {
        if (depth.width(), depth.height()) != (k.width, k.height) {
            return Err(FusionError::Dimensions {
                want_w: k.width,
                want_h: k.height,
                got_w: depth.width(),
                got_h: depth.height(),
            });
        }
        let world_to_cam = pose.inverse();
        let r = world_to_cam.rotation_matrix();
        let t = world_to_cam.translation();
        let [dx, dy, _] = self.dims;
        let slice = dx * dy;
        let (origin, vs, trunc, max_w) = (self.origin, self.voxel_size, self.truncation, self.max_weight as f64);
        self.tsdf
            .par_chunks_mut(slice)
            .zip(self.weight.par_chunks_mut(slice))
            .enumerate()
            .for_each(|(z, (tsdf, weight))| {
                for y in 0..dy {
                    for x in 0..dx {
                        let p_w = origin + Vector3::new(x as f64, y as f64, z as f64) * vs;
                        let p_c = r * p_w + t;
                        if p_c.z <= 0.0 {
                            continue;
                        }
                        let u = (k.fx * p_c.x / p_c.z + k.cx).round();
                        let v = (k.fy * p_c.y / p_c.z + k.cy).round();
                        if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
                            continue;
                        }
                        let (u, v) = (u as usize, v as usize);
                        let d = depth.get(u, v);
                        if !DenseImage::is_valid_depth(d) || near_discontinuity(depth, u, v, d, trunc) {
                            continue;
                        }
                        let sdf = d as f64 - p_c.z;
                        if sdf < -trunc {
                            continue;
                        }
                        let obs = (sdf / trunc).min(1.0);
                        let i = y * dx + x;
                        let w = weight[i] as f64;
                        let fused = (tsdf[i] as f64 * w + obs) / (w + 1.0);
                        tsdf[i] = fused.clamp(-1.0, 1.0) as f32;
                        weight[i] = (w + 1.0).min(max_w) as f32;
                    }
                }
            });
        Ok(())
    }
}

/// True when a 3x3 neighbor of `(u, v)` is invalid or jumps by more than
/// `trunc` from `d`: the nearest pixel may belong to a surface the voxel's
/// ray actually misses.
fn near_discontinuity(depth: &DenseImage, u: usize, v: usize, d: f32, trunc: f64) -> bool {
    let (w, h) = (depth.width(), depth.height());
    for nv in v.saturating_sub(1)..=(v + 1).min(h - 1) {
        for nu in u.saturating_sub(1)..=(u + 1).min(w - 1) {
            let n = depth.get(nu, nv);
            if !DenseImage::is_valid_depth(n) || (n as f64 - d as f64).abs() > trunc {
                return true;
            }
        }
    }
    false
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    pub normals: Option<Vec<[f64; 3]>>,
}

impl TriangleMesh {
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| Vector3::from(self.vertices[i]));
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }
}

/// Median of all valid values across the images.
/// Fuses posed depth maps into a grid covering every observed point plus the
/// truncation band.
pub fn fuse_views(views: &[(&DenseImage, &Pose)], k: &Intrinsics, params: TsdfParams) -> Result<TsdfVolume, FusionError> {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for (depth, pose) in views {
        for v in 0..depth.height() {
            for u in 0..depth.width() {
                let d = depth.get(u, v);
                if !DenseImage::is_valid_depth(d) || u >= k.width || v >= k.height {
                    continue;
                }
                let p = pose.transform_point(&(k.ray(&crate::geometry::PixelCoord::new(u as f64, v as f64)) * d as f64));
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
    }
    if !lo.x.is_finite() {
        return Err(FusionError::NoValidDepth);
    }
    let margin = Vector3::repeat(params.truncation + params.voxel_size);
    let mut vol = TsdfVolume::covering(lo - margin, hi + margin, params)?;
    for (depth, pose) in views {
        vol.integrate(depth, pose, k)?;
    }
    Ok(vol)
}

pub fn median_depth(depths: &[DenseImage]) -> Result<f64, FusionError> {
    median_of(depths.iter().flat_map(|d| d.data().iter()).filter(|&&v| DenseImage::is_valid_depth(v)).map(|&v| v as f64))
}

/// Median of the positive finite values in `values` (mean of the two middle
/// values for even counts).
pub fn median_of(values: impl Iterator<Item = f64>) -> Result<f64, FusionError> {
    let mut v: Vec<f64> = values.filter(|x| *x > 0.0 && x.is_finite()).collect();
    if v.is_empty() {
        return Err(FusionError::NoValidDepth);
    }
    let n = v.len();
    let mid = n / 2;
    let (_, &mut upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        return Ok(upper);
    }
    let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(0.5 * (lower + upper))
}

/// Factor that maps a monocular reconstruction to metric-ish scale:
/// `training_median / median(valid depths)`.
pub fn monocular_scale(depths: &[DenseImage], training_median: f64) -> Result<f64, FusionError> {
    scale_from_median(median_depth(depths)?, training_median)
}

/// [`monocular_scale`] on raw depth values.
pub fn monocular_scale_values(values: &[f64], training_median: f64) -> Result<f64, FusionError> {
    scale_from_median(median_of(values.iter().copied())?, training_median)
}

fn scale_from_median(observed: f64, training_median: f64) -> Result<f64, FusionError> {
    if !(training_median > 0.0 && training_median.is_finite()) {
        return Err(FusionError::InvalidMedian(training_median));
    }
    if !(observed > 0.0 && observed.is_finite()) {
        return Err(FusionError::InvalidMedian(observed));
    }
    Ok(training_median / observed)
}
