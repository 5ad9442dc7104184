//! Pinhole camera model, rigid transforms, inter-frame warping and the
//! proximity depth parametrization.
//!
//! Pixel coordinates are continuous with integer values addressing pixel
//! centers. Poses are stored as a unit quaternion plus translation; matrices
//! are formed on demand.

use nalgebra::{Isometry3, Matrix2x3, Matrix3, Point3, Quaternion, Rotation3, Translation3, UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid depth {0}; depth must be positive")]
    InvalidDepth(f64),
    #[error("proximity {0} outside (0, 1]")]
    ProximityDomain(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
}

/// Rigid transform in SE(3).
///
/// Keyframe poses are camera-to-world: `pose.transform_point(p_cam)` yields
/// world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    iso: Isometry3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { iso: Isometry3::identity() }
    }

    /// Builds a pose from a translation and a `(w, x, y, z)` quaternion. The
    /// quaternion is normalized; a zero or non-finite quaternion is rejected.
    pub fn from_parts(translation: [f64; 3], quat_wxyz: [f64; 4]) -> Result<Self, GeometryError> {
        let [w, x, y, z] = quat_wxyz;
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(GeometryError::InvalidPose(format!("degenerate quaternion {quat_wxyz:?}")));
        }
        if translation.iter().any(|t| !t.is_finite()) {
            return Err(GeometryError::InvalidPose(format!("non-finite translation {translation:?}")));
        }
        // Already-unit quaternions are kept bit-exact so text round trips are stable.
        let rotation = if (n - 1.0).abs() < 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Ok(Self {
            iso: Isometry3::from_parts(Translation3::new(translation[0], translation[1], translation[2]), rotation),
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { iso: Isometry3::from_parts(Translation3::from(t), UnitQuaternion::identity()) }
    }

    /// Rotation from an axis-angle vector (radians) followed by a translation.
    pub fn from_axis_angle(rotvec: Vector3<f64>, t: Vector3<f64>) -> Self {
        Self {
            iso: Isometry3::from_parts(Translation3::from(t), UnitQuaternion::from_scaled_axis(rotvec)),
        }
    }

    /// Camera-to-world pose of a camera at `eye` looking at `target`, with
    /// image "down" (+y) roughly along `-up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rot = Matrix3::from_columns(&[x, y, z]);
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
        Self { iso: Isometry3::from_parts(Translation3::from(eye), q) }
    }

    pub fn from_isometry(iso: Isometry3<f64>) -> Self {
        Self { iso }
    }

    pub fn isometry(&self) -> &Isometry3<f64> {
        &self.iso
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.iso.translation.vector
    }

    /// Quaternion as `(w, x, y, z)`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.iso.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.iso.rotation.to_rotation_matrix().into_inner()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose { iso: self.iso * other.iso }
    }

    pub fn inverse(&self) -> Pose {
        Pose { iso: self.iso.inverse() }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (self.iso * Point3::from(*p)).coords
    }

    /// Relative transform taking points from camera `i` into camera `j`,
    /// given both camera-to-world poses.
    pub fn relative(pose_i: &Pose, pose_j: &Pose) -> Pose {
        pose_j.inverse().compose(pose_i)
    }

    /// Camera center in world coordinates (for a camera-to-world pose).
    pub fn center(&self) -> Vector3<f64> {
        self.translation()
    }

    /// Scales the translation, used by monocular scale alignment.
    pub fn with_scaled_translation(&self, s: f64) -> Pose {
        let mut iso = self.iso;
        iso.translation.vector *= s;
        Pose { iso }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &PixelCoord) -> f64 {
        ((self.u - other.u).powi(2) + (self.v - other.v).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// True when the continuous coordinate lies within the pixel-center
    /// rectangle `[0, w-1] x [0, h-1]` (the domain bilinear sampling supports).
    pub fn contains(&self, x: &PixelCoord) -> bool {
        x.u >= 0.0 && x.v >= 0.0 && x.u <= (self.width - 1) as f64 && x.v <= (self.height - 1) as f64
    }

    /// Unit-depth ray `(x', y', 1)` through a pixel.
    pub fn ray(&self, x: &PixelCoord) -> Vector3<f64> {
        Vector3::new((x.u - self.cx) / self.fx, (x.v - self.cy) / self.fy, 1.0)
    }

    /// Jacobian of the projection with respect to the camera-frame point.
    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }

    pub fn scaled(&self, factor: f64, width: usize, height: usize) -> Intrinsics {
        Intrinsics {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
            width,
            height,
        }
    }
}

pub fn project(point: &Vector3<f64>, k: &Intrinsics) -> Result<PixelCoord, GeometryError> {
    if !(point.z > 0.0) {
        return Err(GeometryError::BehindCamera(point.z));
    }
    Ok(PixelCoord::new(k.fx * point.x / point.z + k.cx, k.fy * point.y / point.z + k.cy))
}

pub fn unproject(x: &PixelCoord, depth: f64, k: &Intrinsics) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(GeometryError::InvalidDepth(depth));
    }
    Ok(k.ray(x) * depth)
}

/// Result of warping a pixel into another frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Warped {
    pub pixel: PixelCoord,
    /// Depth of the warped point in the target frame.
    pub depth: f64,
    /// The warped point in target-camera coordinates.
    pub point: Vector3<f64>,
}

/// Warps pixel `x` with depth `depth_i` in frame i into frame j, where
/// `t_ji` maps frame-i camera coordinates into frame-j camera coordinates.
///
/// Returns `BehindCamera` when the point lands behind camera j. The caller
/// decides whether the pixel is in bounds.
pub fn warp(x: &PixelCoord, depth_i: f64, t_ji: &Pose, k: &Intrinsics) -> Result<Warped, GeometryError> {
    let p_i = unproject(x, depth_i, k)?;
    let p_j = t_ji.transform_point(&p_i);
    let pixel = project(&p_j, k)?;
    Ok(Warped { pixel, depth: p_j.z, point: p_j })
}

/// Scale `a` of the proximity mapping `prox = a / (a + d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProximityParams {
    pub a: f64,
}

impl Default for ProximityParams {
    fn default() -> Self {
        Self { a: 2.0 }
    }
}

impl ProximityParams {
    pub fn new(a: f64) -> Result<Self, GeometryError> {
        if !(a > 0.0) || !a.is_finite() {
            return Err(GeometryError::InvalidDepth(a));
        }
        Ok(Self { a })
    }

    pub fn depth_to_proximity(&self, d: f64) -> Result<f64, GeometryError> {
        if !(d >= 0.0) {
            return Err(GeometryError::InvalidDepth(d));
        }
        Ok(self.a / (self.a + d))
    }

    pub fn proximity_to_depth(&self, p: f64) -> Result<f64, GeometryError> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(GeometryError::ProximityDomain(p));
        }
        Ok(self.a / p - self.a)
    }

    /// `d depth / d proximity` at proximity `p`.
    pub fn depth_derivative(&self, p: f64) -> f64 {
        -self.a / (p * p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 128.0, 96.0, 256, 192).unwrap()
    }

    #[test]
    fn project_principal_axis() {
        let x = project(&Vector3::new(0.0, 0.0, 2.0), &k()).unwrap();
        assert_eq!(x, PixelCoord::new(128.0, 96.0));
    }

    #[test]
    fn project_off_axis() {
        let x = project(&Vector3::new(1.0, 0.0, 2.0), &k()).unwrap();
        assert_eq!(x, PixelCoord::new(178.0, 96.0));
    }

    #[test]
    fn project_behind_camera_fails() {
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, -1.0), &k()),
            Err(GeometryError::BehindCamera(_))
        ));
    }

    #[test]
    fn unproject_examples() {
        let p = unproject(&PixelCoord::new(128.0, 96.0), 3.0, &k()).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 3.0));
        let p = unproject(&PixelCoord::new(178.0, 96.0), 2.0, &k()).unwrap();
        assert!((p - Vector3::new(1.0, 0.0, 2.0)).norm() < 1e-12);
        assert!(unproject(&PixelCoord::new(1.0, 1.0), 0.0, &k()).is_err());
        assert!(unproject(&PixelCoord::new(1.0, 1.0), -2.0, &k()).is_err());
    }

    #[test]
    fn warp_identity_and_forward_translation() {
        let x = PixelCoord::new(37.25, 101.5);
        let w = warp(&x, 1.7, &Pose::identity(), &k()).unwrap();
        assert!(w.pixel.distance(&x) < 1e-12);

        // Camera j sits 1 m further along +z of camera i: t_ji shifts points by -1.
        let t_ji = Pose::from_translation(Vector3::new(0.0, 0.0, -1.0));
        let w = warp(&PixelCoord::new(128.0, 96.0), 2.0, &t_ji, &k()).unwrap();
        assert_eq!(w.pixel, PixelCoord::new(128.0, 96.0));
        assert!((w.depth - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warp_behind_camera_signals() {
        let t_ji = Pose::from_translation(Vector3::new(0.0, 0.0, -5.0));
        assert!(warp(&PixelCoord::new(128.0, 96.0), 2.0, &t_ji, &k()).is_err());
    }

    #[test]
    fn proximity_examples() {
        let p = ProximityParams::new(2.0).unwrap();
        assert_eq!(p.depth_to_proximity(2.0).unwrap(), 0.5);
        assert_eq!(p.depth_to_proximity(0.0).unwrap(), 1.0);
        assert!(p.depth_to_proximity(1e12).unwrap() < 1e-11);
        assert!(p.proximity_to_depth(0.0).is_err());
        assert!(p.proximity_to_depth(1.5).is_err());
        assert!(p.depth_to_proximity(-1.0).is_err());
    }

    #[test]
    fn pose_parts_round_trip() {
        let p = Pose::from_parts([0.1, -0.2, 0.3], [0.9, 0.1, -0.3, 0.2]).unwrap();
        let q = p.quaternion_wxyz();
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(Pose::from_parts([0.0; 3], [0.0; 4]).is_err());
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-2.0f64..2.0),
            prop::array::uniform3(-1.5f64..1.5),
        )
            .prop_map(|(t, r)| Pose::from_axis_angle(Vector3::from(r), Vector3::from(t)))
    }

    proptest! {
        #[test]
        fn compose_with_inverse_is_identity(p in arb_pose()) {
            let id = p.compose(&p.inverse());
            let v = Vector3::new(0.3, -1.2, 2.5);
            prop_assert!((id.transform_point(&v) - v).norm() < 1e-9);
        }

        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let lhs = a.compose(&b).compose(&c);
            let rhs = a.compose(&b.compose(&c));
            let v = Vector3::new(-0.7, 0.4, 1.9);
            prop_assert!((lhs.transform_point(&v) - rhs.transform_point(&v)).norm() < 1e-9);
        }

        #[test]
        fn project_unproject_round_trip(u in 0.0f64..255.0, v in 0.0f64..191.0, d in 0.05f64..50.0) {
            let x = PixelCoord::new(u, v);
            let back = project(&unproject(&x, d, &k()).unwrap(), &k()).unwrap();
            prop_assert!(back.distance(&x) < 1e-9);
        }

        #[test]
        fn proximity_strictly_decreasing(d in 0.0f64..100.0, delta in 1e-6f64..10.0) {
            let p = ProximityParams::default();
            prop_assert!(p.depth_to_proximity(d + delta).unwrap() < p.depth_to_proximity(d).unwrap());
        }

        #[test]
        fn proximity_round_trip(d in 1e-6f64..100.0) {
            let p = ProximityParams::default();
            let back = p.proximity_to_depth(p.depth_to_proximity(d).unwrap()).unwrap();
            prop_assert!((back - d).abs() < 1e-9);
        }
    }
}
