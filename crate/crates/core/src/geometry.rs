//! Points, rigid transforms, the pinhole camera and the reprojection chain.
//!
//! A marking corner `X` in the map frame reaches the image through
//!
//! ```text
//! lambda * [u v 1]^T = K * T_cam_vehicle * T_map_vehicle^-1 * X
//! ```
//!
//! where `T_map_vehicle` is the vehicle pose (vehicle frame to map frame) and
//! `T_cam_vehicle` is the camera extrinsic, which carries vehicle-frame points
//! into the camera frame. Images are assumed to be rectified; no distortion
//! model is applied.

use nalgebra::{Matrix2x3, Matrix3, Rotation3, SMatrix, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// Points at or closer than this depth (meters) are treated as behind the camera.
pub const DEPTH_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth:.3e} m)")]
    BehindCamera { depth: f64 },
    #[error("rotation matrix is not orthonormal (error {error:.3e})")]
    NotOrthonormal { error: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Image coordinate in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }

    /// Inside `[0, width) x [0, height)`.
    pub fn in_image(&self, width: u32, height: u32) -> bool {
        self.u >= 0.0 && self.v >= 0.0 && self.u < width as f64 && self.v < height as f64
    }
}

/// Ground-plane coordinate in the vehicle frame (z = 0 implied).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundPoint {
    pub x: f64,
    pub y: f64,
}

impl GroundPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Map-frame coordinate in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MapPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl MapPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    /// A point on the ground plane.
    pub const fn ground(x: f64, y: f64) -> Self {
        Self { x, y, z: 0.0 }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn distance(&self, other: &MapPoint) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation from an axis-angle vector (SO(3) exponential map).
pub fn so3_exp(omega: &Vector3<f64>) -> Rotation3<f64> {
    Rotation3::new(*omega)
}

/// Axis-angle vector of a rotation (SO(3) logarithm).
///
/// Goes through the quaternion: the trace-based angle turns into NaN when
/// rounding pushes the trace of a near-identity matrix past 3.
pub fn so3_log(r: &Rotation3<f64>) -> Vector3<f64> {
    UnitQuaternion::from_rotation_matrix(r).scaled_axis()
}

/// Inverse of the left Jacobian of SO(3) at `phi`.
///
/// For the left increment `Exp(d) * R`, `log(Exp(d) * R) ~ phi + J_l^-1(phi) d`.
pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let w = skew(phi);
    if theta < 1e-8 {
        return Matrix3::identity() - 0.5 * w + w * w / 12.0;
    }
    let half = 0.5 * theta;
    let coef = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
    Matrix3::identity() - 0.5 * w + coef * w * w
}

/// Proper rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Builds from a raw 3x3 matrix, rejecting anything that is not a proper
    /// rotation to within 1e-9.
    pub fn from_matrix(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let error = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det_error = (rotation.determinant() - 1.0).abs();
        let worst = error.max(det_error);
        if worst > 1e-9 {
            return Err(GeometryError::NotOrthonormal { error: worst });
        }
        Ok(Self::new(Rotation3::from_matrix_unchecked(rotation), translation))
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self::new(q.to_rotation_matrix(), translation)
    }

    /// Pure translation.
    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Rotation3::identity(), Vector3::new(x, y, z))
    }

    /// Planar pose: position on the ground with heading `yaw` about +z.
    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        Self::new(
            Rotation3::from_axis_angle(&Vector3::z_axis(), yaw),
            Vector3::new(x, y, 0.0),
        )
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }

    pub fn transform_vector(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_point(&self, p: &MapPoint) -> MapPoint {
        MapPoint::from_vector(&self.transform_vector(&p.to_vector()))
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let r_inv = self.rotation.inverse();
        RigidTransform::new(r_inv, -(r_inv * self.translation))
    }

    /// Applies the left increment `(Exp(d_rot) R, t + d_trans)` used by the
    /// optimizer's local parameterization.
    pub fn retract(&self, delta: &SMatrix<f64, 6, 1>) -> RigidTransform {
        let d_rot = Vector3::new(delta[0], delta[1], delta[2]);
        let d_trans = Vector3::new(delta[3], delta[4], delta[5]);
        let mut rotation = so3_exp(&d_rot) * self.rotation;
        rotation.renormalize();
        RigidTransform::new(rotation, self.translation + d_trans)
    }

    /// 4x4 homogeneous matrix, row-major when read by rows.
    pub fn to_homogeneous(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

/// Pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub skew: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            skew: 0.0,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if ![self.cx, self.cy, self.skew].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(
                "non-finite principal point or skew".into(),
            ));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, self.skew, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// A calibrated camera mounted on the vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub id: String,
    pub intrinsics: Intrinsics,
    /// Maps vehicle-frame points into the camera frame.
    pub extrinsic: RigidTransform,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn new(
        id: impl Into<String>,
        intrinsics: Intrinsics,
        extrinsic: RigidTransform,
        width: u32,
        height: u32,
    ) -> Self {
        Self {
            id: id.into(),
            intrinsics,
            extrinsic,
            width,
            height,
        }
    }

    /// Camera optical center in the vehicle frame.
    pub fn center_in_vehicle(&self) -> Vector3<f64> {
        self.extrinsic.inverse().translation
    }

    /// Rotation of a level camera with optical axis along vehicle +x and
    /// image y pointing down, yawed by `yaw` about the vehicle z axis.
    /// (Vehicle frame: x forward, y left, z up.)
    pub fn level_rotation(yaw: f64) -> Rotation3<f64> {
        let base = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let base = Rotation3::from_matrix_unchecked(base);
        base * Rotation3::from_axis_angle(&Vector3::z_axis(), -yaw)
    }

    /// Extrinsic of a camera at `position` (vehicle frame) with heading `yaw`
    /// and pitched down by `pitch` radians.
    pub fn mounted(position: Vector3<f64>, yaw: f64, pitch: f64) -> RigidTransform {
        // Pitching down rotates about the camera x axis.
        let tilt = Rotation3::from_axis_angle(&Vector3::x_axis(), pitch);
        let rotation = tilt * Self::level_rotation(yaw);
        RigidTransform::new(rotation, -(rotation * position))
    }
}

/// Vehicle-frame point to camera-frame point.
fn camera_frame_point(corner: &MapPoint, pose: &RigidTransform, camera: &CameraModel) -> (Vector3<f64>, Vector3<f64>) {
    let vehicle = pose.inverse().transform_vector(&corner.to_vector());
    let cam = camera.extrinsic.transform_vector(&vehicle);
    (vehicle, cam)
}

fn pixel_from_camera(k: &Intrinsics, p: &Vector3<f64>) -> PixelPoint {
    let x = p.x / p.z;
    let y = p.y / p.z;
    PixelPoint::new(k.fx * x + k.skew * y + k.cx, k.fy * y + k.cy)
}

/// Projects a map-frame point into the image seen from `pose`.
pub fn project(corner: &MapPoint, pose: &RigidTransform, camera: &CameraModel) -> Result<PixelPoint, GeometryError> {
    let (_, cam) = camera_frame_point(corner, pose, camera);
    if cam.z <= DEPTH_EPSILON {
        return Err(GeometryError::BehindCamera { depth: cam.z });
    }
    Ok(pixel_from_camera(&camera.intrinsics, &cam))
}

/// Derivatives of [`project`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionJacobian {
    pub pixel: PixelPoint,
    /// d(u, v) / d(x_w, y_w, z_w).
    pub d_corner: Matrix2x3<f64>,
    /// d(u, v) / d(rotation increment, translation increment) of the extrinsic.
    pub d_extrinsic: SMatrix<f64, 2, 6>,
}

/// Analytic Jacobians of the projection with respect to the map point and
/// the extrinsic's left increment (see [`RigidTransform::retract`]).
pub fn project_jacobian(
    corner: &MapPoint,
    pose: &RigidTransform,
    camera: &CameraModel,
) -> Result<ProjectionJacobian, GeometryError> {
    let (vehicle, cam) = camera_frame_point(corner, pose, camera);
    if cam.z <= DEPTH_EPSILON {
        return Err(GeometryError::BehindCamera { depth: cam.z });
    }
    let k = &camera.intrinsics;
    let inv_z = 1.0 / cam.z;
    let inv_z2 = inv_z * inv_z;
    let d_pixel_d_cam = Matrix2x3::new(
        k.fx * inv_z,
        k.skew * inv_z,
        -(k.fx * cam.x + k.skew * cam.y) * inv_z2,
        0.0,
        k.fy * inv_z,
        -k.fy * cam.y * inv_z2,
    );

    let r_cam = camera.extrinsic.rotation.matrix();
    let r_pose_t = pose.rotation.matrix().transpose();
    let d_corner = d_pixel_d_cam * (r_cam * r_pose_t);

    let rotated = r_cam * vehicle;
    let mut d_extrinsic = SMatrix::<f64, 2, 6>::zeros();
    d_extrinsic
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(d_pixel_d_cam * -skew(&rotated)));
    d_extrinsic.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_pixel_d_cam);

    Ok(ProjectionJacobian {
        pixel: pixel_from_camera(k, &cam),
        d_corner,
        d_extrinsic,
    })
}
