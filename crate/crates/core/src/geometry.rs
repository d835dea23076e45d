//! SE(3) pose algebra, the pinhole camera model, and the pose-error metric
//! used by the blocking controller.
//!
//! Conventions, stated once and used everywhere:
//! - World and robot-base frames are right-handed, z up, units in meters.
//! - Camera frame is right-handed with +z forward, +x right, +y down.
//!   The stored extrinsic is world-from-camera (the camera's pose in the
//!   world); camera-from-world is derived.
//! - Quaternions are stored (w, x, y, z) and kept unit-norm.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A rigid SE(3) transform: rotation followed by translation.
///
/// `T.transform_point(p) = R p + t`. Composition `a.compose(b)` applies `b`
/// first, so `compose` chains like matrix multiplication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn new(translation: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Self {
            translation,
            rotation: renormalize(rotation),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Vector3::new(x, y, z), UnitQuaternion::identity())
    }

    /// From quaternion components in (w, x, y, z) order.
    pub fn from_parts(t: [f64; 3], q_wxyz: [f64; 4]) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(
            q_wxyz[0], q_wxyz[1], q_wxyz[2], q_wxyz[3],
        ));
        Self::new(Vector3::new(t[0], t[1], t[2]), q)
    }

    /// Rotation about `axis` by `angle` radians, zero translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let q = UnitQuaternion::from_scaled_axis(axis.normalize() * angle);
        Self::new(Vector3::zeros(), q)
    }

    /// Quaternion components in (w, x, y, z) order.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            translation: self.rotation * other.translation + self.translation,
            rotation: renormalize(self.rotation * other.rotation),
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rot_inv = self.rotation.inverse();
        RigidTransform {
            translation: -(rot_inv * self.translation),
            rotation: rot_inv,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(*q.quaternion())
}

/// Converts pose `p` by transform `t`: returns `t ∘ p`.
pub fn transform_pose(t: &RigidTransform, p: &RigidTransform) -> RigidTransform {
    t.compose(p)
}

/// Euclidean norm of the concatenated (position difference in meters,
/// quaternion component difference). The quaternion difference takes the
/// sign minimizing the component distance, so `q` and `-q` compare equal.
/// Zero iff the two poses are the same.
pub fn pose_error_norm(a: &RigidTransform, b: &RigidTransform) -> f64 {
    let dt = a.translation - b.translation;
    let qa = a.rotation.quaternion();
    let qb = b.rotation.quaternion();
    let d_minus = (qa.coords - qb.coords).norm_squared();
    let d_plus = (qa.coords + qb.coords).norm_squared();
    (dt.norm_squared() + d_minus.min(d_plus)).sqrt()
}

/// Position and rotation residuals between two poses, reported separately:
/// meters and radians (angle of the relative rotation).
pub fn pose_residuals(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
    let dp = (a.translation - b.translation).norm();
    let dq = a.rotation.rotation_to(&b.rotation).angle();
    (dp, dq)
}

/// Parses a pose file record: `tx ty tz qw qx qy qz [gripper_width]`,
/// whitespace or comma separated. The eighth number defaults to 0 when
/// absent (camera extrinsics carry no gripper).
pub fn parse_pose_record(s: &str) -> Result<(RigidTransform, f64)> {
    let nums: Vec<f64> = s
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad number `{t}` in pose record")))
        })
        .collect::<Result<_>>()?;
    if nums.len() != 7 && nums.len() != 8 {
        return Err(Error::Parse(format!(
            "pose record needs 7 or 8 numbers, got {}",
            nums.len()
        )));
    }
    let q_norm = (nums[3] * nums[3] + nums[4] * nums[4] + nums[5] * nums[5] + nums[6] * nums[6])
        .sqrt();
    if q_norm < 1e-6 {
        return Err(Error::Parse("pose record quaternion has zero norm".into()));
    }
    let pose = RigidTransform::from_parts(
        [nums[0], nums[1], nums[2]],
        [nums[3], nums[4], nums[5], nums[6]],
    );
    Ok((pose, nums.get(7).copied().unwrap_or(0.0)))
}

/// Formats a pose record; inverse of [`parse_pose_record`]. Floats are
/// printed in shortest round-trip form.
pub fn format_pose_record(t: &RigidTransform, gripper_width: f64) -> String {
    let q = t.quaternion_wxyz();
    format!(
        "{} {} {} {} {} {} {} {}",
        t.translation.x, t.translation.y, t.translation.z, q[0], q[1], q[2], q[3], gripper_width
    )
}

/// A projected point: pixel coordinates plus depth along the camera +z axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelDepth {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Pinhole camera. Integer pixel (u, v) samples the continuous image plane
/// at exactly (u, v); no half-pixel offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// World-from-camera: the camera's pose in the world frame.
    pub world_from_camera: RigidTransform,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        world_from_camera: RigidTransform,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_from_camera,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64)
            || !(0.0 <= self.cy && self.cy < self.height as f64)
        {
            return Err(Error::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera placed at `eye` looking toward `target`, `up` approximating
    /// the world up direction. Follows the +z forward / +y down convention.
    pub fn look_at(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let z_c = (target - eye).normalize();
        let x_c = z_c.cross(&up).normalize();
        let y_c = z_c.cross(&x_c);
        let rot = Matrix3::from_columns(&[x_c, y_c, z_c]);
        let q = UnitQuaternion::from_matrix(&rot);
        Self::new(fx, fy, cx, cy, width, height, RigidTransform::new(eye, q))
    }

    pub fn camera_from_world(&self) -> RigidTransform {
        self.world_from_camera.inverse()
    }

    /// Projects a world point. Returns `None` when the point is at or behind
    /// the camera plane (z <= 0 in the camera frame).
    pub fn project_point(&self, p_world: &Vector3<f64>) -> Option<PixelDepth> {
        let pc = self.camera_from_world().transform_point(p_world);
        if pc.z <= 0.0 {
            return None;
        }
        Some(PixelDepth {
            u: self.fx * pc.x / pc.z + self.cx,
            v: self.fy * pc.y / pc.z + self.cy,
            depth: pc.z,
        })
    }

    /// Inverse of [`project_point`](Self::project_point): pixel plus depth
    /// back to a world point. Depth must be finite and positive.
    pub fn backproject_pixel(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(Error::InvalidDepth(depth));
        }
        let pc = Vector3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        );
        Ok(self.world_from_camera.transform_point(&pc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Independent oracle: a pose as a plain 4x4 homogeneous matrix, composed
    /// with hand-rolled matrix multiplication (no nalgebra transform types).
    fn to_mat4(t: &RigidTransform) -> [[f64; 4]; 4] {
        let q = t.quaternion_wxyz();
        let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
        // Standard quaternion-to-rotation-matrix formula.
        let r = [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ];
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[i][j];
            }
            m[i][3] = t.translation[i];
        }
        m[3][3] = 1.0;
        m
    }

    fn mat4_mul(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                for (k, bk) in b.iter().enumerate() {
                    out[i][j] += a[i][k] * bk[j];
                }
            }
        }
        out
    }

    fn mat4_close(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4], tol: f64) -> bool {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .all(|(x, y)| (x - y).abs() < tol)
    }

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (
            prop::array::uniform3(-5.0f64..5.0),
            prop::array::uniform4(-1.0f64..1.0).prop_filter("nonzero quaternion", |q| {
                q.iter().map(|c| c * c).sum::<f64>() > 1e-3
            }),
        )
            .prop_map(|(t, q)| RigidTransform::from_parts(t, q))
    }

    #[test]
    fn identity_transform_is_noop() {
        let p = RigidTransform::from_parts([0.3, -0.2, 1.1], [0.9, 0.1, -0.3, 0.2]);
        let out = transform_pose(&RigidTransform::identity(), &p);
        assert_relative_eq!(out.translation, p.translation, epsilon = 1e-15);
        assert!(pose_error_norm(&out, &p) < 1e-12);
    }

    #[test]
    fn pure_translation_moves_origin() {
        let t = RigidTransform::from_translation(1.0, 0.0, 0.0);
        let p = RigidTransform::identity();
        let out = transform_pose(&t, &p);
        assert_relative_eq!(out.translation, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn pose_error_examples() {
        let a = RigidTransform::from_parts([0.1, 0.2, 0.3], [0.7, 0.1, 0.5, -0.2]);
        assert_eq!(pose_error_norm(&a, &a), 0.0);

        let b = RigidTransform::new(
            a.translation + Vector3::new(0.009, 0.012, 0.0),
            a.rotation,
        );
        assert_relative_eq!(pose_error_norm(&a, &b), 0.015, epsilon = 1e-12);

        // Double cover: q and -q describe the same rotation.
        let q = a.quaternion_wxyz();
        let neg = RigidTransform::from_parts(
            [a.translation.x, a.translation.y, a.translation.z],
            [-q[0], -q[1], -q[2], -q[3]],
        );
        assert!(pose_error_norm(&a, &neg) < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let cam = CameraModel::new(
            100.0,
            100.0,
            42.0,
            42.0,
            84,
            84,
            RigidTransform::identity(),
        )
        .unwrap();
        // Optical axis point at depth d.
        let hit = cam.project_point(&Vector3::new(0.0, 0.0, 2.5)).unwrap();
        assert_relative_eq!(hit.u, 42.0, epsilon = 1e-12);
        assert_relative_eq!(hit.v, 42.0, epsilon = 1e-12);
        assert_relative_eq!(hit.depth, 2.5, epsilon = 1e-12);

        let hit = cam.project_point(&Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert_relative_eq!(hit.u, 52.0, epsilon = 1e-12);
        assert_relative_eq!(hit.v, 42.0, epsilon = 1e-12);

        assert!(cam.project_point(&Vector3::new(0.0, 0.0, -1.0)).is_none());
        assert!(cam.backproject_pixel(42.0, 42.0, 0.0).is_err());
        assert!(cam.backproject_pixel(42.0, 42.0, f64::NAN).is_err());

        let p = cam.backproject_pixel(42.0, 42.0, 3.0).unwrap();
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 3.0), epsilon = 1e-12);
    }

    #[test]
    fn camera_validation_rejects_bad_intrinsics() {
        assert!(CameraModel::new(0.0, 1.0, 0.0, 0.0, 10, 10, RigidTransform::identity()).is_err());
        assert!(
            CameraModel::new(10.0, 10.0, 12.0, 0.0, 10, 10, RigidTransform::identity()).is_err()
        );
    }

    #[test]
    fn projection_round_trip_posed_camera() {
        let cam = CameraModel::look_at(
            120.0,
            130.0,
            40.0,
            44.0,
            84,
            84,
            Vector3::new(0.4, -0.7, 0.5),
            Vector3::new(0.3, 0.0, 0.1),
            Vector3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        let mut rng_state = 0x1234_5678_u64;
        let mut next = move || {
            // xorshift, deterministic across platforms
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut max_err: f64 = 0.0;
        for _ in 0..1000 {
            let p = Vector3::new(next() - 0.5, next() - 0.5, next() * 0.8);
            if let Some(hit) = cam.project_point(&p) {
                let back = cam.backproject_pixel(hit.u, hit.v, hit.depth).unwrap();
                max_err = max_err.max((back - p).norm());
            }
        }
        assert!(max_err < 1e-6, "round-trip error {max_err}");
    }

    proptest! {
        #[test]
        fn compose_matches_matrix_oracle(a in arb_transform(), b in arb_transform()) {
            let c = a.compose(&b);
            let oracle = mat4_mul(&to_mat4(&a), &to_mat4(&b));
            prop_assert!(mat4_close(&to_mat4(&c), &oracle, 1e-9));
        }

        #[test]
        fn compose_associative(a in arb_transform(), b in arb_transform(), c in arb_transform()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!(pose_error_norm(&left, &right) < 1e-9);
        }

        #[test]
        fn inverse_round_trip(t in arb_transform(), p in arb_transform()) {
            let back = transform_pose(&t.inverse(), &transform_pose(&t, &p));
            prop_assert!((back.translation - p.translation).norm() < 1e-9);
            prop_assert!(pose_error_norm(&back, &p) < 1e-9);
            let id = t.compose(&t.inverse());
            prop_assert!(pose_error_norm(&id, &RigidTransform::identity()) < 1e-9);
            prop_assert!((t.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn pose_error_symmetric_and_sign_invariant(a in arb_transform(), b in arb_transform()) {
            let e = pose_error_norm(&a, &b);
            prop_assert!(e >= 0.0);
            prop_assert!((e - pose_error_norm(&b, &a)).abs() < 1e-12);
            let qa = a.quaternion_wxyz();
            let flipped = RigidTransform::from_parts(
                [a.translation.x, a.translation.y, a.translation.z],
                [-qa[0], -qa[1], -qa[2], -qa[3]],
            );
            prop_assert!((e - pose_error_norm(&flipped, &b)).abs() < 1e-9);
        }

        #[test]
        fn projection_round_trip_depth_range(
            x in -2.0f64..2.0,
            y in -2.0f64..2.0,
            z in 0.01f64..100.0,
        ) {
            let cam = CameraModel::new(
                150.0, 140.0, 41.0, 43.0, 84, 84, RigidTransform::identity(),
            ).unwrap();
            let p = Vector3::new(x, y, z);
            let hit = cam.project_point(&p).unwrap();
            let back = cam.backproject_pixel(hit.u, hit.v, hit.depth).unwrap();
            prop_assert!((back - p).norm() < 1e-6);
        }
    }
}
