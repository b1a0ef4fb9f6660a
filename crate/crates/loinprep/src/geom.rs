//! Shared rigid-body geometry: poses, planes, and pinhole camera math.
//!
//! Conventions: right-handed world frame with z up, the cutting board at
//! z = 0 unless configured otherwise, and all lengths in meters. Rotations are
//! stored as 3×3 matrices because the cutting planner manipulates rotation
//! columns directly; quaternions are deliberately not part of the API.

use nalgebra::{Matrix3, Vector3};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Maximum tolerated orthonormality drift `‖RᵀR − I‖∞` before a rotation is
/// re-projected onto SO(3).
pub const ROTATION_DRIFT_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    /// A matrix supplied as a rotation is too far from SO(3) to trust
    /// (wrong handedness or badly non-orthonormal).
    #[error("matrix is not a proper rotation (det = {det:.6}, drift = {drift:.3e})")]
    NotARotation { det: f64, drift: f64 },
    /// A direction that must be normalizable was (near) zero.
    #[error("degenerate direction vector (norm = {norm:.3e})")]
    DegenerateDirection { norm: f64 },
    /// Camera focal lengths must be positive.
    #[error("invalid camera intrinsics (fx = {fx}, fy = {fy})")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    /// Projection/deprojection requires a point strictly in front of the camera.
    #[error("non-positive depth {z}")]
    NonPositiveDepth { z: f64 },
}

/// Rigid transform in SE(3): `x_world = R · x_local + t`.
///
/// Serialized as a 12-number row-major JSON array (9 rotation entries followed
/// by the 3 translation entries).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    /// Identity transform.
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from a rotation matrix and translation, re-orthonormalizing
    /// the rotation if it has drifted. Fails if the matrix is not close to a
    /// proper rotation (e.g. a reflection).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeomError> {
        let det = rotation.determinant();
        let drift = orthonormality_drift(&rotation);
        if det < 0.5 || drift > 1e-3 {
            return Err(GeomError::NotARotation { det, drift });
        }
        let rotation = if drift > ROTATION_DRIFT_TOL {
            polar_orthonormalize(&rotation)
        } else {
            rotation
        };
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// Pure translation.
    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation by `angle` (radians) about a (not necessarily unit) axis,
    /// with zero translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Result<Self, GeomError> {
        let norm = axis.norm();
        if norm < 1e-12 {
            return Err(GeomError::DegenerateDirection { norm });
        }
        Ok(Pose {
            rotation: rotation_about(axis / norm, angle),
            translation: Vector3::zeros(),
        })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Applies `other` first, then `self`
    /// (`result.apply(x) == self.apply(other.apply(x))`). The rotation is
    /// re-orthonormalized whenever accumulated drift exceeds
    /// [`ROTATION_DRIFT_TOL`].
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = self.rotation * other.rotation;
        if orthonormality_drift(&rotation) > ROTATION_DRIFT_TOL {
            rotation = polar_orthonormalize(&rotation);
        }
        Pose {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Inverse transform.
    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Transforms a point.
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Rotates a free vector (direction); ignores translation.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Row-major 12-number form: 9 rotation entries then the translation.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    /// Inverse of [`Pose::to_array`]; validates the rotation block.
    pub fn from_array(a: &[f64; 12]) -> Result<Self, GeomError> {
        let rotation = Matrix3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]);
        Pose::new(rotation, Vector3::new(a[9], a[10], a[11]))
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let a = <[f64; 12]>::deserialize(deserializer)?;
        Pose::from_array(&a).map_err(D::Error::custom)
    }
}

/// `‖RᵀR − I‖∞` (max absolute entry).
fn orthonormality_drift(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    gram.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Nearest rotation in the Frobenius sense via polar decomposition (SVD with a
/// handedness fix).
fn polar_orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let vt = svd.v_t.expect("svd requested v_t");
    let mut rot = u * vt;
    if rot.determinant() < 0.0 {
        // Flip the singular direction with the smallest singular value (last
        // column of u in nalgebra's ordering) to restore det = +1.
        let mut u = u;
        u.set_column(2, &(-u.column(2)));
        rot = u * vt;
    }
    rot
}

/// Rodrigues rotation about a unit axis.
fn rotation_about(unit_axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    let k = skew(&unit_axis);
    Matrix3::identity() + k * s + k * k * (1.0 - c)
}

/// Cross-product matrix `[v]×`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Oriented plane through `origin` with unit `normal`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Plane {
    pub origin: Vector3<f64>,
    normal: Vector3<f64>,
}

impl Plane {
    /// Builds a plane, normalizing `normal`; rejects near-zero normals.
    pub fn new(origin: Vector3<f64>, normal: Vector3<f64>) -> Result<Self, GeomError> {
        let norm = normal.norm();
        if norm < 1e-12 {
            return Err(GeomError::DegenerateDirection { norm });
        }
        Ok(Plane {
            origin,
            normal: normal / norm,
        })
    }

    /// Horizontal plane z = `height` with +z normal (the cutting board).
    pub fn horizontal(height: f64) -> Self {
        Plane {
            origin: Vector3::new(0.0, 0.0, height),
            normal: Vector3::z(),
        }
    }

    pub fn normal(&self) -> &Vector3<f64> {
        &self.normal
    }

    /// `n̂ᵀ(x − origin)`; negative values are on the penetrating side.
    pub fn signed_distance(&self, x: &Vector3<f64>) -> f64 {
        self.normal.dot(&(x - self.origin))
    }
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeomError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeomError::InvalidIntrinsics { fx, fy });
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }

    /// Lifts pixel `(u, v)` at depth `z` into the camera frame:
    /// `((u−cx)·z/fx, (v−cy)·z/fy, z)`. Rejects `z ≤ 0`.
    pub fn deproject(&self, u: f64, v: f64, z: f64) -> Result<Vector3<f64>, GeomError> {
        if z <= 0.0 {
            return Err(GeomError::NonPositiveDepth { z });
        }
        Ok(Vector3::new(
            (u - self.cx) * z / self.fx,
            (v - self.cy) * z / self.fy,
            z,
        ))
    }

    /// Projects a camera-frame point to pixels. Rejects points not strictly in
    /// front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Result<(f64, f64), GeomError> {
        if p.z <= 0.0 {
            return Err(GeomError::NonPositiveDepth { z: p.z });
        }
        Ok((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn arb_unit_vector() -> impl Strategy<Value = Vector3<f64>> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter_map("non-degenerate axis", |(x, y, z)| {
                let v = Vector3::new(x, y, z);
                (v.norm() > 1e-3).then(|| v / v.norm())
            })
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            arb_unit_vector(),
            -std::f64::consts::PI..std::f64::consts::PI,
            (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0),
        )
            .prop_map(|(axis, angle, (tx, ty, tz))| {
                let mut p = Pose::from_axis_angle(axis, angle).unwrap();
                p.translation = Vector3::new(tx, ty, tz);
                p
            })
    }

    #[test]
    fn compose_identity_is_neutral() {
        let t = Pose::from_axis_angle(Vector3::z(), 0.7)
            .unwrap()
            .compose(&Pose::from_translation(Vector3::new(0.1, -0.2, 0.3)));
        let left = Pose::identity().compose(&t);
        let right = t.compose(&Pose::identity());
        assert_relative_eq!(left.rotation, t.rotation, epsilon = 1e-15);
        assert_relative_eq!(left.translation, t.translation, epsilon = 1e-15);
        assert_relative_eq!(right.rotation, t.rotation, epsilon = 1e-15);
        assert_relative_eq!(right.translation, t.translation, epsilon = 1e-15);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let t = Pose::from_axis_angle(Vector3::new(1.0, 2.0, -0.5), 1.1)
            .unwrap()
            .compose(&Pose::from_translation(Vector3::new(0.4, 0.0, -0.7)));
        let e = t.compose(&t.inverse());
        assert_relative_eq!(e.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert!(e.translation.norm() < 1e-12);
    }

    #[test]
    fn translations_commute() {
        let a = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let b = Pose::from_translation(Vector3::new(0.0, 2.0, 0.0));
        let ab = a.compose(&b);
        assert_eq!(ab.translation, Vector3::new(1.0, 2.0, 0.0));
        assert_eq!(ab.rotation, Matrix3::identity());
    }

    #[test]
    fn signed_distance_examples() {
        let p = Plane::horizontal(0.0);
        assert_eq!(p.signed_distance(&p.origin), 0.0);
        assert_relative_eq!(
            p.signed_distance(&Vector3::new(0.3, -4.0, 0.01)),
            0.01,
            epsilon = 1e-15
        );

        let half = 0.5f64.sqrt();
        let tilted = Plane::new(Vector3::zeros(), Vector3::new(0.0, half, half)).unwrap();
        assert_relative_eq!(
            tilted.signed_distance(&Vector3::new(0.0, 0.0, 0.1)),
            0.1 * half,
            epsilon = 1e-12
        );
    }

    #[test]
    fn deproject_examples() {
        let k = CameraIntrinsics::new(100.0, 100.0, 160.0, 120.0).unwrap();
        assert_relative_eq!(
            k.deproject(160.0, 120.0, 1.0).unwrap(),
            Vector3::new(0.0, 0.0, 1.0)
        );
        assert_relative_eq!(
            k.deproject(260.0, 120.0, 0.5).unwrap(),
            Vector3::new(0.5, 0.0, 0.5)
        );
        assert_relative_eq!(
            k.deproject(160.0, 70.0, 2.0).unwrap(),
            Vector3::new(0.0, -1.0, 2.0)
        );
        assert_eq!(
            k.deproject(0.0, 0.0, 0.0),
            Err(GeomError::NonPositiveDepth { z: 0.0 })
        );
        assert!(k.deproject(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(Plane::new(Vector3::zeros(), Vector3::zeros()).is_err());
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(reflection, Vector3::zeros()).is_err());
    }

    #[test]
    fn pose_json_is_twelve_numbers_row_major() {
        let t = Pose::from_axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2)
            .unwrap()
            .compose(&Pose::from_translation(Vector3::new(1.0, 2.0, 3.0)));
        let json = serde_json::to_string(&t).unwrap();
        let nums: Vec<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(nums.len(), 12);
        // Row-major: entry [0][1] of a +90° z-rotation is −1.
        assert_relative_eq!(nums[1], -1.0, epsilon = 1e-12);
        let back: Pose = serde_json::from_str(&json).unwrap();
        assert_relative_eq!(back.rotation, t.rotation, epsilon = 1e-12);
        assert_relative_eq!(back.translation, t.translation, epsilon = 1e-12);
    }

    #[test]
    fn drifted_rotation_is_reorthonormalized() {
        let mut r = rotation_about(Vector3::z(), 0.3);
        r[(0, 0)] += 5e-7; // beyond the drift tolerance, within repair range
        let p = Pose::new(r, Vector3::zeros()).unwrap();
        assert!(orthonormality_drift(p.rotation()) < 1e-12);
    }

    proptest! {
        #[test]
        fn apply_inverse_roundtrip(t in arb_pose(), x in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)) {
            let x = Vector3::new(x.0, x.1, x.2);
            let back = t.inverse().apply(&t.apply(&x));
            prop_assert!((back - x).norm() < 1e-10);
        }

        #[test]
        fn signed_distance_linear_along_normal(
            origin in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
            n in arb_unit_vector(),
            x in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
            step in -0.5f64..0.5,
        ) {
            let plane = Plane::new(Vector3::new(origin.0, origin.1, origin.2), n).unwrap();
            let x = Vector3::new(x.0, x.1, x.2);
            let d0 = plane.signed_distance(&x);
            let d1 = plane.signed_distance(&(x + plane.normal() * step));
            prop_assert!((d1 - (d0 + step)).abs() < 1e-12);
        }

        #[test]
        fn deproject_project_roundtrip(
            u in 0.0f64..640.0,
            v in 0.0f64..480.0,
            z in 0.05f64..5.0,
        ) {
            let k = CameraIntrinsics::new(525.0, 512.0, 319.5, 239.5).unwrap();
            let p = k.deproject(u, v, z).unwrap();
            let (u2, v2) = k.project(&p).unwrap();
            prop_assert!((u2 - u).abs() < 1e-9 && (v2 - v).abs() < 1e-9);
        }

        #[test]
        fn long_compose_chain_stays_orthonormal(poses in proptest::collection::vec(arb_pose(), 1..60)) {
            let total = poses.iter().fold(Pose::identity(), |acc, p| acc.compose(p));
            prop_assert!(orthonormality_drift(total.rotation()) <= 1e-9 * 4.0);
        }
    }
}
