//! Quaternion, rotation-matrix and rigid-transform algebra.
//!
//! Quaternions are scalar-first `(w, x, y, z)` and always stored unit-norm in
//! the canonical hemisphere (`w >= 0`). When `w == 0` the first non-zero
//! vector component is made positive so every rotation has one representative.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Input tolerance for "unit" quaternions and "orthonormal" matrices.
pub const INPUT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes arbitrary non-zero components into a canonical unit quaternion.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::InvalidQuaternion { norm });
        }
        Ok(Self::canonical(w / norm, x / norm, y / norm, z / norm))
    }

    /// Accepts components only if they are already unit within 1e-6.
    pub fn from_unit(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > INPUT_TOLERANCE {
            return Err(Error::InvalidQuaternion { norm });
        }
        Ok(Self::canonical(w / norm, x / norm, y / norm, z / norm))
    }

    pub fn from_array(q: [f64; 4]) -> Result<Self> {
        Self::from_unit(q[0], q[1], q[2], q[3])
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Self {
        let flip = if w != 0.0 {
            w < 0.0
        } else if x != 0.0 {
            x < 0.0
        } else if y != 0.0 {
            y < 0.0
        } else {
            z < 0.0
        };
        if flip {
            Quaternion {
                w: -w,
                x: -x,
                y: -y,
                z: -z,
            }
        } else {
            Quaternion { w, x, y, z }
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn conjugate(self) -> Self {
        Self::canonical(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * rhs`, renormalized and canonicalized.
    pub fn mul(self, rhs: Quaternion) -> Self {
        let (a, b) = (self, rhs);
        let w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z;
        let x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y;
        let y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x;
        let z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self::canonical(w / n, x / n, y / n, z / n)
    }

    /// Rotation of `angle` radians about `axis` (need not be unit).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n < 1e-300 || angle == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (angle / 2.0).sin_cos();
        let a = axis / n;
        Self::canonical(c, a.x * s, a.y * s, a.z * s)
    }

    /// Rotation vector `angle * axis` from a rotation vector.
    pub fn from_rotation_vector(v: &Vec3) -> Self {
        Self::from_axis_angle(v, v.norm())
    }

    /// Rotation vector (axis scaled by angle in `[0, pi]`).
    pub fn to_rotation_vector(self) -> Vec3 {
        let v = Vec3::new(self.x, self.y, self.z);
        let s = v.norm();
        if s < 1e-300 {
            return Vec3::zeros();
        }
        // atan2 keeps precision near both 0 and pi.
        let angle = 2.0 * s.atan2(self.w);
        v * (angle / s)
    }

    pub fn to_matrix(self) -> Mat3 {
        let Quaternion { w, x, y, z } = self;
        Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Shepperd's method: branch on the largest diagonal term for stability.
    pub fn from_matrix(m: &Mat3) -> Result<Self> {
        check_rotation(m, INPUT_TOLERANCE)?;
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (w, x, y, z);
        if trace > m[(0, 0)] && trace > m[(1, 1)] && trace > m[(2, 2)] {
            let s = (1.0 + trace).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = 0.25 * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = 0.25 * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = 0.25 * s;
        }
        Quaternion::new(w, x, y, z)
    }

    /// Angle of the relative rotation between two orientations, in `[0, pi]`.
    pub fn angle_to(self, other: Quaternion) -> f64 {
        let dot = (self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z)
            .abs()
            .min(1.0);
        2.0 * dot.acos()
    }
}

/// Rotation matrix of a unit quaternion given as `[w, x, y, z]`.
pub fn quat_to_matrix(q: [f64; 4]) -> Result<Mat3> {
    Ok(Quaternion::from_array(q)?.to_matrix())
}

pub fn matrix_to_quat(m: &Mat3) -> Result<Quaternion> {
    Quaternion::from_matrix(m)
}

/// Errors unless `m` is orthonormal with determinant +1 within `tol`.
pub fn check_rotation(m: &Mat3, tol: f64) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidRotation("non-finite entry".into()));
    }
    let err = (m.transpose() * m - Mat3::identity()).amax();
    if err > tol {
        return Err(Error::InvalidRotation(format!(
            "not orthonormal (max |R^T R - I| = {err:e})"
        )));
    }
    let det = m.determinant();
    if (det - 1.0).abs() > tol {
        return Err(Error::InvalidRotation(format!("determinant {det} != 1")));
    }
    Ok(())
}

/// Rotation about a principal axis.
pub fn rot_x(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation vector of a rotation matrix (matrix logarithm on SO(3)).
pub fn rotation_vector(m: &Mat3) -> Result<Vec3> {
    Ok(Quaternion::from_matrix(m)?.to_rotation_vector())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation, INPUT_TOLERANCE)?;
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRotation("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    pub fn from_rotation(rotation: Mat3) -> Result<Self> {
        Self::new(rotation, Vec3::zeros())
    }

    pub fn from_pose(pose: &Pose) -> Self {
        Self {
            rotation: pose.orientation.to_matrix(),
            translation: pose.position,
        }
    }

    pub fn to_pose(&self) -> Result<Pose> {
        Ok(Pose {
            position: self.translation,
            orientation: Quaternion::from_matrix(&self.rotation)?,
        })
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Rotates a free vector; translation does not apply.
    pub fn rotate_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `(self ∘ other).apply(p) == self.apply(other.apply(p))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.invert()
}

pub fn rotate_vector(t: &RigidTransform, v: &Vec3) -> Vec3 {
    t.rotate_vector(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Quaternion,
}

impl Default for Pose {
    fn default() -> Self {
        Self {
            position: Vec3::zeros(),
            orientation: Quaternion::IDENTITY,
        }
    }
}

impl Pose {
    pub fn new(position: Vec3, orientation: Quaternion) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform::from_pose(self)
    }

    /// Position distance and orientation angle to another pose.
    pub fn residual(&self, other: &Pose) -> (f64, f64) {
        (
            (self.position - other.position).norm(),
            self.orientation.angle_to(other.orientation),
        )
    }
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quat_close(a: Quaternion, b: Quaternion, tol: f64) -> bool {
        a.to_array()
            .iter()
            .zip(b.to_array())
            .all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn identity_quaternion_is_identity_matrix() {
        let m = quat_to_matrix([1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(m, Mat3::identity());
    }

    #[test]
    fn quarter_turn_about_x_maps_y_to_z() {
        let h = 0.5f64.sqrt();
        let m = quat_to_matrix([h, h, 0.0, 0.0]).unwrap();
        let v = m * Vec3::new(0.0, 1.0, 0.0);
        assert!((v - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        assert!(matches!(
            quat_to_matrix([1.0, 0.1, 0.0, 0.0]),
            Err(Error::InvalidQuaternion { .. })
        ));
        assert!(quat_to_matrix([1.0 + 1e-8, 0.0, 0.0, 0.0]).is_ok());
    }

    #[test]
    fn matrix_to_quat_special_cases() {
        assert_eq!(
            matrix_to_quat(&Mat3::identity()).unwrap(),
            Quaternion::IDENTITY
        );
        let q = matrix_to_quat(&Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0))).unwrap();
        assert!(quat_close(q, Quaternion::new(0.0, 1.0, 0.0, 0.0).unwrap(), 1e-15));
        assert_eq!(q.to_array(), [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn non_orthonormal_matrix_rejected() {
        let mut m = Mat3::identity();
        m[(0, 1)] = 0.01;
        assert!(matches!(
            matrix_to_quat(&m),
            Err(Error::InvalidRotation(_))
        ));
        let reflection = Mat3::from_diagonal(&Vec3::new(-1.0, 1.0, 1.0));
        assert!(matrix_to_quat(&reflection).is_err());
    }

    #[test]
    fn round_trip_thousand_random_quaternions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let q = random_quaternion(&mut rng);
            assert!(q.w >= 0.0);
            let back = matrix_to_quat(&q.to_matrix()).unwrap();
            assert!(quat_close(q, back, 1e-9), "{q:?} vs {back:?}");
            assert!((back.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn compose_and_invert_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_transform(&mut rng);
        let id = RigidTransform::identity();
        let c = compose(&t, &id);
        assert!((c.rotation - t.rotation).amax() < 1e-15);
        assert!((c.translation - t.translation).amax() < 1e-15);

        let e = compose(&t, &invert(&t));
        assert!((e.rotation - Mat3::identity()).amax() < 1e-9);
        assert!(e.translation.amax() < 1e-9);

        assert_eq!(invert(&id), id);
        let shift = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 0.1));
        assert_eq!(invert(&shift).translation, Vec3::new(0.0, 0.0, -0.1));
    }

    #[test]
    fn compose_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_transform(&mut rng);
        let b = random_transform(&mut rng);
        let ab = compose(&a, &b);
        for _ in 0..100 {
            let p = random_vec3(&mut rng, 5.0);
            let direct = ab.apply(&p);
            // Hand-expanded sequential application.
            let bp = b.rotation * p + b.translation;
            let abp = a.rotation * bp + a.translation;
            assert!((direct - abp).norm() < 1e-12);
        }
    }

    #[test]
    fn rotate_vector_examples() {
        let id = RigidTransform::identity();
        assert_eq!(
            rotate_vector(&id, &Vec3::new(1.0, 2.0, 3.0)),
            Vec3::new(1.0, 2.0, 3.0)
        );
        let rz = RigidTransform::new(rot_z(std::f64::consts::FRAC_PI_2), Vec3::new(5.0, 5.0, 5.0))
            .unwrap();
        let v = rotate_vector(&rz, &Vec3::new(1.0, 0.0, 0.0));
        assert!((v - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = random_transform(&mut rng);
        let v = random_vec3(&mut rng, 3.0);
        let out = rotate_vector(&t, &v);
        for i in 0..3 {
            let explicit: f64 = (0..3).map(|j| t.rotation[(i, j)] * v[j]).sum();
            assert!((out[i] - explicit).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_vector_round_trip() {
        let v = Vec3::new(0.3, -0.2, 0.9);
        let q = Quaternion::from_rotation_vector(&v);
        assert!((q.to_rotation_vector() - v).norm() < 1e-12);
        let m = rot_z(0.4);
        assert!((rotation_vector(&m).unwrap() - Vec3::new(0.0, 0.0, 0.4)).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn invert_is_an_involution(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_transform(&mut rng);
            let back = invert(&invert(&t));
            prop_assert!((back.rotation - t.rotation).amax() < 1e-12);
            prop_assert!((back.translation - t.translation).amax() < 1e-12);
        }

        #[test]
        fn compose_is_associative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, c) = (random_transform(&mut rng), random_transform(&mut rng), random_transform(&mut rng));
            let left = compose(&compose(&a, &b), &c);
            let right = compose(&a, &compose(&b, &c));
            prop_assert!((left.rotation - right.rotation).amax() < 1e-12);
            prop_assert!((left.translation - right.translation).amax() < 1e-12);
        }

        #[test]
        fn rotation_preserves_norm(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_transform(&mut rng);
            let v = random_vec3(&mut rng, 10.0);
            prop_assert!((rotate_vector(&t, &v).norm() - v.norm()).abs() < 1e-9);
        }

        #[test]
        fn conversions_are_canonical(w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            prop_assume!(w * w + x * x + y * y + z * z > 1e-6);
            let q = Quaternion::new(w, x, y, z).unwrap();
            prop_assert!(q.w >= 0.0);
            prop_assert!((q.norm() - 1.0).abs() < 1e-9);
            let back = matrix_to_quat(&q.to_matrix()).unwrap();
            prop_assert!(back.w >= 0.0);
        }
    }
}
