//! Rotation and pose algebra plus the pinhole projection used by every residual.
//!
//! Quaternions follow the Hamilton convention and store body-to-global
//! rotations. Rotation increments are applied on the right
//! (`q ← q ⊗ Exp(δ)`) unless stated otherwise.

use nalgebra::{Matrix2x3, Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Depth below which a point is treated as lying on or behind the image plane.
pub const MIN_DEPTH: f64 = 1e-9;

const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point depth {0} is not positive")]
    NonPositiveDepth(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidCamera(String),
}

/// Flip the sign of `q` so that its scalar part is non-negative.
pub fn canonicalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Rotation by angle `|omega|` about `omega / |omega|`.
pub fn quat_exp(omega: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let (w, k) = if theta < SMALL_ANGLE {
        // sin(θ/2)/θ and cos(θ/2) series, exact to double precision here
        (1.0 - theta_sq / 8.0, 0.5 - theta_sq / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    let q = Quaternion::new(w, k * omega.x, k * omega.y, k * omega.z);
    canonicalize(UnitQuaternion::new_normalize(q))
}

/// Inverse of [`quat_exp`]; the returned rotation vector has norm in `[0, π]`.
pub fn quat_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = canonicalize(*q);
    let v = q.imag();
    let n = v.norm();
    if n < SMALL_ANGLE {
        // θ ≈ 2n / w
        v * (2.0 / q.w)
    } else {
        let theta = 2.0 * n.atan2(q.w);
        v * (theta / n)
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ) Exp(Jr(φ) δ)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = phi.norm_squared();
    let k = skew(phi);
    if theta_sq < 1e-10 {
        return Matrix3::identity() - 0.5 * k + (1.0 / 6.0) * k * k;
    }
    let theta = theta_sq.sqrt();
    Matrix3::identity() - ((1.0 - theta.cos()) / theta_sq) * k
        + ((theta - theta.sin()) / (theta_sq * theta)) * k * k
}

pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = phi.norm_squared();
    let k = skew(phi);
    if theta_sq < 1e-10 {
        return Matrix3::identity() + 0.5 * k + (1.0 / 12.0) * k * k;
    }
    let theta = theta_sq.sqrt();
    let c = 1.0 / theta_sq - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + c * k * k
}

/// Rigid transform mapping points from a child frame into a parent frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn transform_point(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    pub fn inverse_transform_point(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (point - self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.inverse();
        Pose::new(r, -(r * self.translation))
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.to_rotation_matrix().matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// Undistorted pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl PinholeCamera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        let inside = self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx <= self.width as f64
            && self.cy <= self.height as f64;
        if !inside {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn project(&self, point_c: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if point_c.z <= MIN_DEPTH {
            return Err(GeometryError::NonPositiveDepth(point_c.z));
        }
        Ok(Vector2::new(
            self.fx * point_c.x / point_c.z + self.cx,
            self.fy * point_c.y / point_c.z + self.cy,
        ))
    }

    /// Derivative of [`project`](Self::project) with respect to the camera-frame point.
    pub fn project_jacobian(&self, point_c: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / point_c.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * point_c.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * point_c.y * iz2,
        )
    }

    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        let n = self.normalize(pixel);
        Vector3::new(n.x * depth, n.y * depth, depth)
    }

    /// Pixel to normalized image-plane coordinates.
    pub fn normalize(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }

    pub fn denormalize(&self, uv: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(uv.x * self.fx + self.cx, uv.y * self.fy + self.cy)
    }

    pub fn contains(&self, pixel: &Vector2<f64>, margin: f64) -> bool {
        pixel.x >= margin
            && pixel.y >= margin
            && pixel.x <= self.width as f64 - 1.0 - margin
            && pixel.y <= self.height as f64 - 1.0 - margin
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rodrigues(omega: &Vector3<f64>) -> Matrix3<f64> {
        let theta = omega.norm();
        if theta == 0.0 {
            return Matrix3::identity();
        }
        let k = skew(&(omega / theta));
        Matrix3::identity() + theta.sin() * k + (1.0 - theta.cos()) * k * k
    }

    fn rand_vec(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let q = quat_exp(&Vector3::zeros());
        assert_eq!(q.w, 1.0);
        assert_eq!(q.imag(), Vector3::zeros());
    }

    #[test]
    fn exp_half_turn_about_z() {
        let q = quat_exp(&Vector3::new(0.0, 0.0, PI));
        assert!(q.w.abs() < 1e-15);
        assert!((q.k - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exp_matches_rodrigues() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let w = rand_vec(&mut rng, 3.0);
            let r = quat_exp(&w).to_rotation_matrix().into_inner();
            let diff = (r - rodrigues(&w)).abs().max();
            assert!(diff < 1e-12, "diff {diff}");
        }
        let tiny = Vector3::new(1e-10, -2e-10, 3e-11);
        let r = quat_exp(&tiny).to_rotation_matrix().into_inner();
        assert!((r - rodrigues(&tiny)).abs().max() < 1e-15);
    }

    #[test]
    fn log_inverts_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let w = rand_vec(&mut rng, 1.7);
            assert!((quat_log(&quat_exp(&w)) - w).norm() < 1e-12);
        }
    }

    #[test]
    fn right_jacobian_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let phi = rand_vec(&mut rng, 1.0);
            let jr = right_jacobian(&phi);
            let base = quat_exp(&phi);
            let h = 1e-6;
            for c in 0..3 {
                let mut d = Vector3::zeros();
                d[c] = h;
                let plus = quat_log(&(base.inverse() * quat_exp(&(phi + d))));
                let minus = quat_log(&(base.inverse() * quat_exp(&(phi - d))));
                let col = (plus - minus) / (2.0 * h);
                assert!((col - jr.column(c)).norm() < 1e-8);
            }
            assert!((right_jacobian_inv(&phi) * jr - Matrix3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn project_examples() {
        let cam = PinholeCamera::new(100.0, 100.0, 0.0, 0.0, 640, 480).unwrap();
        assert_eq!(
            cam.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap(),
            Vector2::zeros()
        );
        let cam = PinholeCamera::new(100.0, 100.0, 320.0, 240.0, 640, 480).unwrap();
        let px = cam.project(&Vector3::new(1.0, 2.0, 2.0)).unwrap();
        assert_eq!(px, Vector2::new(370.0, 340.0));
        assert!(matches!(
            cam.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn camera_validation() {
        assert!(PinholeCamera::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(PinholeCamera::new(1.0, 1.0, 10.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn transform_point_examples() {
        let p = Vector3::new(0.3, -1.0, 2.0);
        assert_eq!(Pose::identity().transform_point(&p), p);
        let t = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(t.transform_point(&Vector3::zeros()), Vector3::new(1.0, 0.0, 0.0));
        let pose = Pose::new(quat_exp(&Vector3::new(0.4, -0.2, 1.1)), Vector3::new(1.0, 2.0, 3.0));
        let back = pose.inverse_transform_point(&pose.transform_point(&p));
        assert!((back - p).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn exp_of_negation_is_inverse(x in -1.8f64..1.8, y in -1.8f64..1.8, z in -1.8f64..1.8) {
            let w = Vector3::new(x, y, z);
            prop_assume!(w.norm() < PI);
            let q = quat_exp(&w) * quat_exp(&-w);
            prop_assert!(q.angle() < 1e-12);
        }

        #[test]
        fn project_unproject_round_trip(px in 0.0f64..640.0, py in 0.0f64..480.0, depth in 0.01f64..100.0) {
            let cam = PinholeCamera::new(460.0, 455.0, 320.0, 240.0, 640, 480).unwrap();
            let pixel = Vector2::new(px, py);
            let back = cam.project(&cam.unproject(&pixel, depth)).unwrap();
            prop_assert!((back - pixel).norm() < 1e-9);
        }

        #[test]
        fn composition_matches_homogeneous(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Pose::new(quat_exp(&rand_vec(&mut rng, 2.0)), rand_vec(&mut rng, 5.0));
            let b = Pose::new(quat_exp(&rand_vec(&mut rng, 2.0)), rand_vec(&mut rng, 5.0));
            let c = Pose::new(quat_exp(&rand_vec(&mut rng, 2.0)), rand_vec(&mut rng, 5.0));
            let lhs = (a * b).to_homogeneous();
            let rhs = a.to_homogeneous() * b.to_homogeneous();
            prop_assert!((lhs - rhs).abs().max() < 1e-12);
            let assoc = ((a * b) * c).to_homogeneous() - (a * (b * c)).to_homogeneous();
            prop_assert!(assoc.abs().max() < 1e-12);
            let ident = (a.inverse() * a).to_homogeneous() - Matrix4::identity();
            prop_assert!(ident.abs().max() < 1e-9);
        }
    }
}
