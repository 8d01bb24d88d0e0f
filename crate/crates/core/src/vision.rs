//! Reprojection residual and Huber loss.

use nalgebra::{Matrix2x3, Matrix2x6, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{PinholeCamera, Pose, MIN_DEPTH};
use crate::state::{anchor_point, anchor_point_jacobian, feature_point_in_camera_with_jacobians, StateError};

/// Huber threshold on the whitened reprojection error, in units of σ.
pub const DEFAULT_VISUAL_HUBER_DELTA: f64 = 1.5;
/// Isotropic pixel noise σ.
pub const DEFAULT_PIXEL_SIGMA: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VisionError {
    #[error("point behind camera (depth {0})")]
    PointBehindCamera(f64),
    #[error(transparent)]
    State(#[from] StateError),
}

/// IRLS weight `ρ'(s)` of the Huber loss `ρ(s) = s` for `s ≤ δ²`,
/// `2δ√s − δ²` otherwise.
pub fn huber_weight(squared_norm: f64, delta: f64) -> f64 {
    if squared_norm <= delta * delta {
        1.0
    } else {
        delta / squared_norm.sqrt()
    }
}

/// Huber loss `ρ(s)` applied to a squared norm.
pub fn huber_cost(squared_norm: f64, delta: f64) -> f64 {
    if squared_norm <= delta * delta {
        squared_norm
    } else {
        2.0 * delta * squared_norm.sqrt() - delta * delta
    }
}

/// Reprojection residual and Jacobians w.r.t. anchor pose, target pose
/// (`[rotation, position]` each) and feature `(u, v, w)`.
#[derive(Clone, Copy, Debug)]
pub struct ReprojectionLinearization {
    pub residual: Vector2<f64>,
    /// Depth of the feature in the target camera.
    pub depth: f64,
    pub d_anchor: Matrix2x6<f64>,
    pub d_target: Matrix2x6<f64>,
    pub d_feature: Matrix2x3<f64>,
}

/// `project(X_Ck) − obs`. When `same_keyframe` is set the observation is in
/// the anchor frame itself and the poses drop out.
pub fn reprojection_residual(
    uvw: &Vector3<f64>,
    obs_pixel: &Vector2<f64>,
    anchor: &Pose,
    target: &Pose,
    same_keyframe: bool,
    extrinsics: &Pose,
    camera: &PinholeCamera,
) -> Result<Vector2<f64>, VisionError> {
    Ok(reprojection_with_jacobians(uvw, obs_pixel, anchor, target, same_keyframe, extrinsics, camera)?.residual)
}

pub fn reprojection_with_jacobians(
    uvw: &Vector3<f64>,
    obs_pixel: &Vector2<f64>,
    anchor: &Pose,
    target: &Pose,
    same_keyframe: bool,
    extrinsics: &Pose,
    camera: &PinholeCamera,
) -> Result<ReprojectionLinearization, VisionError> {
    let (point, d_anchor, d_target, d_feature) = if same_keyframe {
        (
            anchor_point(uvw)?,
            nalgebra::Matrix3x6::zeros(),
            nalgebra::Matrix3x6::zeros(),
            anchor_point_jacobian(uvw),
        )
    } else {
        let j = feature_point_in_camera_with_jacobians(uvw, anchor, target, extrinsics)?;
        (j.point, j.d_anchor, j.d_target, j.d_feature)
    };
    if point.z <= MIN_DEPTH {
        return Err(VisionError::PointBehindCamera(point.z));
    }
    let proj = camera
        .project(&point)
        .map_err(|_| VisionError::PointBehindCamera(point.z))?;
    let jp = camera.project_jacobian(&point);
    Ok(ReprojectionLinearization {
        residual: proj - obs_pixel,
        depth: point.z,
        d_anchor: jp * d_anchor,
        d_target: jp * d_target,
        d_feature: jp * d_feature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::quat_exp;

    fn setup() -> (Vector3<f64>, Pose, Pose, Pose, PinholeCamera) {
        let cam = PinholeCamera::new(460.0, 460.0, 320.0, 240.0, 640, 480).unwrap();
        let extr = Pose::new(quat_exp(&Vector3::new(1.2092, -1.2092, 1.2092)), Vector3::new(0.02, -0.01, 0.0));
        let anchor = Pose::new(quat_exp(&Vector3::new(0.01, 0.02, 0.3)), Vector3::new(0.1, 0.0, 0.0));
        let target = Pose::new(quat_exp(&Vector3::new(-0.01, 0.03, 0.25)), Vector3::new(0.3, 0.1, 0.05));
        (Vector3::new(0.05, -0.1, 0.2), anchor, target, extr, cam)
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber_weight(0.0, 1.5), 1.0);
        assert_eq!(huber_weight(2.25, 1.5), 1.0);
        assert!((huber_weight(4.0 * 2.25, 1.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn huber_is_c1_at_threshold() {
        let d = 1.5;
        let s0 = d * d;
        let h = 1e-7;
        let left = (huber_cost(s0, d) - huber_cost(s0 - h, d)) / h;
        let right = (huber_cost(s0 + h, d) - huber_cost(s0, d)) / h;
        assert!((huber_cost(s0 - 1e-12, d) - huber_cost(s0 + 1e-12, d)).abs() < 1e-10);
        assert!((left - right).abs() < 1e-6);
        // ρ' equals the IRLS weight
        for s in [0.5, 3.0, 10.0, 100.0] {
            let fd = (huber_cost(s + 1e-6, d) - huber_cost(s - 1e-6, d)) / 2e-6;
            assert!((fd - huber_weight(s, d)).abs() < 1e-8);
        }
    }

    #[test]
    fn consistent_geometry_gives_zero_residual() {
        let (uvw, anchor, target, extr, cam) = setup();
        let pc = anchor_point(&uvw).unwrap();
        let pt = crate::state::feature_point_in_camera(&uvw, &anchor, &target, &extr).unwrap();
        let obs = cam.project(&pt).unwrap();
        let r = reprojection_residual(&uvw, &obs, &anchor, &target, false, &extr, &cam).unwrap();
        assert!(r.norm() < 1e-9);
        let obs_anchor = cam.project(&pc).unwrap();
        let r = reprojection_residual(&uvw, &obs_anchor, &anchor, &anchor, true, &extr, &cam).unwrap();
        assert!(r.norm() < 1e-12);
        let shifted = obs + Vector2::new(1.0, 0.0);
        let r = reprojection_residual(&uvw, &shifted, &anchor, &target, false, &extr, &cam).unwrap();
        assert!((r - Vector2::new(-1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn behind_camera() {
        let (_, anchor, _, extr, cam) = setup();
        let r = reprojection_residual(
            &Vector3::new(0.0, 0.0, 0.5),
            &Vector2::zeros(),
            &anchor,
            &Pose::new(anchor.rotation, anchor.translation + anchor.rotation * (extr.rotation * Vector3::new(0.0, 0.0, 5.0))),
            false,
            &extr,
            &cam,
        );
        assert!(matches!(r, Err(VisionError::PointBehindCamera(_))));
    }
}
