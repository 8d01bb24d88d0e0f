//! Estimated parameters of an initialization window and the anchored
//! inverse-depth feature transform.
//!
//! Frame conventions: keyframe rotations and positions map the IMU frame into
//! the gravity-aligned global frame; extrinsics map the camera frame into the
//! IMU frame.

use nalgebra::{Matrix3, Matrix3x6, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, PinholeCamera, Pose};
use crate::imu::{ImuSample, NoiseModel};
use crate::monodepth::{DepthMap, GrayImage};

/// Lower bound on the mono-depth scale.
pub const SCALE_EPSILON: f64 = 1e-5;
/// Inverse depths at or below this value are rejected.
pub const MIN_INVERSE_DEPTH: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("inverse depth {0} is not positive")]
    NonPositiveInverseDepth(f64),
    #[error("scale {0} is not above the softplus floor")]
    ScaleBelowFloor(f64),
    #[error("invalid window: {0}")]
    InvalidWindow(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeState {
    pub timestamp_ns: i64,
    /// IMU-to-global rotation.
    pub q: UnitQuaternion<f64>,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub ba: Vector3<f64>,
    pub bg: Vector3<f64>,
}

impl Default for KeyframeState {
    fn default() -> Self {
        Self {
            timestamp_ns: 0,
            q: UnitQuaternion::identity(),
            p: Vector3::zeros(),
            v: Vector3::zeros(),
            ba: Vector3::zeros(),
            bg: Vector3::zeros(),
        }
    }
}

impl KeyframeState {
    pub fn pose(&self) -> Pose {
        Pose::new(self.q, self.p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub keyframe: usize,
    pub pixel: Vector2<f64>,
}

/// Feature track as delivered by the front-end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrack {
    pub id: u64,
    pub observations: Vec<Observation>,
}

impl FeatureTrack {
    pub fn observation_in(&self, keyframe: usize) -> Option<&Observation> {
        self.observations.iter().find(|o| o.keyframe == keyframe)
    }
}

/// Feature anchored in keyframe `anchor_kf` with local inverse-depth
/// coordinates `(u, v, w)`: `u`, `v` on the normalized image plane and `w`
/// the inverse depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub id: u64,
    pub anchor_kf: usize,
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub observations: Vec<Observation>,
}

impl Feature {
    pub fn uvw(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, self.w)
    }

    pub fn set_uvw(&mut self, uvw: &Vector3<f64>) {
        self.u = uvw.x;
        self.v = uvw.y;
        self.w = uvw.z;
    }

    /// Point in the anchor camera frame.
    pub fn anchor_point(&self) -> Result<Vector3<f64>, StateError> {
        anchor_point(&self.uvw())
    }
}

/// Mono-depth affine parameters of one keyframe, stored through the free
/// variable `s` with `a = ε + softplus(s)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleShift {
    pub s: f64,
    pub b: f64,
}

impl ScaleShift {
    pub fn from_scale_shift(a: f64, b: f64) -> Result<Self, StateError> {
        Ok(Self {
            s: free_from_scale(a)?,
            b,
        })
    }

    /// The prior mean `a = 1, b = 0`.
    pub fn prior() -> Self {
        Self::from_scale_shift(1.0, 0.0).expect("1 is above the floor")
    }

    pub fn scale(&self) -> f64 {
        scale_from_free(self.s)
    }

    pub fn shift(&self) -> f64 {
        self.b
    }
}

/// `a = ε + log(eˢ + 1)`, evaluated without overflow for large `|s|`.
pub fn scale_from_free(s: f64) -> f64 {
    let softplus = if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    };
    SCALE_EPSILON + softplus
}

/// `da/ds`, the logistic function.
pub fn scale_from_free_derivative(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`scale_from_free`]: `s = log(e^(a−ε) − 1)`.
pub fn free_from_scale(a: f64) -> Result<f64, StateError> {
    let x = a - SCALE_EPSILON;
    if !(x > 0.0) {
        return Err(StateError::ScaleBelowFloor(a));
    }
    // log(eˣ − 1) = x + log(1 − e⁻ˣ)
    Ok(x + (-(-x).exp_m1()).ln())
}

pub fn anchor_point(uvw: &Vector3<f64>) -> Result<Vector3<f64>, StateError> {
    if uvw.z <= MIN_INVERSE_DEPTH {
        return Err(StateError::NonPositiveInverseDepth(uvw.z));
    }
    Ok(Vector3::new(uvw.x, uvw.y, 1.0) / uvw.z)
}

/// Map an anchored inverse-depth feature into the target keyframe's camera
/// frame. The z component is the feature depth Ω seen from the target.
pub fn feature_point_in_camera(
    uvw: &Vector3<f64>,
    anchor_pose: &Pose,
    target_pose: &Pose,
    extrinsics: &Pose,
) -> Result<Vector3<f64>, StateError> {
    let pc = anchor_point(uvw)?;
    if anchor_pose == target_pose {
        return Ok(pc);
    }
    let pg = anchor_pose.transform_point(&extrinsics.transform_point(&pc));
    Ok(extrinsics.inverse_transform_point(&target_pose.inverse_transform_point(&pg)))
}

/// Camera-frame point with Jacobians w.r.t. the anchor pose, target pose
/// (each `[rotation, position]`, right-perturbed rotation) and `(u, v, w)`.
#[derive(Clone, Copy, Debug)]
pub struct CameraPointJacobians {
    pub point: Vector3<f64>,
    pub d_anchor: Matrix3x6<f64>,
    pub d_target: Matrix3x6<f64>,
    pub d_feature: Matrix3<f64>,
}

pub fn anchor_point_jacobian(uvw: &Vector3<f64>) -> Matrix3<f64> {
    let iw = 1.0 / uvw.z;
    let iw2 = iw * iw;
    Matrix3::new(iw, 0.0, -uvw.x * iw2, 0.0, iw, -uvw.y * iw2, 0.0, 0.0, -iw2)
}

/// Jacobians for a feature observed in a keyframe other than its anchor.
pub fn feature_point_in_camera_with_jacobians(
    uvw: &Vector3<f64>,
    anchor_pose: &Pose,
    target_pose: &Pose,
    extrinsics: &Pose,
) -> Result<CameraPointJacobians, StateError> {
    let pc = anchor_point(uvw)?;
    let rc = extrinsics.rotation.to_rotation_matrix().into_inner();
    let ra = anchor_pose.rotation.to_rotation_matrix().into_inner();
    let rt = target_pose.rotation.to_rotation_matrix().into_inner();

    let pb_anchor = rc * pc + extrinsics.translation;
    let pg = ra * pb_anchor + anchor_pose.translation;
    let pb_target = rt.transpose() * (pg - target_pose.translation);
    let point = rc.transpose() * (pb_target - extrinsics.translation);

    let d_pg = rc.transpose() * rt.transpose();
    let mut d_anchor = Matrix3x6::zeros();
    d_anchor
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-d_pg * ra * skew(&pb_anchor)));
    d_anchor.fixed_view_mut::<3, 3>(0, 3).copy_from(&d_pg);
    let mut d_target = Matrix3x6::zeros();
    d_target
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(rc.transpose() * skew(&pb_target)));
    d_target.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-d_pg));
    let d_feature = d_pg * ra * rc * anchor_point_jacobian(uvw);

    Ok(CameraPointJacobians {
        point,
        d_anchor,
        d_target,
        d_feature,
    })
}

/// Per-keyframe input slot: timestamp plus optional mono-depth and image.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeSlot {
    pub timestamp_ns: i64,
    pub depth: Option<DepthMap>,
    pub image: Option<GrayImage>,
}

/// Everything needed to run one initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct InitWindow {
    pub keyframes: Vec<KeyframeSlot>,
    pub features: Vec<FeatureTrack>,
    /// `imu_segments[k]` spans keyframes `k` and `k + 1` inclusively.
    pub imu_segments: Vec<Vec<ImuSample>>,
    /// Samples after the last keyframe up to one camera period later.
    pub trailing_imu: Vec<ImuSample>,
    /// Camera-to-IMU transform.
    pub extrinsics: Pose,
    pub camera: PinholeCamera,
    pub noise: NoiseModel,
    /// m/s²
    pub gravity_magnitude: f64,
}

impl InitWindow {
    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn has_depth(&self) -> bool {
        !self.keyframes.is_empty() && self.keyframes.iter().all(|k| k.depth.is_some())
    }

    pub fn keyframe_times(&self) -> Vec<f64> {
        let t0 = self.keyframes[0].timestamp_ns;
        self.keyframes
            .iter()
            .map(|k| (k.timestamp_ns - t0) as f64 * 1e-9)
            .collect()
    }

    /// Seconds of IMU data in the window, including the trailing samples.
    pub fn data_span(&self) -> f64 {
        let first = self.keyframes.first().map(|k| k.timestamp_ns).unwrap_or(0);
        let last = self
            .trailing_imu
            .last()
            .map(|s| s.timestamp_ns)
            .or_else(|| self.keyframes.last().map(|k| k.timestamp_ns))
            .unwrap_or(0);
        (last - first) as f64 * 1e-9
    }

    pub fn gravity(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.gravity_magnitude)
    }

    pub fn validate(&self) -> Result<(), StateError> {
        let bad = |m: String| Err(StateError::InvalidWindow(m));
        if self.keyframes.len() < 2 {
            return bad(format!("{} keyframes, need at least 2", self.keyframes.len()));
        }
        if !(self.gravity_magnitude > 0.0) {
            return bad(format!("gravity magnitude {}", self.gravity_magnitude));
        }
        for w in self.keyframes.windows(2) {
            if w[1].timestamp_ns <= w[0].timestamp_ns {
                return bad("keyframe timestamps not strictly increasing".into());
            }
        }
        if self.imu_segments.len() != self.keyframes.len() - 1 {
            return bad(format!(
                "{} IMU segments for {} keyframes",
                self.imu_segments.len(),
                self.keyframes.len()
            ));
        }
        for (k, seg) in self.imu_segments.iter().enumerate() {
            let (Some(first), Some(last)) = (seg.first(), seg.last()) else {
                return bad(format!("IMU segment {k} is empty"));
            };
            if first.timestamp_ns != self.keyframes[k].timestamp_ns
                || last.timestamp_ns != self.keyframes[k + 1].timestamp_ns
            {
                return bad(format!("IMU segment {k} does not span its keyframe pair"));
            }
        }
        for f in &self.features {
            let mut seen = vec![false; self.keyframes.len()];
            for o in &f.observations {
                if o.keyframe >= self.keyframes.len() {
                    return bad(format!("feature {} observed in unknown keyframe", f.id));
                }
                if seen[o.keyframe] {
                    return bad(format!("feature {} observed twice in one keyframe", f.id));
                }
                seen[o.keyframe] = true;
            }
        }
        Ok(())
    }
}
