//! Linear bootstrap of velocity, gravity and feature depths.
//!
//! Keyframe rotations come from gyro integration at zero bias. Positions in
//! the first IMU frame are then linear in the first velocity `v0` and the
//! gravity vector `g`:
//!
//! `p_k = v0·t_k + ½·g·t_k² + Δp_0k`
//!
//! Each feature is a ray from its anchor camera with unknown depth `z_i`.
//! Every other observation gives two linear constraints of the form
//! `X.x − u·X.z = 0`, `X.y − v·X.z = 0` on the point in the observing camera.

use nalgebra::{DMatrix, DVector, Matrix3, RowVector3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::imu::{integrate_gyro, ImuError, PreintegratedImu};
use crate::solver::FeatureParam;
use crate::state::{InitWindow, KeyframeState, ScaleShift};

/// Normal-matrix condition number above which the system is flagged.
pub const DEGENERATE_CONDITION: f64 = 1e12;
/// Depth used for features whose solved depth is unusable and no valid
/// median exists.
pub const FALLBACK_DEPTH: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClosedFormError {
    #[error(transparent)]
    Imu(#[from] ImuError),
    #[error("{0} keyframes, need at least 2")]
    TooFewKeyframes(usize),
    #[error("{0} features observed twice or more, need at least 3")]
    TooFewFeatures(usize),
    #[error("{0} preintegrated segments for {1} keyframes")]
    SegmentMismatch(usize, usize),
    #[error("linear system could not be solved")]
    Singular,
}

/// Keyframe orientations relative to the first keyframe.
pub fn integrate_rotations(
    segments: &[Vec<crate::imu::ImuSample>],
    bg0: &Vector3<f64>,
) -> Result<Vec<UnitQuaternion<f64>>, ImuError> {
    let mut out = vec![UnitQuaternion::identity()];
    for seg in segments {
        let dq = integrate_gyro(seg, bg0)?;
        let last = *out.last().expect("non-empty");
        out.push(last * dq);
    }
    Ok(out)
}

/// Kinematics of each keyframe relative to the first, from composing the
/// segment preintegrations.
#[derive(Clone, Debug)]
struct Composed {
    rotation: Vec<Matrix3<f64>>,
    delta_v: Vec<Vector3<f64>>,
    delta_p: Vec<Vector3<f64>>,
    t: Vec<f64>,
}

fn compose(pre: &[PreintegratedImu], times: &[f64]) -> Composed {
    let mut rotation = vec![Matrix3::identity()];
    let mut delta_v = vec![Vector3::zeros()];
    let mut delta_p = vec![Vector3::zeros()];
    for p in pre {
        let r = *rotation.last().unwrap();
        let dv = *delta_v.last().unwrap();
        let dp = *delta_p.last().unwrap();
        delta_p.push(dp + dv * p.dt_total + r * p.delta_p);
        delta_v.push(dv + r * p.delta_v);
        rotation.push(r * p.delta_q.to_rotation_matrix().into_inner());
    }
    Composed {
        rotation,
        delta_v,
        delta_p,
        t: times.to_vec(),
    }
}

/// The stacked linear system `A x = b` with `x = [v0; g; z_0 … z_{M−1}]`.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Indices into the window's feature list, one per depth unknown.
    pub features: Vec<usize>,
    /// Anchor keyframe of each depth unknown.
    pub anchors: Vec<usize>,
    /// Normalized anchor bearing `(x, y, 1)` of each depth unknown.
    pub bearings: Vec<Vector3<f64>>,
}

pub fn build_linear_system(window: &InitWindow, pre: &[PreintegratedImu]) -> Result<LinearSystem, ClosedFormError> {
    let n = window.len();
    if n < 2 {
        return Err(ClosedFormError::TooFewKeyframes(n));
    }
    if pre.len() + 1 != n {
        return Err(ClosedFormError::SegmentMismatch(pre.len(), n));
    }
    let kin = compose(pre, &window.keyframe_times());
    let rc = window.extrinsics.rotation.to_rotation_matrix().into_inner();
    let tc = window.extrinsics.translation;

    let mut features = Vec::new();
    let mut anchors = Vec::new();
    let mut bearings = Vec::new();
    for (i, f) in window.features.iter().enumerate() {
        if f.observations.len() < 2 {
            continue;
        }
        let first = f.observations.iter().min_by_key(|o| o.keyframe).expect("non-empty");
        let nrm = window.camera.normalize(&first.pixel);
        features.push(i);
        anchors.push(first.keyframe);
        bearings.push(Vector3::new(nrm.x, nrm.y, 1.0));
    }
    if features.len() < 3 {
        return Err(ClosedFormError::TooFewFeatures(features.len()));
    }

    let rows: usize = features
        .iter()
        .map(|&i| 2 * (window.features[i].observations.len() - 1))
        .sum();
    let cols = 6 + features.len();
    let mut a = DMatrix::zeros(rows, cols);
    let mut b = DVector::zeros(rows);
    let mut row = 0;
    for (col, &i) in features.iter().enumerate() {
        let anchor = anchors[col];
        let ray = kin.rotation[anchor] * rc * bearings[col];
        let (ta, dpa, ra) = (kin.t[anchor], kin.delta_p[anchor], kin.rotation[anchor]);
        for obs in &window.features[i].observations {
            let k = obs.keyframe;
            if k == anchor {
                continue;
            }
            let nrm = window.camera.normalize(&obs.pixel);
            let r_ck_t = (kin.rotation[k] * rc).transpose();
            let tk = kin.t[k];
            let known = dpa - kin.delta_p[k] + ra * tc - kin.rotation[k] * tc;
            for (axis, coord) in [(0usize, nrm.x), (1usize, nrm.y)] {
                let mut sel = RowVector3::zeros();
                sel[axis] = 1.0;
                sel[2] = -coord;
                let m = sel * r_ck_t;
                a.view_mut((row, 0), (1, 3)).copy_from(&(m * (ta - tk)));
                a.view_mut((row, 3), (1, 3)).copy_from(&(m * (0.5 * (ta * ta - tk * tk))));
                a[(row, 6 + col)] = (m * ray)[0];
                b[row] = -(m * known)[0];
                row += 1;
            }
        }
    }
    Ok(LinearSystem {
        a,
        b,
        features,
        anchors,
        bearings,
    })
}

/// Least-squares solution via the normal equations, falling back to an SVD
/// pseudo-inverse when they are not positive definite.
fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64), ClosedFormError> {
    let ata = a.transpose() * a;
    let atb = a.transpose() * b;
    let eig = ata.clone().symmetric_eigenvalues();
    let (min, max) = (eig.min(), eig.max());
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if let Some(ch) = ata.clone().cholesky() {
        let x = ch.solve(&atb);
        if x.iter().all(|v| v.is_finite()) {
            return Ok((x, condition));
        }
    }
    let x = a
        .clone()
        .svd(true, true)
        .solve(b, 1e-12 * max.max(0.0).sqrt())
        .map_err(|_| ClosedFormError::Singular)?;
    Ok((x, condition))
}

#[derive(Clone, Debug)]
pub struct ClosedFormSolution {
    /// States in the gravity-aligned frame, biases zero.
    pub keyframes: Vec<KeyframeState>,
    pub features: Vec<FeatureParam>,
    /// Indices into the window's feature list, parallel to `features`.
    pub feature_indices: Vec<usize>,
    pub scale_shifts: Vec<ScaleShift>,
    /// Unconstrained least-squares gravity in the first IMU frame.
    pub raw_gravity: Vector3<f64>,
    /// Gravity in the first IMU frame after rescaling to the configured
    /// magnitude.
    pub gravity_in_first: Vector3<f64>,
    /// Unconstrained least-squares solution `[v0; g; depths]`.
    pub raw_solution: DVector<f64>,
    pub condition: f64,
    pub degenerate: bool,
    /// Features whose solved depth was unusable and got replaced.
    pub replaced_depths: usize,
}

/// Rotation taking `from` onto `to` (both non-zero).
fn align_vectors(from: &Vector3<f64>, to: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::rotation_between(from, to).unwrap_or_else(|| {
        // Antiparallel: any perpendicular axis works.
        let axis = if from.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let perp = from.cross(&axis).normalize();
        UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(perp), std::f64::consts::PI)
    })
}

pub fn solve_linear_init(window: &InitWindow, pre: &[PreintegratedImu]) -> Result<ClosedFormSolution, ClosedFormError> {
    let sys = build_linear_system(window, pre)?;
    let (raw, condition) = least_squares(&sys.a, &sys.b)?;
    let raw_gravity = Vector3::new(raw[3], raw[4], raw[5]);
    let magnitude = window.gravity_magnitude;

    let direction = if raw_gravity.norm() > 1e-9 * magnitude {
        raw_gravity.normalize()
    } else {
        // No usable estimate: the accelerometer at rest reads −g.
        let mean: Vector3<f64> = window.imu_segments[0].iter().map(|s| s.accel).sum();
        -mean.normalize()
    };
    let g = direction * magnitude;

    // Re-solve v0 and depths with gravity fixed.
    let mut a_fixed = DMatrix::zeros(sys.a.nrows(), sys.a.ncols() - 3);
    a_fixed.columns_mut(0, 3).copy_from(&sys.a.columns(0, 3));
    a_fixed
        .columns_mut(3, sys.a.ncols() - 6)
        .copy_from(&sys.a.columns(6, sys.a.ncols() - 6));
    let b_fixed = &sys.b - sys.a.columns(3, 3) * g;
    let (x, _) = least_squares(&a_fixed, &b_fixed)?;
    let v0 = Vector3::new(x[0], x[1], x[2]);
    let depths: Vec<f64> = (0..sys.features.len()).map(|i| x[3 + i]).collect();

    let kin = compose(pre, &window.keyframe_times());
    let align = align_vectors(&g, &Vector3::new(0.0, 0.0, -magnitude));
    let r_align = align.to_rotation_matrix().into_inner();
    let keyframes = (0..window.len())
        .map(|k| {
            let t = kin.t[k];
            let p = v0 * t + 0.5 * g * t * t + kin.delta_p[k];
            let v = v0 + g * t + kin.delta_v[k];
            let q = UnitQuaternion::from_matrix(&(r_align * kin.rotation[k]));
            KeyframeState {
                timestamp_ns: window.keyframes[k].timestamp_ns,
                q,
                p: r_align * p,
                v: r_align * v,
                ba: Vector3::zeros(),
                bg: Vector3::zeros(),
            }
        })
        .collect();

    let valid = |z: f64| z.is_finite() && z > 1e-3;
    let mut good: Vec<f64> = depths.iter().copied().filter(|&z| valid(z)).collect();
    good.sort_by(f64::total_cmp);
    let fallback = if good.is_empty() { FALLBACK_DEPTH } else { good[good.len() / 2] };
    let mut replaced = 0;
    let features = sys
        .features
        .iter()
        .enumerate()
        .map(|(col, &i)| {
            let z = if valid(depths[col]) {
                depths[col]
            } else {
                replaced += 1;
                fallback
            };
            let bearing = sys.bearings[col];
            FeatureParam {
                id: window.features[i].id,
                anchor: sys.anchors[col],
                uvw: Vector3::new(bearing.x, bearing.y, 1.0 / z),
            }
        })
        .collect();

    Ok(ClosedFormSolution {
        keyframes,
        features,
        feature_indices: sys.features,
        scale_shifts: vec![ScaleShift::prior(); window.len()],
        raw_gravity,
        gravity_in_first: g,
        raw_solution: raw,
        condition,
        degenerate: !(condition <= DEGENERATE_CONDITION),
        replaced_depths: replaced,
    })
}
