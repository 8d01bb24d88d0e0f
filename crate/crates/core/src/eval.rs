//! Trajectory metrics: similarity alignment, scale error, position RMSE,
//! gravity direction error, and aggregation across windows.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::KeyframeState;

/// Scale errors are only meaningful above this mean acceleration, in units of g.
pub const SCALE_REPORT_MIN_ACCEL_G: f64 = 0.005;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("trajectories have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
}

/// `p_gt ≈ scale · rotation · p_est + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Closed-form least-squares similarity (Umeyama) mapping `est` onto `gt`.
pub fn sim3_align(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Sim3, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch(est.len(), gt.len()));
    }
    let n = est.len();
    if n < 3 {
        return Err(EvalError::DegenerateGeometry(format!("{n} points, need 3")));
    }
    let nf = n as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() / nf;
    let mu_g = gt.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let de = e - mu_e;
        cov += (g - mu_g) * de.transpose();
        var_e += de.norm_squared();
    }
    cov /= nf;
    var_e /= nf;

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if var_e <= f64::MIN_POSITIVE || sv[0] <= 0.0 || sv[1] <= 1e-12 * sv[0] {
        return Err(EvalError::DegenerateGeometry("points are collinear or coincident".into()));
    }
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let trace_ds: f64 = (0..3).map(|i| svd.singular_values[i] * s[(i, i)]).sum();
    let scale = trace_ds / var_e;
    let rotation = Rotation3::from_matrix_unchecked(r);
    Ok(Sim3 {
        scale,
        translation: mu_g - scale * (rotation * mu_e),
        rotation,
    })
}

/// Percentage scale error of an alignment scale, `|1 − s| · 100`.
pub fn scale_error_pct(s: f64) -> f64 {
    (1.0 - s).abs() * 100.0
}

/// Root-mean-square position error after applying `align` to `est`.
pub fn position_rmse(est: &[Vector3<f64>], gt: &[Vector3<f64>], align: &Sim3) -> f64 {
    if est.is_empty() {
        return 0.0;
    }
    let sum: f64 = est.iter().zip(gt).map(|(e, g)| (align.apply(e) - g).norm_squared()).sum();
    (sum / est.len() as f64).sqrt()
}

/// Angle in degrees between the estimated and true global z axes, each
/// expressed in the first IMU frame of its trajectory.
pub fn gravity_error_deg(est_first: &KeyframeState, gt_first: &KeyframeState) -> f64 {
    let z = Vector3::z();
    let ze = est_first.q.inverse() * z;
    let zg = gt_first.q.inverse() * z;
    // atan2 keeps precision near zero where acos does not.
    ze.cross(&zg).norm().atan2(ze.dot(&zg)).to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub scale: f64,
    /// Absent when the window's mean acceleration is too low for scale to be meaningful.
    pub scale_error_pct: Option<f64>,
    pub position_rmse_m: f64,
    pub gravity_error_deg: f64,
    pub mean_acceleration: f64,
}

/// Metrics for one window. `mean_acceleration` is the ground-truth mean
/// linear acceleration norm (m/s²) over the window.
pub fn evaluate_window(
    est: &[KeyframeState],
    gt: &[KeyframeState],
    mean_acceleration: f64,
    gravity_magnitude: f64,
) -> Result<WindowMetrics, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch(est.len(), gt.len()));
    }
    let pe: Vec<Vector3<f64>> = est.iter().map(|s| s.p).collect();
    let pg: Vec<Vector3<f64>> = gt.iter().map(|s| s.p).collect();
    let align = sim3_align(&pe, &pg)?;
    let reported = mean_acceleration > SCALE_REPORT_MIN_ACCEL_G * gravity_magnitude;
    Ok(WindowMetrics {
        scale: align.scale,
        scale_error_pct: reported.then(|| scale_error_pct(align.scale)),
        position_rmse_m: position_rmse(&pe, &pg, &align),
        gravity_error_deg: gravity_error_deg(&est[0], &gt[0]),
        mean_acceleration,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub windows: usize,
    pub evaluated: usize,
    pub scale_reported: usize,
    pub mean_scale_error_pct: Option<f64>,
    pub mean_position_rmse_m: Option<f64>,
    /// Root mean square of the per-window gravity angles.
    pub gravity_rmse_deg: Option<f64>,
}

/// Aggregate per-window metrics; `None` entries are failed windows.
pub fn aggregate(metrics: &[Option<WindowMetrics>]) -> Aggregate {
    let ok: Vec<&WindowMetrics> = metrics.iter().flatten().collect();
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let scales: Vec<f64> = ok.iter().filter_map(|m| m.scale_error_pct).collect();
    let scale_reported = scales.len();
    Aggregate {
        windows: metrics.len(),
        evaluated: ok.len(),
        scale_reported,
        mean_scale_error_pct: mean(scales),
        mean_position_rmse_m: mean(ok.iter().map(|m| m.position_rmse_m).collect()),
        gravity_rmse_deg: mean(ok.iter().map(|m| m.gravity_error_deg.powi(2)).collect()).map(f64::sqrt),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(seed: u64, n: usize) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect()
    }

    fn state(q: UnitQuaternion<f64>, p: Vector3<f64>) -> KeyframeState {
        KeyframeState {
            q,
            p,
            ..KeyframeState::default()
        }
    }

    #[test]
    fn identical_trajectories_align_to_identity() {
        let p = cloud(1, 10);
        let a = sim3_align(&p, &p).unwrap();
        assert!((a.scale - 1.0).abs() < 1e-12);
        assert!((a.rotation.matrix() - Matrix3::identity()).norm() < 1e-12);
        assert!(a.translation.norm() < 1e-12);
    }

    #[test]
    fn half_scale_estimate_gives_scale_two() {
        let gt = cloud(2, 8);
        let est: Vec<_> = gt.iter().map(|p| p * 0.5).collect();
        let a = sim3_align(&est, &gt).unwrap();
        assert!((a.scale - 2.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let p: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(sim3_align(&p, &p), Err(EvalError::DegenerateGeometry(_))));
        let same = vec![Vector3::new(1.0, 1.0, 1.0); 4];
        assert!(matches!(sim3_align(&same, &same), Err(EvalError::DegenerateGeometry(_))));
        assert!(matches!(sim3_align(&p[..2], &p[..2]), Err(EvalError::DegenerateGeometry(_))));
        assert!(matches!(sim3_align(&p, &p[..3]), Err(EvalError::LengthMismatch(5, 3))));
    }

    #[test]
    fn scale_error_examples() {
        assert_eq!(scale_error_pct(1.0), 0.0);
        assert!((scale_error_pct(1.3) - 30.0).abs() < 1e-9);
        assert!((scale_error_pct(0.7) - 30.0).abs() < 1e-9);
    }

    #[test]
    fn tilt_about_x_is_measured() {
        let gt = state(UnitQuaternion::from_euler_angles(0.1, -0.2, 0.7), Vector3::zeros());
        assert!(gravity_error_deg(&gt, &gt) < 1e-12);
        let tilt = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 2f64.to_radians());
        let est = state(tilt * gt.q, Vector3::zeros());
        assert!((gravity_error_deg(&est, &gt) - 2.0).abs() < 1e-9);
        // Yaw of the global frame does not change the z axis.
        let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 1.0);
        assert!(gravity_error_deg(&state(yaw * gt.q, Vector3::zeros()), &gt) < 1e-9);
    }

    #[test]
    fn scale_is_omitted_at_low_acceleration() {
        let gt: Vec<_> = cloud(3, 5).into_iter().map(|p| state(UnitQuaternion::identity(), p)).collect();
        let m = evaluate_window(&gt, &gt, 0.04, 9.81).unwrap();
        assert!(m.scale_error_pct.is_none());
        let m = evaluate_window(&gt, &gt, 0.06, 9.81).unwrap();
        assert_eq!(m.scale_error_pct, Some(scale_error_pct(m.scale)));
    }

    #[test]
    fn aggregate_uses_rms_for_gravity() {
        let m = |g: f64, s: Option<f64>| {
            Some(WindowMetrics {
                scale: 1.0,
                scale_error_pct: s,
                position_rmse_m: 0.1,
                gravity_error_deg: g,
                mean_acceleration: 1.0,
            })
        };
        let agg = aggregate(&[m(3.0, Some(10.0)), None, m(4.0, None)]);
        assert_eq!((agg.windows, agg.evaluated, agg.scale_reported), (3, 2, 1));
        assert!((agg.gravity_rmse_deg.unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(agg.mean_scale_error_pct, Some(10.0));
        assert_eq!(aggregate(&[None]).mean_position_rmse_m, None);
    }

    proptest! {
        #[test]
        fn random_similarity_is_recovered(
            seed in 0u64..1000,
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in -3.0f64..3.0,
            scale in 0.1f64..10.0,
            t in prop::array::uniform3(-5.0f64..5.0),
        ) {
            let axis = Vector3::from(axis);
            prop_assume!(axis.norm() > 1e-3);
            let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
            let truth = Sim3 { scale, rotation: r, translation: Vector3::from(t) };
            let est = cloud(seed, 12);
            let gt: Vec<_> = est.iter().map(|p| truth.apply(p)).collect();
            let a = sim3_align(&est, &gt).unwrap();
            prop_assert!((a.scale - scale).abs() < 1e-10 * scale.max(1.0));
            prop_assert!((a.rotation.matrix() - r.matrix()).norm() < 1e-10);
            prop_assert!((a.translation - truth.translation).norm() < 1e-9);
        }

        #[test]
        fn alignment_is_invariant_to_joint_rigid_motion(
            seed in 0u64..1000,
            euler in prop::array::uniform3(-3.0f64..3.0),
            t in prop::array::uniform3(-5.0f64..5.0),
        ) {
            let gt = cloud(seed, 10);
            let est: Vec<_> = cloud(seed + 1, 10).iter().zip(&gt).map(|(n, g)| 0.8 * g + 0.05 * n).collect();
            let base = sim3_align(&est, &gt).unwrap();
            let rigid = Sim3 {
                scale: 1.0,
                rotation: Rotation3::from_euler_angles(euler[0], euler[1], euler[2]),
                translation: Vector3::from(t),
            };
            let moved_e: Vec<_> = est.iter().map(|p| rigid.apply(p)).collect();
            let moved_g: Vec<_> = gt.iter().map(|p| rigid.apply(p)).collect();
            let moved = sim3_align(&moved_e, &moved_g).unwrap();
            prop_assert!((moved.scale - base.scale).abs() < 1e-10);
            let r0 = position_rmse(&est, &gt, &base);
            let r1 = position_rmse(&moved_e, &moved_g, &moved);
            prop_assert!((r0 - r1).abs() < 1e-10);
            prop_assert!(r0 <= position_rmse(&est, &gt, &Sim3::identity()) + 1e-12);
        }
    }
}
