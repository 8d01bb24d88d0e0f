//! IMU preintegration between consecutive keyframes and the inertial and
//! bias-prior residuals built on top of it.
//!
//! Preintegrated deltas live in the body frame of the first sample of a
//! segment. The error state of the preintegration is ordered
//! `[rotation, velocity, position]`; keyframe tangent vectors are ordered
//! `[rotation, position, velocity, accel bias, gyro bias]`.

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{quat_exp, quat_log, right_jacobian, right_jacobian_inv, skew};
use crate::state::KeyframeState;

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix15 = SMatrix<f64, 15, 15>;
pub type Vector15 = SVector<f64, 15>;
pub type Vector6 = SVector<f64, 6>;

/// Offsets of each block inside a keyframe tangent vector.
pub const ROT: usize = 0;
pub const POS: usize = 3;
pub const VEL: usize = 6;
pub const BA: usize = 9;
pub const BG: usize = 12;

// Offsets inside the 15-dim inertial residual.
const R_ROT: usize = 0;
const R_VEL: usize = 3;
const R_POS: usize = 6;
const R_BA: usize = 9;
const R_BG: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImuError {
    #[error("IMU segment has {0} samples, need at least 2")]
    EmptySegment(usize),
    #[error("IMU timestamps not strictly increasing at sample {0}")]
    NonMonotonicTimestamps(usize),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub timestamp_ns: i64,
    /// rad/s
    pub gyro: Vector3<f64>,
    /// m/s², specific force
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn new(timestamp_ns: i64, gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self {
            timestamp_ns,
            gyro,
            accel,
        }
    }

    /// Linear interpolation between two samples at `timestamp_ns`.
    pub fn interpolate(a: &ImuSample, b: &ImuSample, timestamp_ns: i64) -> ImuSample {
        let span = (b.timestamp_ns - a.timestamp_ns) as f64;
        let t = if span > 0.0 {
            (timestamp_ns - a.timestamp_ns) as f64 / span
        } else {
            0.0
        };
        ImuSample {
            timestamp_ns,
            gyro: a.gyro + (b.gyro - a.gyro) * t,
            accel: a.accel + (b.accel - a.accel) * t,
        }
    }
}

/// Continuous-time IMU noise densities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// rad/s/√Hz
    pub gyro_noise_density: f64,
    /// m/s²/√Hz
    pub accel_noise_density: f64,
    /// rad/s²/√Hz
    pub gyro_random_walk: f64,
    /// m/s³/√Hz
    pub accel_random_walk: f64,
}

impl Default for NoiseModel {
    /// ADIS16448-class values as shipped with EuRoC calibration files.
    fn default() -> Self {
        Self {
            gyro_noise_density: 1.6968e-4,
            accel_noise_density: 2.0e-3,
            gyro_random_walk: 1.9393e-5,
            accel_random_walk: 3.0e-3,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), ImuError> {
        let all = [
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_random_walk,
            self.accel_random_walk,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(ImuError::InvalidNoise(format!("{self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreintegratedImu {
    pub delta_q: UnitQuaternion<f64>,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    /// Covariance of `[rotation, velocity, position]`.
    pub covariance: Matrix9,
    pub dq_dbg: Matrix3<f64>,
    pub dv_dba: Matrix3<f64>,
    pub dv_dbg: Matrix3<f64>,
    pub dp_dba: Matrix3<f64>,
    pub dp_dbg: Matrix3<f64>,
    /// seconds
    pub dt_total: f64,
    pub ba0: Vector3<f64>,
    pub bg0: Vector3<f64>,
}

impl PreintegratedImu {
    /// First-order bias-corrected deltas.
    pub fn corrected(
        &self,
        ba: &Vector3<f64>,
        bg: &Vector3<f64>,
    ) -> (UnitQuaternion<f64>, Vector3<f64>, Vector3<f64>) {
        let dba = ba - self.ba0;
        let dbg = bg - self.bg0;
        (
            self.delta_q * quat_exp(&(self.dq_dbg * dbg)),
            self.delta_v + self.dv_dba * dba + self.dv_dbg * dbg,
            self.delta_p + self.dp_dba * dba + self.dp_dbg * dbg,
        )
    }

    /// Full 15×15 covariance of the inertial residual, including the
    /// bias random walk accumulated over the segment.
    pub fn residual_covariance(&self, noise: &NoiseModel) -> Matrix15 {
        let mut cov = Matrix15::zeros();
        cov.fixed_view_mut::<9, 9>(0, 0).copy_from(&self.covariance);
        let ba_var = noise.accel_random_walk.powi(2) * self.dt_total;
        let bg_var = noise.gyro_random_walk.powi(2) * self.dt_total;
        for i in 0..3 {
            cov[(R_BA + i, R_BA + i)] = ba_var;
            cov[(R_BG + i, R_BG + i)] = bg_var;
        }
        cov
    }

    /// Whitening matrix `W` with `WᵀW = Σ⁻¹` for the inertial residual.
    pub fn sqrt_information(&self, noise: &NoiseModel) -> Matrix15 {
        let cov = self.residual_covariance(noise);
        let sym = 0.5 * (cov + cov.transpose());
        match sym.cholesky() {
            Some(ch) => ch
                .l()
                .try_inverse()
                .unwrap_or_else(|| Matrix15::identity()),
            None => {
                // Degenerate segment: fall back to a diagonal whitening.
                let mut w = Matrix15::zeros();
                for i in 0..15 {
                    w[(i, i)] = 1.0 / sym[(i, i)].max(1e-18).sqrt();
                }
                w
            }
        }
    }
}

fn check_samples(samples: &[ImuSample]) -> Result<(), ImuError> {
    if samples.len() < 2 {
        return Err(ImuError::EmptySegment(samples.len()));
    }
    for (i, w) in samples.windows(2).enumerate() {
        if w[1].timestamp_ns <= w[0].timestamp_ns {
            return Err(ImuError::NonMonotonicTimestamps(i + 1));
        }
    }
    Ok(())
}

/// Midpoint preintegration with first-order covariance and bias-Jacobian
/// propagation.
pub fn preintegrate(
    samples: &[ImuSample],
    ba0: &Vector3<f64>,
    bg0: &Vector3<f64>,
    noise: &NoiseModel,
) -> Result<PreintegratedImu, ImuError> {
    check_samples(samples)?;

    let mut dq = UnitQuaternion::identity();
    let mut dv = Vector3::zeros();
    let mut dp = Vector3::zeros();
    let mut cov = Matrix9::zeros();
    // Jacobian of [θ, v, p] w.r.t. [ba, bg]
    let mut jac = SMatrix::<f64, 9, 6>::zeros();
    let mut dt_total = 0.0;

    let gyro_var = noise.gyro_noise_density.powi(2);
    let accel_var = noise.accel_noise_density.powi(2);

    for pair in samples.windows(2) {
        let (s0, s1) = (&pair[0], &pair[1]);
        let dt = (s1.timestamp_ns - s0.timestamp_ns) as f64 * 1e-9;
        let omega = 0.5 * (s0.gyro + s1.gyro) - bg0;
        let a0 = s0.accel - ba0;
        let a1 = s1.accel - ba0;

        let phi = omega * dt;
        let step = quat_exp(&phi);
        let r0 = dq.to_rotation_matrix().into_inner();
        let dq_next = dq * step;
        let r1 = dq_next.to_rotation_matrix().into_inner();
        let step_t = step.to_rotation_matrix().into_inner().transpose();
        let jr = right_jacobian(&phi);

        let acc = 0.5 * (r0 * a0 + r1 * a1);
        dp += dv * dt + 0.5 * acc * dt * dt;
        dv += acc * dt;
        dq = dq_next;
        dt_total += dt;

        // ∂ā/∂θ through both endpoint rotations
        let a_theta = -0.5 * (r0 * skew(&a0) + r1 * skew(&a1) * step_t);
        let mut f = Matrix9::identity();
        f.fixed_view_mut::<3, 3>(0, 0).copy_from(&step_t);
        f.fixed_view_mut::<3, 3>(3, 0).copy_from(&(a_theta * dt));
        f.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(a_theta * (0.5 * dt * dt)));
        f.fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(Matrix3::identity() * dt));

        let a_ba = -0.5 * (r0 + r1);
        let a_bg = 0.5 * r1 * skew(&a1) * jr * dt;
        let mut bias_in = SMatrix::<f64, 9, 6>::zeros();
        bias_in.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-jr * dt));
        bias_in.fixed_view_mut::<3, 3>(3, 0).copy_from(&(a_ba * dt));
        bias_in.fixed_view_mut::<3, 3>(3, 3).copy_from(&(a_bg * dt));
        bias_in
            .fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(a_ba * (0.5 * dt * dt)));
        bias_in
            .fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(a_bg * (0.5 * dt * dt)));

        // noise inputs: [n_g (averaged), n_a0, n_a1]
        let mut g = SMatrix::<f64, 9, 9>::zeros();
        let a_ng = -0.5 * r1 * skew(&a1) * jr * dt;
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * dt));
        g.fixed_view_mut::<3, 3>(3, 0).copy_from(&(a_ng * dt));
        g.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(a_ng * (0.5 * dt * dt)));
        g.fixed_view_mut::<3, 3>(3, 3).copy_from(&(0.5 * r0 * dt));
        g.fixed_view_mut::<3, 3>(3, 6).copy_from(&(0.5 * r1 * dt));
        g.fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(0.25 * r0 * dt * dt));
        g.fixed_view_mut::<3, 3>(6, 6)
            .copy_from(&(0.25 * r1 * dt * dt));
        let mut q = Matrix9::zeros();
        // discrete variance of a white-noise sample is density² / dt; the
        // averaged gyro noise of two independent samples halves that
        let gv = 0.5 * gyro_var / dt;
        let av = accel_var / dt;
        for i in 0..3 {
            q[(i, i)] = gv;
            q[(3 + i, 3 + i)] = av;
            q[(6 + i, 6 + i)] = av;
        }

        jac = f * jac + bias_in;
        cov = f * cov * f.transpose() + g * q * g.transpose();
    }

    let cov = 0.5 * (cov + cov.transpose());
    Ok(PreintegratedImu {
        delta_q: dq,
        delta_v: dv,
        delta_p: dp,
        covariance: cov,
        dq_dbg: jac.fixed_view::<3, 3>(0, 3).into_owned(),
        dv_dba: jac.fixed_view::<3, 3>(3, 0).into_owned(),
        dv_dbg: jac.fixed_view::<3, 3>(3, 3).into_owned(),
        dp_dba: jac.fixed_view::<3, 3>(6, 0).into_owned(),
        dp_dbg: jac.fixed_view::<3, 3>(6, 3).into_owned(),
        dt_total,
        ba0: *ba0,
        bg0: *bg0,
    })
}

/// Gyro-only midpoint integration of the segment rotation.
pub fn integrate_gyro(
    samples: &[ImuSample],
    bg0: &Vector3<f64>,
) -> Result<UnitQuaternion<f64>, ImuError> {
    check_samples(samples)?;
    let mut q = UnitQuaternion::identity();
    for pair in samples.windows(2) {
        let dt = (pair[1].timestamp_ns - pair[0].timestamp_ns) as f64 * 1e-9;
        let omega = 0.5 * (pair[0].gyro + pair[1].gyro) - bg0;
        q *= quat_exp(&(omega * dt));
    }
    Ok(q)
}

/// Stacked `[rotation; velocity; position; accel bias; gyro bias]` error
/// between two keyframes.
pub fn inertial_residual(
    xi: &KeyframeState,
    xj: &KeyframeState,
    pre: &PreintegratedImu,
    gravity: &Vector3<f64>,
) -> Vector15 {
    inertial_residual_with_jacobians(xi, xj, pre, gravity).0
}

/// Residual plus Jacobians w.r.t. the tangent spaces of `xi` and `xj`.
pub fn inertial_residual_with_jacobians(
    xi: &KeyframeState,
    xj: &KeyframeState,
    pre: &PreintegratedImu,
    gravity: &Vector3<f64>,
) -> (Vector15, Matrix15, Matrix15) {
    let dt = pre.dt_total;
    let (dq, dv, dp) = pre.corrected(&xi.ba, &xi.bg);
    let ri = xi.q.to_rotation_matrix().into_inner();
    let rj = xj.q.to_rotation_matrix().into_inner();
    let ri_t = ri.transpose();

    let err_rot = dq.inverse() * xi.q.inverse() * xj.q;
    let r_rot = quat_log(&err_rot);
    let vel_world = xj.v - xi.v - gravity * dt;
    let pos_world = xj.p - xi.p - xi.v * dt - 0.5 * gravity * dt * dt;
    let r_vel = ri_t * vel_world - dv;
    let r_pos = ri_t * pos_world - dp;

    let mut r = Vector15::zeros();
    r.fixed_rows_mut::<3>(R_ROT).copy_from(&r_rot);
    r.fixed_rows_mut::<3>(R_VEL).copy_from(&r_vel);
    r.fixed_rows_mut::<3>(R_POS).copy_from(&r_pos);
    r.fixed_rows_mut::<3>(R_BA).copy_from(&(xi.ba - xj.ba));
    r.fixed_rows_mut::<3>(R_BG).copy_from(&(xi.bg - xj.bg));

    let jr_inv = right_jacobian_inv(&r_rot);
    let e_t = err_rot.to_rotation_matrix().into_inner().transpose();
    let dbg = xi.bg - pre.bg0;
    let jr_bias = right_jacobian(&(pre.dq_dbg * dbg));

    let mut ji = Matrix15::zeros();
    let mut jj = Matrix15::zeros();

    ji.fixed_view_mut::<3, 3>(R_ROT, ROT)
        .copy_from(&(-jr_inv * rj.transpose() * ri));
    ji.fixed_view_mut::<3, 3>(R_ROT, BG)
        .copy_from(&(-jr_inv * e_t * jr_bias * pre.dq_dbg));
    jj.fixed_view_mut::<3, 3>(R_ROT, ROT).copy_from(&jr_inv);

    ji.fixed_view_mut::<3, 3>(R_VEL, ROT)
        .copy_from(&skew(&(ri_t * vel_world)));
    ji.fixed_view_mut::<3, 3>(R_VEL, VEL).copy_from(&(-ri_t));
    ji.fixed_view_mut::<3, 3>(R_VEL, BA).copy_from(&(-pre.dv_dba));
    ji.fixed_view_mut::<3, 3>(R_VEL, BG).copy_from(&(-pre.dv_dbg));
    jj.fixed_view_mut::<3, 3>(R_VEL, VEL).copy_from(&ri_t);

    ji.fixed_view_mut::<3, 3>(R_POS, ROT)
        .copy_from(&skew(&(ri_t * pos_world)));
    ji.fixed_view_mut::<3, 3>(R_POS, POS).copy_from(&(-ri_t));
    ji.fixed_view_mut::<3, 3>(R_POS, VEL).copy_from(&(-ri_t * dt));
    ji.fixed_view_mut::<3, 3>(R_POS, BA).copy_from(&(-pre.dp_dba));
    ji.fixed_view_mut::<3, 3>(R_POS, BG).copy_from(&(-pre.dp_dbg));
    jj.fixed_view_mut::<3, 3>(R_POS, POS).copy_from(&ri_t);

    ji.fixed_view_mut::<3, 3>(R_BA, BA)
        .copy_from(&Matrix3::identity());
    jj.fixed_view_mut::<3, 3>(R_BA, BA)
        .copy_from(&(-Matrix3::identity()));
    ji.fixed_view_mut::<3, 3>(R_BG, BG)
        .copy_from(&Matrix3::identity());
    jj.fixed_view_mut::<3, 3>(R_BG, BG)
        .copy_from(&(-Matrix3::identity()));

    (r, ji, jj)
}

/// Standard deviations of the bias prior on the first keyframe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasPrior {
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    /// m/s²
    pub accel_sigma: f64,
    /// rad/s
    pub gyro_sigma: f64,
}

impl Default for BiasPrior {
    fn default() -> Self {
        Self {
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            accel_sigma: 0.1,
            gyro_sigma: 0.01,
        }
    }
}

impl BiasPrior {
    pub fn whitened(&self, x0: &KeyframeState) -> Vector6 {
        let r = bias_prior_residual(x0, &self.accel_bias, &self.gyro_bias);
        let mut w = r;
        for i in 0..3 {
            w[i] /= self.accel_sigma;
            w[3 + i] /= self.gyro_sigma;
        }
        w
    }
}

/// `[ba − prior_ba; bg − prior_bg]`
pub fn bias_prior_residual(
    x0: &KeyframeState,
    prior_ba: &Vector3<f64>,
    prior_bg: &Vector3<f64>,
) -> Vector6 {
    let mut r = Vector6::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&(x0.ba - prior_ba));
    r.fixed_rows_mut::<3>(3).copy_from(&(x0.bg - prior_bg));
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::KeyframeState;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DT_NS: i64 = 5_000_000;

    fn stream(
        n: usize,
        gyro: impl Fn(f64) -> Vector3<f64>,
        accel: impl Fn(f64) -> Vector3<f64>,
    ) -> Vec<ImuSample> {
        (0..n)
            .map(|i| {
                let ts = i as i64 * DT_NS;
                let t = ts as f64 * 1e-9;
                ImuSample::new(ts, gyro(t), accel(t))
            })
            .collect()
    }

    fn wavy(n: usize) -> Vec<ImuSample> {
        stream(
            n,
            |t| Vector3::new(0.3 * (2.0 * t).sin(), -0.2 + 0.1 * t, 0.5 * (3.0 * t).cos()),
            |t| Vector3::new(1.0 + (4.0 * t).sin(), 0.2 * t, 9.81 + 0.3 * (2.5 * t).cos()),
        )
    }

    #[test]
    fn null_motion() {
        let s = stream(21, |_| Vector3::zeros(), |_| Vector3::zeros());
        let pre = preintegrate(&s, &Vector3::zeros(), &Vector3::zeros(), &NoiseModel::default())
            .unwrap();
        assert_eq!(pre.delta_q, UnitQuaternion::identity());
        assert_eq!(pre.delta_v, Vector3::zeros());
        assert_eq!(pre.delta_p, Vector3::zeros());
    }

    #[test]
    fn constant_acceleration_kinematics() {
        // 0.5 s at 200 Hz
        let s = stream(101, |_| Vector3::zeros(), |_| Vector3::new(1.0, 0.0, 0.0));
        let pre = preintegrate(&s, &Vector3::zeros(), &Vector3::zeros(), &NoiseModel::default())
            .unwrap();
        assert!((pre.dt_total - 0.5).abs() < 1e-12);
        assert!((pre.delta_v - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-9);
        assert!((pre.delta_p - Vector3::new(0.125, 0.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn errors() {
        let noise = NoiseModel::default();
        let z = Vector3::zeros();
        assert_eq!(
            preintegrate(&[], &z, &z, &noise).unwrap_err(),
            ImuError::EmptySegment(0)
        );
        let mut s = stream(4, |_| z, |_| z);
        s[2].timestamp_ns = s[1].timestamp_ns;
        assert_eq!(
            preintegrate(&s, &z, &z, &noise).unwrap_err(),
            ImuError::NonMonotonicTimestamps(2)
        );
    }

    #[test]
    fn bias_jacobians_match_reintegration() {
        let s = wavy(41);
        let noise = NoiseModel::default();
        let ba0 = Vector3::new(0.02, -0.01, 0.03);
        let bg0 = Vector3::new(0.001, 0.002, -0.003);
        let pre = preintegrate(&s, &ba0, &bg0, &noise).unwrap();
        let h = 1e-6;
        for c in 0..6 {
            let mut dba = Vector3::zeros();
            let mut dbg = Vector3::zeros();
            if c < 3 {
                dba[c] = h;
            } else {
                dbg[c - 3] = h;
            }
            let plus = preintegrate(&s, &(ba0 + dba), &(bg0 + dbg), &noise).unwrap();
            let minus = preintegrate(&s, &(ba0 - dba), &(bg0 - dbg), &noise).unwrap();
            let fd_q = (quat_log(&(pre.delta_q.inverse() * plus.delta_q))
                - quat_log(&(pre.delta_q.inverse() * minus.delta_q)))
                / (2.0 * h);
            let fd_v = (plus.delta_v - minus.delta_v) / (2.0 * h);
            let fd_p = (plus.delta_p - minus.delta_p) / (2.0 * h);
            let (aq, av, ap) = if c < 3 {
                (Vector3::zeros(), pre.dv_dba.column(c).into_owned(), pre.dp_dba.column(c).into_owned())
            } else {
                (
                    pre.dq_dbg.column(c - 3).into_owned(),
                    pre.dv_dbg.column(c - 3).into_owned(),
                    pre.dp_dbg.column(c - 3).into_owned(),
                )
            };
            for (fd, an) in [(fd_q, aq), (fd_v, av), (fd_p, ap)] {
                let rel = (fd - an).norm() / fd.norm().max(1e-3);
                assert!(rel < 1e-4, "column {c}: fd {fd:?} analytic {an:?}");
            }
        }
    }

    #[test]
    fn covariance_is_psd_and_grows() {
        let s = wavy(201);
        let noise = NoiseModel::default();
        let z = Vector3::zeros();
        let mut last_trace = 0.0;
        for n in [3, 21, 81, 201] {
            let pre = preintegrate(&s[..n], &z, &z, &noise).unwrap();
            let eig = pre.covariance.symmetric_eigenvalues();
            assert!(eig.min() > -1e-18);
            assert!((pre.covariance - pre.covariance.transpose()).norm() == 0.0);
            assert!(pre.covariance.trace() > last_trace);
            last_trace = pre.covariance.trace();
        }
    }

    fn refine(coarse: &[ImuSample]) -> Vec<ImuSample> {
        let mut fine = Vec::new();
        for w in coarse.windows(2) {
            fine.push(w[0]);
            fine.push(ImuSample::interpolate(&w[0], &w[1], (w[0].timestamp_ns + w[1].timestamp_ns) / 2));
        }
        fine.push(*coarse.last().unwrap());
        fine
    }

    #[test]
    fn sample_rate_refinement_converges_quadratically() {
        let z = Vector3::zeros();
        let noise = NoiseModel::default();
        let s1 = wavy(41);
        let s2 = refine(&s1);
        let s3 = refine(&s2);
        let [a, b, c] = [&s1, &s2, &s3].map(|s| preintegrate(s, &z, &z, &noise).unwrap());
        let e1 = (a.delta_v - b.delta_v).norm() + (a.delta_p - b.delta_p).norm() + a.delta_q.angle_to(&b.delta_q);
        let e2 = (b.delta_v - c.delta_v).norm() + (b.delta_p - c.delta_p).norm() + b.delta_q.angle_to(&c.delta_q);
        assert!(e1 < 1e-5, "{e1}");
        assert!(e2 < e1 / 3.0, "{e1} {e2}");
    }

    /// Integrate the full state with the same midpoint rule the
    /// preintegration uses.
    fn propagate(x: &KeyframeState, s: &[ImuSample], g: &Vector3<f64>) -> KeyframeState {
        let mut out = *x;
        for w in s.windows(2) {
            let dt = (w[1].timestamp_ns - w[0].timestamp_ns) as f64 * 1e-9;
            let q1 = out.q * quat_exp(&((0.5 * (w[0].gyro + w[1].gyro) - x.bg) * dt));
            let a = 0.5 * (out.q * (w[0].accel - x.ba) + q1 * (w[1].accel - x.ba)) + g;
            out.p += out.v * dt + 0.5 * a * dt * dt;
            out.v += a * dt;
            out.q = q1;
        }
        out.timestamp_ns = s.last().unwrap().timestamp_ns;
        out
    }

    fn random_state(rng: &mut impl Rng) -> KeyframeState {
        let mut v = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        KeyframeState {
            timestamp_ns: 0,
            q: quat_exp(&v()),
            p: v(),
            v: v(),
            ba: v() * 0.05,
            bg: v() * 0.01,
        }
    }

    #[test]
    fn residual_vanishes_on_consistent_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Vector3::new(0.0, 0.0, -9.81);
        let s = wavy(21);
        let xi = random_state(&mut rng);
        let xj = propagate(&xi, &s, &g);
        let pre = preintegrate(&s, &xi.ba, &xi.bg, &NoiseModel::default()).unwrap();
        let r = inertial_residual(&xi, &xj, &pre, &g);
        assert!(r.norm() < 1e-8, "{}", r.norm());
    }

    #[test]
    fn position_perturbation_and_bias_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = Vector3::new(0.0, 0.0, -9.81);
        let s = wavy(21);
        let xi = random_state(&mut rng);
        let xj = propagate(&xi, &s, &g);
        let pre = preintegrate(&s, &xi.ba, &xi.bg, &NoiseModel::default()).unwrap();
        let base = inertial_residual(&xi, &xj, &pre, &g);
        let mut moved = xj;
        moved.p += Vector3::new(0.1, 0.0, 0.0);
        let r = inertial_residual(&xi, &moved, &pre, &g);
        let expected = xi.q.inverse() * Vector3::new(0.1, 0.0, 0.0);
        let got = r.fixed_rows::<3>(R_POS) - base.fixed_rows::<3>(R_POS);
        assert!((got - expected).norm() < 1e-12);
        assert_eq!(r.fixed_rows::<3>(R_BA).norm(), 0.0);

        let mut biased = xj;
        biased.ba += Vector3::new(0.01, 0.02, -0.03);
        let r = inertial_residual(&xi, &biased, &pre, &g);
        assert_eq!(r.fixed_rows::<3>(R_BA).into_owned(), xi.ba - biased.ba);
        assert_eq!(r.fixed_rows::<3>(R_BG).norm(), 0.0);
    }

    #[test]
    fn bias_prior_examples() {
        let mut x = KeyframeState::default();
        let prior = BiasPrior::default();
        assert_eq!(bias_prior_residual(&x, &Vector3::zeros(), &Vector3::zeros()), Vector6::zeros());
        x.ba = Vector3::new(0.1, 0.0, 0.0);
        let r = bias_prior_residual(&x, &Vector3::zeros(), &Vector3::zeros());
        assert_eq!(r.fixed_rows::<3>(0).into_owned(), Vector3::new(0.1, 0.0, 0.0));
        let w = prior.whitened(&x);
        assert!((w.fixed_rows::<3>(0) - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn sqrt_information_whitens() {
        let s = wavy(21);
        let noise = NoiseModel::default();
        let pre = preintegrate(&s, &Vector3::zeros(), &Vector3::zeros(), &noise).unwrap();
        let w = pre.sqrt_information(&noise);
        let cov = pre.residual_covariance(&noise);
        let check = w * cov * w.transpose();
        assert!((check - Matrix15::identity()).abs().max() < 1e-6);
    }
}
