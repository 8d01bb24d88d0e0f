//! End-to-end initialization of one window.
//!
//! Order: zero-bias preintegration, linear closed form, visual-inertial
//! bundle adjustment without depth (stage 1), depth measurement weighting
//! and outlier rejection at the stage-1 solution, then the full problem
//! with depth constraints (stage 2).

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closedform::{solve_linear_init, ClosedFormError};
use crate::imu::{preintegrate, BiasPrior, ImuError, NoiseModel, PreintegratedImu};
use crate::monodepth::{
    depth_residual, reject_outliers, DepthMeasurement, EdgeWeightConfig, EdgeWeighter, RejectionBranch,
    ResidualEntry, ScaleShiftPrior, DEFAULT_SIGMA_MAX, DEFAULT_SIGMA_MIN,
};
use crate::solver::problem::Parameters;
use crate::solver::{
    hessian_condition, solve, FeatureParam, Gauge, Problem, ResidualBlock, SolveConfig, SolveReport,
};
use crate::state::{feature_point_in_camera, InitWindow, KeyframeState, ScaleShift, StateError};
use crate::vision::{DEFAULT_PIXEL_SIGMA, DEFAULT_VISUAL_HUBER_DELTA};

pub const SCHEMA_VERSION: u32 = 1;
/// Huber threshold on the log-ratio depth residual.
pub const DEFAULT_DEPTH_HUBER_DELTA: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    InvalidWindow(#[from] StateError),
    #[error(transparent)]
    Imu(#[from] ImuError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Add mono-depth constraints when the window carries depth maps.
    pub use_depth: bool,
    /// Window length used by the command-line tools.
    pub keyframes: usize,
    pub solver: SolveConfig,
    pub pixel_sigma: f64,
    pub visual_huber_delta: f64,
    pub depth_huber_delta: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub edge: EdgeWeightConfig,
    pub scale_shift_prior: ScaleShiftPrior,
    pub bias_prior: BiasPrior,
    /// Overrides the calibration's IMU noise when set.
    pub noise: Option<NoiseModel>,
    /// Reprojection RMS (px) above which an initialization is unsuccessful.
    pub max_reprojection_rms: f64,
    /// Minimum number of reprojection residuals that must remain valid.
    pub min_visual_constraints: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            use_depth: true,
            keyframes: 5,
            solver: SolveConfig::default(),
            pixel_sigma: DEFAULT_PIXEL_SIGMA,
            visual_huber_delta: DEFAULT_VISUAL_HUBER_DELTA,
            depth_huber_delta: DEFAULT_DEPTH_HUBER_DELTA,
            sigma_min: DEFAULT_SIGMA_MIN,
            sigma_max: DEFAULT_SIGMA_MAX,
            edge: EdgeWeightConfig::default(),
            scale_shift_prior: ScaleShiftPrior::default(),
            bias_prior: BiasPrior::default(),
            noise: None,
            max_reprojection_rms: 2.0,
            min_visual_constraints: 20,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.keyframes < 2 {
            return bad("keyframes must be at least 2");
        }
        if !(self.pixel_sigma > 0.0 && self.visual_huber_delta > 0.0 && self.depth_huber_delta > 0.0) {
            return bad("sigmas and Huber thresholds must be positive");
        }
        if !(self.sigma_min >= 0.0 && self.sigma_max >= self.sigma_min) {
            return bad("need 0 <= sigma_min <= sigma_max");
        }
        if !(self.scale_shift_prior.scale_sigma > 0.0 && self.scale_shift_prior.shift_sigma > 0.0) {
            return bad("scale/shift prior sigmas must be positive");
        }
        if !(self.bias_prior.accel_sigma > 0.0 && self.bias_prior.gyro_sigma > 0.0) {
            return bad("bias prior sigmas must be positive");
        }
        if let Some(n) = &self.noise {
            n.validate().map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStatus {
    Success,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureStage {
    ClosedForm,
    VisualConstraints,
    Stage1,
    Stage2,
    Reprojection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleShiftReport {
    pub s: f64,
    pub a: f64,
    pub b: f64,
}

impl From<&ScaleShift> for ScaleShiftReport {
    fn from(ss: &ScaleShift) -> Self {
        Self {
            s: ss.s,
            a: ss.scale(),
            b: ss.b,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    /// Measurements with a usable depth sample.
    pub measurements: usize,
    pub inliers: usize,
    pub outliers: usize,
    pub rejected_feature_ids: Vec<u64>,
    pub branch: RejectionBranch,
    pub cut: Option<f64>,
    pub mean_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub schema_version: u32,
    pub status: InitStatus,
    pub failure_stage: Option<FailureStage>,
    pub failure_reason: Option<String>,
    pub keyframes: Vec<KeyframeState>,
    pub stage1_keyframes: Vec<KeyframeState>,
    pub features: Vec<FeatureParam>,
    pub scale_shifts: Vec<ScaleShiftReport>,
    pub stage1: Option<SolveReport>,
    pub stage2: Option<SolveReport>,
    pub depth: Option<DepthReport>,
    pub log_condition_without_depth: Option<f64>,
    pub log_condition_with_depth: Option<f64>,
    pub closed_form_degenerate: bool,
    pub closed_form_log10_condition: Option<f64>,
    pub visual_constraints: usize,
    pub reprojection_rms_px: Option<f64>,
}

impl InitReport {
    fn failed(stage: FailureStage, reason: String) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            status: InitStatus::Failed,
            failure_stage: Some(stage),
            failure_reason: Some(reason),
            keyframes: Vec::new(),
            stage1_keyframes: Vec::new(),
            features: Vec::new(),
            scale_shifts: Vec::new(),
            stage1: None,
            stage2: None,
            depth: None,
            log_condition_without_depth: None,
            log_condition_with_depth: None,
            closed_form_degenerate: false,
            closed_form_log10_condition: None,
            visual_constraints: 0,
            reprojection_rms_px: None,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.status == InitStatus::Success
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn log_condition(problem: &mut Problem) -> Option<f64> {
    match hessian_condition(problem) {
        Ok(c) => finite(c),
        Err(_) => None,
    }
}

/// Preintegrate every segment at zero bias.
pub fn preintegrate_window(window: &InitWindow, noise: &NoiseModel) -> Result<Vec<Arc<PreintegratedImu>>, ImuError> {
    window
        .imu_segments
        .iter()
        .map(|seg| preintegrate(seg, &Vector3::zeros(), &Vector3::zeros(), noise).map(Arc::new))
        .collect()
}

/// Depth measurements for every observation of the given features that
/// lands inside its keyframe's depth map with a positive value.
pub fn depth_measurements(
    window: &InitWindow,
    feature_indices: &[usize],
    edge: &EdgeWeightConfig,
) -> Vec<DepthMeasurement> {
    let per_kf: Vec<Vec<DepthMeasurement>> = (0..window.len())
        .into_par_iter()
        .map(|k| {
            let slot = &window.keyframes[k];
            let Some(depth) = &slot.depth else { return Vec::new() };
            let Ok(weighter) = EdgeWeighter::new(slot.image.as_ref(), depth, *edge) else {
                return Vec::new();
            };
            let mut out = Vec::new();
            for (fi, &wi) in feature_indices.iter().enumerate() {
                let Some(obs) = window.features[wi].observation_in(k) else { continue };
                let (Ok(d), Ok(lambda)) = (depth.sample(&obs.pixel), weighter.weight(&obs.pixel)) else {
                    continue;
                };
                if d > 0.0 && d.is_finite() {
                    out.push(DepthMeasurement {
                        feature: fi,
                        keyframe: k,
                        d,
                        lambda,
                    });
                }
            }
            out
        })
        .collect();
    let mut all: Vec<DepthMeasurement> = per_kf.into_iter().flatten().collect();
    all.sort_by_key(|m| (m.feature, m.keyframe));
    all
}

/// Depth residuals at the given parameters under the prior scale/shift.
pub fn residual_table(
    params: &Parameters,
    measurements: &[DepthMeasurement],
    extrinsics: &crate::geometry::Pose,
) -> Vec<ResidualEntry> {
    let prior = ScaleShift::prior();
    measurements
        .iter()
        .filter_map(|m| {
            let f = &params.features[m.feature];
            let omega = if f.anchor == m.keyframe {
                crate::state::anchor_point(&f.uvw).ok()?.z
            } else {
                feature_point_in_camera(
                    &f.uvw,
                    &params.keyframes[f.anchor].pose(),
                    &params.keyframes[m.keyframe].pose(),
                    extrinsics,
                )
                .ok()?
                .z
            };
            if omega <= 0.0 {
                return None;
            }
            Some(ResidualEntry {
                feature: m.feature,
                keyframe: m.keyframe,
                residual: depth_residual(m.d, &prior, omega).value,
            })
        })
        .collect()
}

/// Stage-1 residuals: consecutive inertial factors, a bias prior on the
/// first keyframe, and every observation of the selected features.
pub fn visual_inertial_blocks(
    window: &InitWindow,
    pre: &[Arc<PreintegratedImu>],
    noise: &NoiseModel,
    feature_indices: &[usize],
    config: &PipelineConfig,
) -> Vec<ResidualBlock> {
    let mut blocks = Vec::new();
    for (k, p) in pre.iter().enumerate() {
        blocks.push(ResidualBlock::Inertial {
            from: k,
            to: k + 1,
            sqrt_information: p.sqrt_information(noise),
            preintegrated: p.clone(),
        });
    }
    blocks.push(ResidualBlock::BiasPrior {
        keyframe: 0,
        prior: config.bias_prior,
    });
    for (fi, &wi) in feature_indices.iter().enumerate() {
        for obs in &window.features[wi].observations {
            blocks.push(ResidualBlock::Reprojection {
                feature: fi,
                keyframe: obs.keyframe,
                pixel: obs.pixel,
                sigma: config.pixel_sigma,
                huber_delta: config.visual_huber_delta,
            });
        }
    }
    blocks
}

/// Depth residuals for the inlier measurements plus a scale/shift prior on
/// every keyframe that keeps at least one of them.
pub fn depth_blocks(
    measurements: &[DepthMeasurement],
    inliers: &BTreeSet<(usize, usize)>,
    num_keyframes: usize,
    config: &PipelineConfig,
) -> Vec<ResidualBlock> {
    let mut blocks = Vec::new();
    let mut with_inliers = vec![false; num_keyframes];
    for m in measurements.iter().filter(|m| inliers.contains(&(m.feature, m.keyframe))) {
        with_inliers[m.keyframe] = true;
        blocks.push(ResidualBlock::Depth {
            feature: m.feature,
            keyframe: m.keyframe,
            d: m.d,
            lambda: m.lambda,
            huber_delta: config.depth_huber_delta,
        });
    }
    for (k, _) in with_inliers.iter().enumerate().filter(|(_, used)| **used) {
        blocks.push(ResidualBlock::ScaleShiftPrior {
            keyframe: k,
            prior: config.scale_shift_prior,
        });
    }
    blocks
}

pub fn run_initialization(window: &InitWindow, config: &PipelineConfig) -> Result<InitReport, PipelineError> {
    window.validate()?;
    config.validate()?;
    let noise = config.noise.unwrap_or(window.noise);
    let pre = preintegrate_window(window, &noise)?;
    let plain: Vec<PreintegratedImu> = pre.iter().map(|p| (**p).clone()).collect();

    let cf = match solve_linear_init(window, &plain) {
        Ok(cf) => cf,
        Err(ClosedFormError::Imu(e)) => return Err(PipelineError::Imu(e)),
        Err(e) => return Ok(InitReport::failed(FailureStage::ClosedForm, e.to_string())),
    };

    let blocks = visual_inertial_blocks(window, &pre, &noise, &cf.feature_indices, config);
    let visual = blocks
        .iter()
        .filter(|b| matches!(b, ResidualBlock::Reprojection { .. }))
        .count();
    let mut report = InitReport::failed(FailureStage::VisualConstraints, String::new());
    report.closed_form_degenerate = cf.degenerate;
    report.closed_form_log10_condition = finite(cf.condition.log10());
    report.visual_constraints = visual;
    if visual < config.min_visual_constraints {
        report.failure_reason = Some(format!(
            "{visual} visual constraints, need {}",
            config.min_visual_constraints
        ));
        return Ok(report);
    }

    let params = Parameters {
        keyframes: cf.keyframes.clone(),
        features: cf.features.clone(),
        scale_shifts: cf.scale_shifts.clone(),
    };
    let gravity = window.gravity();
    let mut stage1 = Problem::new(
        params,
        blocks.clone(),
        window.extrinsics,
        window.camera,
        gravity,
        Gauge::FirstPositionYaw,
    )
    .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
    let stage1_report = match solve(&mut stage1, &config.solver) {
        Ok(r) => r,
        Err(e) => {
            report.failure_stage = Some(FailureStage::Stage1);
            report.failure_reason = Some(e.to_string());
            return Ok(report);
        }
    };
    let surviving = visual - count_invalid_visual(&stage1);
    report.visual_constraints = surviving;
    report.stage1_keyframes = stage1.params.keyframes.clone();
    report.stage1 = Some(stage1_report);
    if surviving < config.min_visual_constraints {
        report.failure_stage = Some(FailureStage::Stage1);
        report.failure_reason = Some(format!("{surviving} visual constraints survive stage 1"));
        return Ok(report);
    }
    report.log_condition_without_depth = log_condition(&mut stage1);

    let final_problem = if config.use_depth && window.has_depth() {
        let measurements = depth_measurements(window, &cf.feature_indices, &config.edge);
        let table = residual_table(&stage1.params, &measurements, &window.extrinsics);
        let outcome = reject_outliers(&table, config.sigma_min, config.sigma_max);
        let mut blocks2 = blocks;
        blocks2.extend(depth_blocks(&measurements, &outcome.inliers, window.len(), config));
        let weight_sum: f64 = measurements.iter().map(|m| m.lambda).sum();
        let inliers = blocks2
            .iter()
            .filter(|b| matches!(b, ResidualBlock::Depth { .. }))
            .count();
        report.depth = Some(DepthReport {
            measurements: measurements.len(),
            inliers,
            outliers: measurements.len() - inliers,
            rejected_feature_ids: outcome
                .rejected_features()
                .iter()
                .map(|&f| stage1.params.features[f].id)
                .collect(),
            branch: outcome.branch,
            cut: outcome.cut,
            mean_weight: if measurements.is_empty() { 0.0 } else { weight_sum / measurements.len() as f64 },
        });

        let mut stage2 = Problem::new(
            stage1.params.clone(),
            blocks2,
            window.extrinsics,
            window.camera,
            gravity,
            Gauge::FirstPositionYaw,
        )
        .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        match solve(&mut stage2, &config.solver) {
            Ok(r) => report.stage2 = Some(r),
            Err(e) => {
                report.failure_stage = Some(FailureStage::Stage2);
                report.failure_reason = Some(e.to_string());
                return Ok(report);
            }
        }
        report.log_condition_with_depth = log_condition(&mut stage2);
        stage2
    } else {
        stage1
    };

    report.keyframes = final_problem.params.keyframes.clone();
    report.features = final_problem.params.features.clone();
    report.scale_shifts = final_problem.params.scale_shifts.iter().map(ScaleShiftReport::from).collect();
    report.reprojection_rms_px = final_problem.reprojection_rms();
    match report.reprojection_rms_px {
        Some(rms) if rms < config.max_reprojection_rms => {
            report.status = InitStatus::Success;
            report.failure_stage = None;
            report.failure_reason = None;
        }
        rms => {
            report.failure_stage = Some(FailureStage::Reprojection);
            report.failure_reason = Some(format!(
                "reprojection RMS {:?} px, threshold {}",
                rms, config.max_reprojection_rms
            ));
        }
    }
    Ok(report)
}

fn count_invalid_visual(problem: &Problem) -> usize {
    (0..problem.blocks.len())
        .filter(|&i| matches!(problem.blocks[i], ResidualBlock::Reprojection { .. }))
        .filter(|&i| problem.evaluate_block(i, &problem.params, false).is_none())
        .count()
}

