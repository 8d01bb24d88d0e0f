use std::collections::BTreeSet;

use vi_init::closedform::solve_linear_init;
use vi_init::eval::{position_rmse, sim3_align};
use vi_init::imu::PreintegratedImu;
use vi_init::monodepth::RejectionBranch;
use vi_init::pipeline::{preintegrate_window, run_initialization, FailureStage, PipelineConfig};
use vi_init::sim::{generate, Scenario, TrajectoryKind};

fn short(kind: TrajectoryKind, seed: u64) -> Scenario {
    Scenario {
        duration: 1.5,
        ..Scenario::new(kind, seed)
    }
}

#[test]
fn closed_form_recovers_noiseless_velocity_and_gravity() {
    let sim = generate(&short(TrajectoryKind::Excited, 31)).unwrap();
    let win = sim.dataset.window_at(2, 5, false).unwrap();
    let pre: Vec<PreintegratedImu> = preintegrate_window(&win, &win.noise)
        .unwrap()
        .iter()
        .map(|p| (**p).clone())
        .collect();
    let cf = solve_linear_init(&win, &pre).unwrap();
    assert!(!cf.degenerate);
    let gt = sim.truth.frame_states(2, 5);
    // Gravity in the first body frame.
    let g_true = gt[0].q.inverse() * win.gravity();
    assert!((cf.gravity_in_first - g_true).norm() < 1e-3 * g_true.norm(), "{:?}", cf.gravity_in_first);
    let est: Vec<_> = cf.keyframes.iter().map(|s| s.p).collect();
    let truth: Vec<_> = gt.iter().map(|s| s.p).collect();
    let align = sim3_align(&est, &truth).unwrap();
    assert!((align.scale - 1.0).abs() < 0.01, "{}", align.scale);
    assert!(position_rmse(&est, &truth, &align) < 1e-3);
}

#[test]
fn hover_depth_constraints_improve_scale() {
    let sim = generate(&short(TrajectoryKind::Hover, 32).noisy()).unwrap();
    let win = sim.dataset.window_at(3, 5, true).unwrap();
    let report = run_initialization(&win, &PipelineConfig::default()).unwrap();
    assert!(report.succeeded(), "{:?}", report.failure_reason);
    let truth: Vec<_> = sim.truth.frame_states(3, 5).iter().map(|s| s.p).collect();
    let scale = |states: &[vi_init::state::KeyframeState]| {
        let p: Vec<_> = states.iter().map(|s| s.p).collect();
        sim3_align(&p, &truth).unwrap().scale
    };
    let before = (scale(&report.stage1_keyframes) - 1.0).abs();
    let after = (scale(&report.keyframes) - 1.0).abs();
    assert!(after < before, "scale error {before} -> {after}");
    let (without, with) = (
        report.log_condition_without_depth.unwrap(),
        report.log_condition_with_depth.unwrap(),
    );
    assert!(with < without, "log-condition {without} -> {with}");
}

#[test]
fn inconsistent_depth_features_are_rejected() {
    let mut scenario = short(TrajectoryKind::Excited, 33);
    scenario.depth.outlier_fraction = 0.3;
    let sim = generate(&scenario).unwrap();
    let win = sim.dataset.window_at(3, 5, true).unwrap();
    let report = run_initialization(&win, &PipelineConfig::default()).unwrap();
    let depth = report.depth.as_ref().unwrap();
    assert_eq!(depth.branch, RejectionBranch::DropLeastConsistent);
    let rejected: BTreeSet<u64> = depth.rejected_feature_ids.iter().copied().collect();
    assert!(!rejected.is_empty());
    // The most inconsistent features dropped by a single pass are all
    // labeled outliers.
    assert!(rejected.iter().all(|id| sim.truth.outliers.contains(id)), "{rejected:?}");
    assert_eq!(depth.inliers + depth.outliers, depth.measurements);
}

#[test]
fn too_few_features_fail_gracefully() {
    let sim = generate(&short(TrajectoryKind::Excited, 34)).unwrap();
    let win = sim.dataset.window_at(0, 5, true).unwrap();
    let config = PipelineConfig {
        min_visual_constraints: usize::MAX,
        ..PipelineConfig::default()
    };
    let report = run_initialization(&win, &config).unwrap();
    assert!(!report.succeeded());
    assert_eq!(report.failure_stage, Some(FailureStage::VisualConstraints));
    assert!(report.keyframes.is_empty());
}

#[test]
fn invalid_configuration_is_an_error() {
    let sim = generate(&short(TrajectoryKind::Excited, 35)).unwrap();
    let win = sim.dataset.window_at(0, 5, true).unwrap();
    let config = PipelineConfig {
        sigma_min: 0.2,
        sigma_max: 0.1,
        ..PipelineConfig::default()
    };
    assert!(run_initialization(&win, &config).is_err());
}
