use std::path::Path;

use vi_init::cli::{self, BenchmarkRow, BenchmarkSummary, EXIT_ERROR, EXIT_INIT_FAILED, EXIT_SUCCESS};
use vi_init::io::{load_dataset, load_window, read_csv, IoError};
use vi_init::pipeline::{run_initialization, InitReport, PipelineConfig};
use vi_init::sim::{generate, read_trajectory, write_simulation, Scenario, TrajectoryKind};

fn short(kind: TrajectoryKind, seed: u64) -> Scenario {
    Scenario {
        duration: 1.5,
        ..Scenario::new(kind, seed)
    }
}

fn path_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulator_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let sim = generate(&short(TrajectoryKind::Excited, 21).noisy()).unwrap();
    write_simulation(dir.path(), &sim).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded, sim.dataset);

    let start = sim.dataset.frames[2].timestamp_ns;
    let from_disk = load_window(dir.path(), start, 5, true).unwrap();
    let in_memory = sim.dataset.window(start, 5, true).unwrap();
    assert_eq!(from_disk, in_memory);

    assert_eq!(read_trajectory(&dir.path().join("groundtruth.csv")).unwrap(), sim.truth.states);
}

#[test]
fn window_past_the_end_is_rejected() {
    let sim = generate(&short(TrajectoryKind::Hover, 22)).unwrap();
    let n = sim.dataset.frames.len();
    assert!(matches!(
        sim.dataset.window_at(n - 3, 5, false),
        Err(IoError::WindowOutOfRange { count: 5, .. })
    ));
    assert!(matches!(
        sim.dataset.window(-1, 5, false),
        Err(IoError::WindowOutOfRange { .. })
    ));
}

#[test]
fn five_keyframes_span_half_a_second_of_data() {
    let sim = generate(&short(TrajectoryKind::Excited, 23)).unwrap();
    let win = sim.dataset.window_at(0, 5, true).unwrap();
    let times = win.keyframe_times();
    assert!((times[4] - 0.4).abs() < 1e-9);
    assert!((win.data_span() - 0.5).abs() < 1e-9, "{}", win.data_span());
}

#[test]
fn missing_depth_map_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let sim = generate(&short(TrajectoryKind::Excited, 24)).unwrap();
    write_simulation(dir.path(), &sim).unwrap();
    let victim = sim.dataset.frames[1].timestamp_ns;
    std::fs::remove_file(dir.path().join("depth").join(format!("{victim}.pfm"))).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(IoError::MissingDepthMap(t)) if t == victim));
    assert!(matches!(
        load_window(dir.path(), sim.dataset.frames[0].timestamp_ns, 5, true),
        Err(IoError::MissingDepthMap(t)) if t == victim
    ));
}

#[test]
fn simulate_then_init_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let out = dir.path().join("report.json");
    let code = cli::run(["vi-init", "simulate", "--kind", "hover", "--seed", "7", "--duration", "2", "--out", path_arg(&data)]);
    assert_eq!(code, EXIT_SUCCESS);
    let code = cli::run([
        "vi-init",
        "init",
        "--dataset",
        path_arg(&data),
        "--keyframes",
        "5",
        "--use-depth",
        "on",
        "--out",
        path_arg(&out),
    ]);
    assert_eq!(code, EXIT_SUCCESS);
    let report: InitReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report.schema_version, 1);
    assert!(report.stage1.is_some() && report.stage2.is_some());

    let metrics = dir.path().join("metrics.json");
    let code = cli::run([
        "vi-init",
        "eval",
        "--estimate",
        path_arg(&out),
        "--groundtruth",
        path_arg(&data.join("groundtruth.csv")),
        "--out",
        path_arg(&metrics),
    ]);
    assert_eq!(code, EXIT_SUCCESS);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert!(m["position_rmse_m"].as_f64().unwrap() < 0.05);
}

#[test]
fn init_without_depth_matches_library_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let sim = generate(&short(TrajectoryKind::Arc, 25)).unwrap();
    write_simulation(dir.path(), &sim).unwrap();
    let out = dir.path().join("r.json");
    let code = cli::run([
        "vi-init",
        "init",
        "--dataset",
        path_arg(dir.path()),
        "--use-depth",
        "off",
        "--out",
        path_arg(&out),
    ]);
    assert_eq!(code, EXIT_SUCCESS);
    let from_cli: InitReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let config = PipelineConfig {
        use_depth: false,
        ..PipelineConfig::default()
    };
    let direct = run_initialization(&sim.dataset.window_at(0, 5, false).unwrap(), &config).unwrap();
    assert_eq!(from_cli, direct);
    assert!(from_cli.stage2.is_none());
}

#[test]
fn failed_initialization_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let sim = generate(&short(TrajectoryKind::Excited, 26)).unwrap();
    write_simulation(dir.path(), &sim).unwrap();
    let config = dir.path().join("strict.toml");
    std::fs::write(&config, "min_visual_constraints = 1000000\n").unwrap();
    let code = cli::run([
        "vi-init",
        "init",
        "--dataset",
        path_arg(dir.path()),
        "--config",
        path_arg(&config),
        "--out",
        path_arg(&dir.path().join("r.json")),
    ]);
    assert_eq!(code, EXIT_INIT_FAILED);
}

#[test]
fn usage_and_io_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli::run(["vi-init", "frobnicate"]), EXIT_ERROR);
    assert_eq!(cli::run(["vi-init", "init", "--dataset", path_arg(&dir.path().join("missing"))]), EXIT_ERROR);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "duration = \"five\"\n").unwrap();
    assert_eq!(
        cli::run(["vi-init", "simulate", "--out", path_arg(&dir.path().join("x")), "--config", path_arg(&bad)]),
        EXIT_ERROR
    );
    assert_eq!(
        cli::run(["vi-init", "benchmark", "--keyframes", "7", "--out-csv", path_arg(&dir.path().join("b.csv"))]),
        EXIT_ERROR
    );
}

#[test]
fn benchmark_emits_one_row_per_attempt() {
    let dir = tempfile::tempdir().unwrap();
    let mut scenario = Scenario::new(TrajectoryKind::Excited, 27);
    scenario.duration = 3.3;
    let sim = generate(&scenario).unwrap();
    write_simulation(&dir.path().join("d"), &sim).unwrap();
    // Every window fails the visual-constraint check, and still gets a row.
    let config = dir.path().join("strict.toml");
    std::fs::write(&config, "min_visual_constraints = 1000000\n").unwrap();
    let csv = dir.path().join("b.csv");
    let json = dir.path().join("b.json");
    let code = cli::run([
        "vi-init",
        "benchmark",
        "--dataset",
        path_arg(&dir.path().join("d")),
        "--config",
        path_arg(&config),
        "--out-csv",
        path_arg(&csv),
        "--out-json",
        path_arg(&json),
    ]);
    assert_eq!(code, EXIT_SUCCESS);
    let rows: Vec<BenchmarkRow> = read_csv(&csv).unwrap();
    let expected = (sim.dataset.span() / 0.8).floor() as usize;
    assert_eq!(rows.len(), expected);
    assert!(rows.iter().all(|r| r.status == "failed" && r.failure.is_some()));
    assert!(rows.windows(2).all(|w| w[0].start_ns < w[1].start_ns));
    let summary: BenchmarkSummary = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(summary.attempts, expected);
    assert_eq!(summary.successes, 0);
    assert_eq!(summary.aggregate.evaluated, 0);
}
