//! Command-line surface: `simulate`, `init`, `benchmark` and `eval`.
//!
//! Exit codes: 0 success, 1 failed initialization, 2 I/O, configuration or
//! usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{aggregate, evaluate_window, Aggregate, EvalError, WindowMetrics};
use crate::io::{load_dataset, write_csv, write_json, Dataset, IoError};
use crate::pipeline::{run_initialization, InitReport, PipelineConfig, PipelineError, SCHEMA_VERSION};
use crate::sim::{generate, mean_acceleration, read_trajectory, write_simulation, Scenario, SimError, TrajectoryKind};
use crate::state::KeyframeState;

pub const EXIT_SUCCESS: i32 = 0;
pub const EXIT_INIT_FAILED: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Usage(String),
}

#[derive(Parser, Debug)]
#[command(name = "vi-init", version, about = "Visual-inertial initialization with mono-depth constraints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn enabled(self) -> bool {
        self == OnOff::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Hover,
    Arc,
    Excited,
}

impl From<Kind> for TrajectoryKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Hover => TrajectoryKind::Hover,
            Kind::Arc => TrajectoryKind::Arc,
            Kind::Excited => TrajectoryKind::Excited,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Simulate {
        #[arg(long, value_enum, default_value = "excited")]
        kind: Kind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Scenario TOML; command-line flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seconds of data.
        #[arg(long)]
        duration: Option<f64>,
        /// Add IMU noise and bias, track noise and depth pixel noise.
        #[arg(long)]
        noisy: bool,
        /// Fraction of landmarks with temporally inconsistent depth.
        #[arg(long)]
        outlier_fraction: Option<f64>,
    },
    /// Initialize one window and write the report as JSON.
    Init {
        #[arg(long)]
        dataset: PathBuf,
        /// Timestamp (ns) of the first keyframe; defaults to the first frame.
        #[arg(long)]
        start: Option<i64>,
        #[arg(long)]
        keyframes: Option<usize>,
        #[arg(long, value_enum)]
        use_depth: Option<OnOff>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Initialize evenly spaced windows across a dataset.
    Benchmark {
        /// Dataset directory; a scenario is simulated from `--kind` and
        /// `--seed` when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "hover")]
        kind: Kind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5, value_parser = parse_window_size)]
        keyframes: usize,
        #[arg(long, value_enum, default_value = "on")]
        use_depth: OnOff,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        out_json: Option<PathBuf>,
    },
    /// Compare an estimate (report JSON or trajectory CSV) to ground truth.
    Eval {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        groundtruth: PathBuf,
        #[arg(long, default_value_t = crate::sim::STANDARD_GRAVITY)]
        gravity: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_window_size(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n @ (5 | 10)) => Ok(n),
        _ => Err(format!("window size must be 5 or 10, got {s}")),
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_SUCCESS };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn execute(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Simulate {
            kind,
            seed,
            out,
            config,
            duration,
            noisy,
            outlier_fraction,
        } => {
            let mut scenario: Scenario = match &config {
                Some(p) => parse_toml(p)?,
                None => Scenario::default(),
            };
            scenario.kind = kind.into();
            scenario.seed = seed;
            if let Some(d) = duration {
                scenario.duration = d;
            }
            if noisy {
                scenario = scenario.noisy();
            }
            if let Some(f) = outlier_fraction {
                scenario.depth.outlier_fraction = f;
            }
            let sim = generate(&scenario)?;
            write_simulation(&out, &sim)?;
            Ok(EXIT_SUCCESS)
        }
        Command::Init {
            dataset,
            start,
            keyframes,
            use_depth,
            config,
            out,
        } => {
            let config = load_config(config.as_deref(), keyframes, use_depth)?;
            let data = load_dataset(&dataset)?;
            let start = match start {
                Some(ns) => ns,
                None => data.frames.first().map(|f| f.timestamp_ns).unwrap_or_default(),
            };
            let window = data.window(start, config.keyframes, config.use_depth)?;
            let report = run_initialization(&window, &config)?;
            let json = to_json(&report);
            match out {
                Some(p) => write_text(&p, &json)?,
                None => println!("{json}"),
            }
            Ok(if report.succeeded() { EXIT_SUCCESS } else { EXIT_INIT_FAILED })
        }
        Command::Benchmark {
            dataset,
            kind,
            seed,
            keyframes,
            use_depth,
            config,
            out_csv,
            out_json,
        } => {
            let config = load_config(config.as_deref(), Some(keyframes), Some(use_depth))?;
            let (data, truth) = match &dataset {
                Some(root) => {
                    let truth_path = root.join("groundtruth.csv");
                    let truth = if truth_path.exists() { Some(read_trajectory(&truth_path)?) } else { None };
                    (load_dataset(root)?, truth)
                }
                None => {
                    let sim = generate(&Scenario::new(kind.into(), seed))?;
                    (sim.dataset, Some(sim.truth.states))
                }
            };
            let result = benchmark(&data, truth.as_deref(), &config);
            write_csv(&out_csv, &result.rows)?;
            if let Some(p) = out_json {
                let summary = BenchmarkSummary {
                    schema_version: SCHEMA_VERSION,
                    seed,
                    keyframes: config.keyframes,
                    use_depth: config.use_depth,
                    stride_s: result.stride_s,
                    attempts: result.rows.len(),
                    successes: result.rows.iter().filter(|r| r.status == "success").count(),
                    mean_log_condition: mean(result.rows.iter().filter_map(|r| r.log_condition)),
                    aggregate: result.aggregate,
                };
                write_json(&p, &summary)?;
            }
            Ok(EXIT_SUCCESS)
        }
        Command::Eval {
            estimate,
            groundtruth,
            gravity,
            out,
        } => {
            let est = read_estimate(&estimate)?;
            let truth = read_trajectory(&groundtruth)?;
            let metrics = evaluate_against_truth(&est, &truth, gravity)?;
            let json = to_json(&metrics);
            match out {
                Some(p) => write_text(&p, &json)?,
                None => println!("{json}"),
            }
            Ok(EXIT_SUCCESS)
        }
    }
}

fn parse_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| IoError::ConfigParse(e.to_string()).into())
}

/// Pipeline configuration from an optional TOML file with command-line
/// overrides applied.
pub fn load_config(
    path: Option<&Path>,
    keyframes: Option<usize>,
    use_depth: Option<OnOff>,
) -> Result<PipelineConfig, CliError> {
    let mut config: PipelineConfig = match path {
        Some(p) => parse_toml(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(k) = keyframes {
        config.keyframes = k;
    }
    if let Some(u) = use_depth {
        config.use_depth = u.enabled();
    }
    config.validate()?;
    Ok(config)
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize")
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_estimate(path: &Path) -> Result<Vec<KeyframeState>, CliError> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(|source| IoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let report: InitReport = serde_json::from_str(&text).map_err(|e| IoError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if report.keyframes.is_empty() {
            return Err(CliError::Usage("report holds no keyframe estimates".into()));
        }
        Ok(report.keyframes)
    } else {
        Ok(read_trajectory(path)?)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Ground-truth states at the estimate's timestamps and the mean
/// acceleration magnitude over the spanned interval.
fn truth_for(est: &[KeyframeState], truth: &[KeyframeState]) -> Result<(Vec<KeyframeState>, f64), CliError> {
    let mut gt = Vec::with_capacity(est.len());
    for e in est {
        let i = truth
            .binary_search_by_key(&e.timestamp_ns, |s| s.timestamp_ns)
            .map_err(|_| CliError::Usage(format!("no ground truth at timestamp {}", e.timestamp_ns)))?;
        gt.push(truth[i]);
    }
    let (t0, t1) = (est[0].timestamp_ns, est[est.len() - 1].timestamp_ns);
    let span: Vec<&KeyframeState> = truth
        .iter()
        .filter(|s| s.timestamp_ns >= t0 && s.timestamp_ns <= t1)
        .collect();
    let times: Vec<f64> = span.iter().map(|s| (s.timestamp_ns - t0) as f64 * 1e-9).collect();
    let positions: Vec<_> = span.iter().map(|s| s.p).collect();
    Ok((gt, mean_acceleration(&times, &positions)))
}

pub fn evaluate_against_truth(
    est: &[KeyframeState],
    truth: &[KeyframeState],
    gravity: f64,
) -> Result<WindowMetrics, CliError> {
    if est.is_empty() {
        return Err(CliError::Usage("empty estimate".into()));
    }
    let (gt, accel) = truth_for(est, truth)?;
    Ok(evaluate_window(est, &gt, accel, gravity)?)
}

/// One benchmark attempt. Metric columns are empty for failed windows or
/// when no ground truth is available.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub window: usize,
    pub start_ns: i64,
    pub status: String,
    pub failure: Option<String>,
    pub scale: Option<f64>,
    pub scale_error_pct: Option<f64>,
    pub position_rmse_m: Option<f64>,
    pub gravity_error_deg: Option<f64>,
    pub mean_acceleration: Option<f64>,
    pub log_condition: Option<f64>,
    pub log_condition_without_depth: Option<f64>,
    pub reprojection_rms_px: Option<f64>,
    pub depth_inliers: Option<usize>,
    pub depth_outliers: Option<usize>,
    pub stage1_iterations: Option<usize>,
    pub stage2_iterations: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub keyframes: usize,
    pub use_depth: bool,
    pub stride_s: f64,
    pub attempts: usize,
    pub successes: usize,
    /// Mean log-condition of the final problem over windows that report one.
    pub mean_log_condition: Option<f64>,
    pub aggregate: Aggregate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkResult {
    pub stride_s: f64,
    pub rows: Vec<BenchmarkRow>,
    pub aggregate: Aggregate,
}

/// Window stride: 0.8 s for 5 keyframes, scaled proportionally otherwise.
pub fn window_stride_s(keyframes: usize) -> f64 {
    0.8 * keyframes as f64 / 5.0
}

/// Run one initialization every stride across the dataset. The number of
/// attempts is `floor(span / stride)` regardless of their outcome; rows are
/// ordered by window start.
pub fn benchmark(data: &Dataset, truth: Option<&[KeyframeState]>, config: &PipelineConfig) -> BenchmarkResult {
    let stride_s = window_stride_s(config.keyframes);
    let attempts = (data.span() / stride_s + 1e-9).floor() as usize;
    let t0 = data.frames.first().map(|f| f.timestamp_ns).unwrap_or_default();
    let stride_ns = (stride_s * 1e9).round() as i64;
    let gravity = data.calibration.gravity_magnitude;

    let results: Vec<(BenchmarkRow, Option<WindowMetrics>)> = (0..attempts)
        .into_par_iter()
        .map(|i| {
            let target = t0 + i as i64 * stride_ns;
            // First frame at or after the nominal start.
            let start = data.frames.partition_point(|f| f.timestamp_ns < target);
            let start_ns = data.frames.get(start).map(|f| f.timestamp_ns).unwrap_or(target);
            let mut row = BenchmarkRow {
                window: i,
                start_ns,
                status: "failed".into(),
                failure: None,
                scale: None,
                scale_error_pct: None,
                position_rmse_m: None,
                gravity_error_deg: None,
                mean_acceleration: None,
                log_condition: None,
                log_condition_without_depth: None,
                reprojection_rms_px: None,
                depth_inliers: None,
                depth_outliers: None,
                stage1_iterations: None,
                stage2_iterations: None,
            };
            let report = match data
                .window_at(start, config.keyframes, config.use_depth)
                .map_err(CliError::from)
                .and_then(|w| run_initialization(&w, config).map_err(CliError::from))
            {
                Ok(r) => r,
                Err(e) => {
                    row.failure = Some(e.to_string());
                    return (row, None);
                }
            };
            fill_row(&mut row, &report);
            if !report.succeeded() {
                return (row, None);
            }
            let metrics = truth.map(|t| evaluate_against_truth(&report.keyframes, t, gravity));
            match metrics {
                Some(Ok(m)) => {
                    row.scale = Some(m.scale);
                    row.scale_error_pct = m.scale_error_pct;
                    row.position_rmse_m = Some(m.position_rmse_m);
                    row.gravity_error_deg = Some(m.gravity_error_deg);
                    row.mean_acceleration = Some(m.mean_acceleration);
                    (row, Some(m))
                }
                Some(Err(e)) => {
                    row.failure = Some(e.to_string());
                    (row, None)
                }
                None => (row, None),
            }
        })
        .collect();
    let metrics: Vec<Option<WindowMetrics>> = results.iter().map(|(_, m)| *m).collect();
    BenchmarkResult {
        stride_s,
        rows: results.into_iter().map(|(r, _)| r).collect(),
        aggregate: aggregate(&metrics),
    }
}

fn fill_row(row: &mut BenchmarkRow, report: &InitReport) {
    row.status = if report.succeeded() { "success" } else { "failed" }.into();
    row.failure = report.failure_reason.clone();
    row.log_condition_without_depth = report.log_condition_without_depth;
    row.log_condition = report.log_condition_with_depth.or(report.log_condition_without_depth);
    row.reprojection_rms_px = report.reprojection_rms_px;
    row.depth_inliers = report.depth.as_ref().map(|d| d.inliers);
    row.depth_outliers = report.depth.as_ref().map(|d| d.outliers);
    row.stage1_iterations = report.stage1.as_ref().map(|s| s.iterations);
    row.stage2_iterations = report.stage2.as_ref().map(|s| s.iterations);
}
