//! On-disk dataset layout, calibration and windowing.
//!
//! ```text
//! root/
//!   calib.toml
//!   imu.csv          timestamp_ns,gx,gy,gz,ax,ay,az
//!   frames.csv       timestamp_ns
//!   tracks.csv       feature_id,keyframe_ts_ns,px,py
//!   depth/<ts>.pfm   relative inverse depth (optional)
//!   images/<ts>.pgm  8-bit grayscale (optional)
//! ```
//!
//! Floats are written in shortest round-trip form, so reading back a
//! dataset this module wrote is lossless.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PinholeCamera, Pose};
use crate::imu::{ImuSample, NoiseModel};
use crate::monodepth::{DepthMap, GrayImage};
use crate::state::{FeatureTrack, InitWindow, KeyframeSlot, Observation};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("calibration: {0}")]
    CalibrationParse(String),
    #[error("config: {0}")]
    ConfigParse(String),
    #[error("no depth map for keyframe {0}")]
    MissingDepthMap(i64),
    #[error("timestamps not strictly increasing in {0}")]
    NonMonotonicTimestamps(String),
    #[error("window of {count} keyframes from {start_ns} exceeds the dataset")]
    WindowOutOfRange { start_ns: i64, count: usize },
    #[error("track timestamp {0} does not match any frame")]
    UnknownKeyframe(i64),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |e| IoError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Sensor calibration shared by every window of a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub camera: PinholeCamera,
    /// Camera-to-IMU transform.
    pub extrinsics: Pose,
    pub noise: NoiseModel,
    pub gravity_magnitude: f64,
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    camera: PinholeCamera,
    extrinsics: ExtrinsicsFile,
    imu: NoiseModel,
    gravity_magnitude: f64,
}

#[derive(Serialize, Deserialize)]
struct ExtrinsicsFile {
    /// `[w, x, y, z]`
    rotation: [f64; 4],
    translation: [f64; 3],
}

impl Calibration {
    pub fn to_toml(&self) -> String {
        let q = self.extrinsics.rotation;
        let file = CalibrationFile {
            camera: self.camera,
            extrinsics: ExtrinsicsFile {
                rotation: [q.w, q.i, q.j, q.k],
                translation: self.extrinsics.translation.into(),
            },
            imu: self.noise,
            gravity_magnitude: self.gravity_magnitude,
        };
        toml::to_string(&file).expect("calibration serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, IoError> {
        let file: CalibrationFile = toml::from_str(text).map_err(|e| IoError::CalibrationParse(e.to_string()))?;
        file.camera
            .validate()
            .map_err(|e| IoError::CalibrationParse(e.to_string()))?;
        file.imu
            .validate()
            .map_err(|e| IoError::CalibrationParse(e.to_string()))?;
        if !(file.gravity_magnitude > 0.0) {
            return Err(IoError::CalibrationParse("gravity_magnitude must be positive".into()));
        }
        let [w, x, y, z] = file.extrinsics.rotation;
        let q = Quaternion::new(w, x, y, z);
        if !(q.norm() > 0.0) {
            return Err(IoError::CalibrationParse("zero extrinsic rotation".into()));
        }
        // Stored quaternions are already unit; avoid renormalizing them.
        let rotation = if (q.norm() - 1.0).abs() < 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Ok(Self {
            camera: file.camera,
            extrinsics: Pose::new(rotation, Vector3::from(file.extrinsics.translation)),
            noise: file.imu,
            gravity_magnitude: file.gravity_magnitude,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub feature_id: u64,
    pub keyframe_ts_ns: i64,
    pub px: f64,
    pub py: f64,
}

#[derive(Serialize, Deserialize)]
struct ImuRecord {
    timestamp_ns: i64,
    gx: f64,
    gy: f64,
    gz: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    timestamp_ns: i64,
}

/// A full recording: calibration, IMU stream, camera frames with optional
/// depth and images, and feature tracks.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub calibration: Calibration,
    pub imu: Vec<ImuSample>,
    pub frames: Vec<KeyframeSlot>,
    /// Sorted by feature id, then timestamp.
    pub tracks: Vec<TrackRecord>,
}

impl Dataset {
    pub fn frame_index(&self, timestamp_ns: i64) -> Option<usize> {
        self.frames
            .binary_search_by_key(&timestamp_ns, |f| f.timestamp_ns)
            .ok()
    }

    pub fn has_depth(&self) -> bool {
        !self.frames.is_empty() && self.frames.iter().all(|f| f.depth.is_some())
    }

    /// Seconds from the first to the last IMU sample.
    pub fn span(&self) -> f64 {
        match (self.imu.first(), self.imu.last()) {
            (Some(a), Some(b)) => (b.timestamp_ns - a.timestamp_ns) as f64 * 1e-9,
            _ => 0.0,
        }
    }

    pub fn window(&self, start_ns: i64, count: usize, use_depth: bool) -> Result<InitWindow, IoError> {
        let start = self
            .frame_index(start_ns)
            .ok_or(IoError::WindowOutOfRange { start_ns, count })?;
        self.window_at(start, count, use_depth)
    }

    /// `count` consecutive frames from `start`, with the IMU sliced
    /// inclusively between keyframes plus one trailing camera period.
    pub fn window_at(&self, start: usize, count: usize, use_depth: bool) -> Result<InitWindow, IoError> {
        let start_ns = self.frames.get(start).map(|f| f.timestamp_ns).unwrap_or(i64::MAX);
        let out_of_range = IoError::WindowOutOfRange { start_ns, count };
        if count < 2 || start + count > self.frames.len() {
            return Err(out_of_range);
        }
        let frames = &self.frames[start..start + count];
        let last_ns = frames[count - 1].timestamp_ns;
        let period = frames[count - 1].timestamp_ns - frames[count - 2].timestamp_ns;
        let trailing_end = last_ns + period;
        if self.imu.last().is_none_or(|s| s.timestamp_ns < trailing_end) {
            return Err(out_of_range);
        }

        let imu_at = |ts: i64| self.imu.partition_point(|s| s.timestamp_ns < ts);
        let mut imu_segments = Vec::with_capacity(count - 1);
        for w in frames.windows(2) {
            let (a, b) = (w[0].timestamp_ns, w[1].timestamp_ns);
            imu_segments.push(slice_inclusive(&self.imu, imu_at(a), a, b));
        }
        let trailing_imu = slice_inclusive(&self.imu, imu_at(last_ns), last_ns, trailing_end)
            .into_iter()
            .skip_while(|s| s.timestamp_ns <= last_ns)
            .collect();

        let keyframes = frames
            .iter()
            .map(|f| {
                if use_depth && f.depth.is_none() {
                    return Err(IoError::MissingDepthMap(f.timestamp_ns));
                }
                Ok(KeyframeSlot {
                    timestamp_ns: f.timestamp_ns,
                    depth: if use_depth { f.depth.clone() } else { None },
                    image: if use_depth { f.image.clone() } else { None },
                })
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut by_feature: BTreeMap<u64, Vec<Observation>> = BTreeMap::new();
        for t in &self.tracks {
            if t.keyframe_ts_ns < frames[0].timestamp_ns || t.keyframe_ts_ns > last_ns {
                continue;
            }
            let k = frames
                .binary_search_by_key(&t.keyframe_ts_ns, |f| f.timestamp_ns)
                .map_err(|_| IoError::UnknownKeyframe(t.keyframe_ts_ns))?;
            by_feature.entry(t.feature_id).or_default().push(Observation {
                keyframe: k,
                pixel: Vector2::new(t.px, t.py),
            });
        }
        let features = by_feature
            .into_iter()
            .map(|(id, observations)| FeatureTrack { id, observations })
            .collect();

        Ok(InitWindow {
            keyframes,
            features,
            imu_segments,
            trailing_imu,
            extrinsics: self.calibration.extrinsics,
            camera: self.calibration.camera,
            noise: self.calibration.noise,
            gravity_magnitude: self.calibration.gravity_magnitude,
        })
    }
}

/// Samples covering `[a, b]`, interpolating the endpoints when no sample
/// falls exactly on them.
fn slice_inclusive(imu: &[ImuSample], from: usize, a: i64, b: i64) -> Vec<ImuSample> {
    let mut out = Vec::new();
    let mut i = from;
    if i < imu.len() && imu[i].timestamp_ns != a && i > 0 {
        out.push(ImuSample::interpolate(&imu[i - 1], &imu[i], a));
    }
    while i < imu.len() && imu[i].timestamp_ns <= b {
        out.push(imu[i]);
        i += 1;
    }
    if out.last().is_some_and(|s| s.timestamp_ns != b) && i < imu.len() {
        out.push(ImuSample::interpolate(&imu[i - 1], &imu[i], b));
    }
    out
}

fn check_monotonic(ts: impl Iterator<Item = i64>, what: &str) -> Result<(), IoError> {
    let mut prev = None;
    for t in ts {
        if prev.is_some_and(|p| t <= p) {
            return Err(IoError::NonMonotonicTimestamps(what.to_string()));
        }
        prev = Some(t);
    }
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, IoError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(csv_err(path))
}

pub fn write_pfm(path: &Path, map: &DepthMap) -> Result<(), IoError> {
    let mut buf = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    buf.reserve(map.values.len() * 4);
    for row in (0..map.height).rev() {
        for v in &map.values[row * map.width..(row + 1) * map.width] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(io_err(path))
}

fn read_header_tokens(reader: &mut impl BufRead, n: usize, path: &Path) -> Result<Vec<String>, IoError> {
    let mut tokens = Vec::new();
    while tokens.len() < n {
        let mut line = String::new();
        if reader.read_line(&mut line).map_err(io_err(path))? == 0 {
            return Err(IoError::Format {
                path: path.to_path_buf(),
                message: "truncated header".into(),
            });
        }
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(str::to_string));
    }
    Ok(tokens)
}

pub fn read_pfm(path: &Path) -> Result<DepthMap, IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let bad = |m: &str| IoError::Format {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let tok = read_header_tokens(&mut reader, 4, path)?;
    if tok[0] != "Pf" {
        return Err(bad("only single-channel PFM is supported"));
    }
    let width: usize = tok[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tok[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tok[3].parse().map_err(|_| bad("bad scale"))?;
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(io_err(path))?;
    if bytes.len() != width * height * 4 {
        return Err(bad("pixel data size mismatch"));
    }
    let little = scale < 0.0;
    let mut values = vec![0f32; width * height];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (i / width, i % width);
        values[(height - 1 - row) * width + col] = v;
    }
    DepthMap::new(width, height, values).map_err(|e| bad(&e.to_string()))
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<(), IoError> {
    let mut buf = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    buf.extend_from_slice(&image.values);
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let bad = |m: &str| IoError::Format {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let tok = read_header_tokens(&mut reader, 4, path)?;
    if tok[0] != "P5" || tok[3] != "255" {
        return Err(bad("only 8-bit binary PGM is supported"));
    }
    let width: usize = tok[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tok[2].parse().map_err(|_| bad("bad height"))?;
    let mut values = Vec::new();
    reader.read_to_end(&mut values).map_err(io_err(path))?;
    if values.len() != width * height {
        return Err(bad("pixel data size mismatch"));
    }
    Ok(GrayImage { width, height, values })
}

fn frame_file(dir: &Path, ts: i64, ext: &str) -> PathBuf {
    dir.join(format!("{ts}.{ext}"))
}

pub fn write_dataset(root: &Path, data: &Dataset) -> Result<(), IoError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let calib = root.join("calib.toml");
    fs::write(&calib, data.calibration.to_toml()).map_err(io_err(&calib))?;
    let imu: Vec<ImuRecord> = data
        .imu
        .iter()
        .map(|s| ImuRecord {
            timestamp_ns: s.timestamp_ns,
            gx: s.gyro.x,
            gy: s.gyro.y,
            gz: s.gyro.z,
            ax: s.accel.x,
            ay: s.accel.y,
            az: s.accel.z,
        })
        .collect();
    write_csv(&root.join("imu.csv"), &imu)?;
    let frames: Vec<FrameRecord> = data
        .frames
        .iter()
        .map(|f| FrameRecord {
            timestamp_ns: f.timestamp_ns,
        })
        .collect();
    write_csv(&root.join("frames.csv"), &frames)?;
    write_csv(&root.join("tracks.csv"), &data.tracks)?;
    if data.frames.iter().any(|f| f.depth.is_some()) {
        let dir = root.join("depth");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for f in &data.frames {
            if let Some(d) = &f.depth {
                write_pfm(&frame_file(&dir, f.timestamp_ns, "pfm"), d)?;
            }
        }
    }
    if data.frames.iter().any(|f| f.image.is_some()) {
        let dir = root.join("images");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for f in &data.frames {
            if let Some(im) = &f.image {
                write_pgm(&frame_file(&dir, f.timestamp_ns, "pgm"), im)?;
            }
        }
    }
    Ok(())
}

/// Load a dataset. When a `depth/` directory exists every frame must have a
/// depth map; images are loaded where present.
pub fn load_dataset(root: &Path) -> Result<Dataset, IoError> {
    let calib_path = root.join("calib.toml");
    let text = fs::read_to_string(&calib_path).map_err(io_err(&calib_path))?;
    let calibration = Calibration::from_toml(&text)?;

    let imu: Vec<ImuRecord> = read_csv(&root.join("imu.csv"))?;
    let imu: Vec<ImuSample> = imu
        .into_iter()
        .map(|r| ImuSample::new(r.timestamp_ns, Vector3::new(r.gx, r.gy, r.gz), Vector3::new(r.ax, r.ay, r.az)))
        .collect();
    check_monotonic(imu.iter().map(|s| s.timestamp_ns), "imu.csv")?;

    let frames: Vec<FrameRecord> = read_csv(&root.join("frames.csv"))?;
    check_monotonic(frames.iter().map(|f| f.timestamp_ns), "frames.csv")?;
    let depth_dir = root.join("depth");
    let image_dir = root.join("images");
    let frames = frames
        .into_iter()
        .map(|f| {
            let ts = f.timestamp_ns;
            let depth = if depth_dir.is_dir() {
                let p = frame_file(&depth_dir, ts, "pfm");
                if !p.is_file() {
                    return Err(IoError::MissingDepthMap(ts));
                }
                Some(read_pfm(&p)?)
            } else {
                None
            };
            let p = frame_file(&image_dir, ts, "pgm");
            let image = if p.is_file() { Some(read_pgm(&p)?) } else { None };
            Ok(KeyframeSlot {
                timestamp_ns: ts,
                depth,
                image,
            })
        })
        .collect::<Result<Vec<_>, IoError>>()?;

    let mut tracks: Vec<TrackRecord> = read_csv(&root.join("tracks.csv"))?;
    tracks.sort_by_key(|t| (t.feature_id, t.keyframe_ts_ns));
    for t in &tracks {
        if frames.binary_search_by_key(&t.keyframe_ts_ns, |f| f.timestamp_ns).is_err() {
            return Err(IoError::UnknownKeyframe(t.keyframe_ts_ns));
        }
    }
    Ok(Dataset {
        calibration,
        imu,
        frames,
        tracks,
    })
}

pub fn load_window(root: &Path, start_ns: i64, count: usize, use_depth: bool) -> Result<InitWindow, IoError> {
    load_dataset(root)?.window(start_ns, count, use_depth)
}

/// Write a value as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| IoError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    f.write_all(b"\n").map_err(io_err(path))
}
