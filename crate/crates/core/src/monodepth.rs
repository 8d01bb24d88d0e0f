//! Mono-depth consistency constraints: the log-ratio depth residual, the
//! scale/shift prior, edge-aware weights, and self-consistency based
//! rejection of depth measurements.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix1x3, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::{scale_from_free_derivative, ScaleShift};

/// Lower clamp on `(a·d + b)·Ω` inside the logarithm.
pub const DEPTH_RATIO_FLOOR: f64 = 1e-6;
pub const DEFAULT_SCALE_PRIOR_SIGMA: f64 = 0.3;
pub const DEFAULT_SHIFT_PRIOR_SIGMA: f64 = 0.2;
pub const DEFAULT_SIGMA_MIN: f64 = 0.05;
pub const DEFAULT_SIGMA_MAX: f64 = 0.4;
pub const DEFAULT_EDGE_ALPHA: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonoDepthError {
    #[error("pixel ({0}, {1}) outside {2}x{3} map")]
    OutOfBounds(f64, f64, usize, usize),
    #[error("map size mismatch: {0}")]
    SizeMismatch(String),
}

/// Dense relative inverse depth, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

/// Read-only access to a scalar grid.
pub trait Grid {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn at(&self, x: usize, y: usize) -> f64;

    /// Nearest pixel to a continuous coordinate, if inside the grid.
    fn nearest(&self, pixel: &Vector2<f64>) -> Option<(usize, usize)> {
        let x = pixel.x.round();
        let y = pixel.y.round();
        if x < 0.0 || y < 0.0 || x >= self.width() as f64 || y >= self.height() as f64 {
            None
        } else {
            Some((x as usize, y as usize))
        }
    }
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self, MonoDepthError> {
        if values.len() != width * height {
            return Err(MonoDepthError::SizeMismatch(format!(
                "{} values for {}x{}",
                values.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    /// Nearest-pixel sample.
    pub fn sample(&self, pixel: &Vector2<f64>) -> Result<f64, MonoDepthError> {
        let (x, y) = self.nearest(pixel).ok_or(MonoDepthError::OutOfBounds(
            pixel.x,
            pixel.y,
            self.width,
            self.height,
        ))?;
        Ok(self.at(x, y))
    }
}

impl Grid for DepthMap {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x] as f64
    }
}

impl Grid for GrayImage {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x] as f64
    }
}

/// One mono-depth constraint between feature `feature` and keyframe `keyframe`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMeasurement {
    pub feature: usize,
    pub keyframe: usize,
    /// Raw mono inverse depth sampled at the feature's pixel.
    pub d: f64,
    /// Edge-aware weight in (0, 1].
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthResidual {
    pub value: f64,
    /// The log argument hit [`DEPTH_RATIO_FLOOR`].
    pub saturated: bool,
}

/// `log((a·d + b)·Ω)` where `Ω` is the feature depth in the keyframe.
pub fn depth_residual(d: f64, scale_shift: &ScaleShift, omega: f64) -> DepthResidual {
    let arg = (scale_shift.scale() * d + scale_shift.b) * omega;
    if arg < DEPTH_RATIO_FLOOR {
        DepthResidual {
            value: DEPTH_RATIO_FLOOR.ln(),
            saturated: true,
        }
    } else {
        DepthResidual {
            value: arg.ln(),
            saturated: false,
        }
    }
}

/// Residual with Jacobians w.r.t. `(s, b)` and `Ω`. Saturated residuals
/// have zero Jacobians.
pub fn depth_residual_with_jacobians(
    d: f64,
    scale_shift: &ScaleShift,
    omega: f64,
) -> (DepthResidual, [f64; 2], f64) {
    let r = depth_residual(d, scale_shift, omega);
    if r.saturated {
        return (r, [0.0, 0.0], 0.0);
    }
    let z = scale_shift.scale() * d + scale_shift.b;
    let da = scale_from_free_derivative(scale_shift.s);
    (r, [d * da / z, 1.0 / z], 1.0 / omega)
}

/// Jacobian row of the residual w.r.t. a camera-frame point, given the
/// chain `∂r/∂Ω` and `Ω = point.z`.
pub fn omega_row(dr_domega: f64) -> Matrix1x3<f64> {
    Matrix1x3::new(0.0, 0.0, dr_domega)
}

/// Prior standard deviations of scale and shift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaleShiftPrior {
    pub scale_sigma: f64,
    pub shift_sigma: f64,
}

impl Default for ScaleShiftPrior {
    fn default() -> Self {
        Self {
            scale_sigma: DEFAULT_SCALE_PRIOR_SIGMA,
            shift_sigma: DEFAULT_SHIFT_PRIOR_SIGMA,
        }
    }
}

impl ScaleShiftPrior {
    pub fn whitened(&self, ss: &ScaleShift) -> Vector2<f64> {
        let r = scale_shift_prior_residual(ss);
        Vector2::new(r.x / self.scale_sigma, r.y / self.shift_sigma)
    }
}

/// `[1 − a, −b]`
pub fn scale_shift_prior_residual(ss: &ScaleShift) -> Vector2<f64> {
    Vector2::new(1.0 - ss.scale(), -ss.b)
}

/// Bilateral filter and Laplacian settings for the edge weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeWeightConfig {
    pub alpha: f64,
    /// Half-size of the square filter window (2 → 5×5).
    pub radius: usize,
    pub spatial_sigma: f64,
    /// On values normalized to [0, 1].
    pub range_sigma: f64,
}

impl Default for EdgeWeightConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_EDGE_ALPHA,
            radius: 2,
            spatial_sigma: 2.0,
            range_sigma: 0.1,
        }
    }
}

/// A grid normalized to [0, 1] by its global range, with on-demand
/// bilateral filtering and Laplacian.
struct Normalized<'a, G: Grid> {
    grid: &'a G,
    offset: f64,
    inv_range: f64,
}

impl<'a, G: Grid> Normalized<'a, G> {
    fn new(grid: &'a G) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for y in 0..grid.height() {
            for x in 0..grid.width() {
                let v = grid.at(x, y);
                if v.is_finite() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        let range = hi - lo;
        let inv_range = if range.is_finite() && range > 0.0 {
            1.0 / range
        } else {
            0.0
        };
        Self {
            grid,
            offset: if lo.is_finite() { lo } else { 0.0 },
            inv_range,
        }
    }

    fn value(&self, x: isize, y: isize) -> f64 {
        let cx = x.clamp(0, self.grid.width() as isize - 1) as usize;
        let cy = y.clamp(0, self.grid.height() as isize - 1) as usize;
        (self.grid.at(cx, cy) - self.offset) * self.inv_range
    }

    fn filtered(&self, x: isize, y: isize, cfg: &EdgeWeightConfig) -> f64 {
        // border replication applies to the center pixel too
        let x = x.clamp(0, self.grid.width() as isize - 1);
        let y = y.clamp(0, self.grid.height() as isize - 1);
        let center = self.value(x, y);
        let r = cfg.radius as isize;
        let inv_s = 1.0 / (2.0 * cfg.spatial_sigma * cfg.spatial_sigma);
        let inv_r = 1.0 / (2.0 * cfg.range_sigma * cfg.range_sigma);
        let mut num = 0.0;
        let mut den = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let v = self.value(x + dx, y + dy);
                let w = (-((dx * dx + dy * dy) as f64) * inv_s - (v - center).powi(2) * inv_r).exp();
                num += w * v;
                den += w;
            }
        }
        num / den
    }

    fn laplacian(&self, x: isize, y: isize, cfg: &EdgeWeightConfig) -> f64 {
        self.filtered(x + 1, y, cfg)
            + self.filtered(x - 1, y, cfg)
            + self.filtered(x, y + 1, cfg)
            + self.filtered(x, y - 1, cfg)
            - 4.0 * self.filtered(x, y, cfg)
    }
}

/// Edge-aware weights for one keyframe; normalization is computed once.
pub struct EdgeWeighter<'a> {
    depth: Normalized<'a, DepthMap>,
    image: Option<Normalized<'a, GrayImage>>,
    config: EdgeWeightConfig,
}

impl<'a> EdgeWeighter<'a> {
    pub fn new(
        image: Option<&'a GrayImage>,
        depth: &'a DepthMap,
        config: EdgeWeightConfig,
    ) -> Result<Self, MonoDepthError> {
        if let Some(img) = image {
            if img.width != depth.width || img.height != depth.height {
                return Err(MonoDepthError::SizeMismatch(format!(
                    "image {}x{} vs depth {}x{}",
                    img.width, img.height, depth.width, depth.height
                )));
            }
        }
        Ok(Self {
            depth: Normalized::new(depth),
            image: image.map(Normalized::new),
            config,
        })
    }

    /// Laplacian magnitudes `(|∇²Φ(I)|, |∇²Φ(D)|)` at the nearest pixel;
    /// the image term is zero when no image is attached.
    pub fn laplacians(&self, pixel: &Vector2<f64>) -> Result<(f64, f64), MonoDepthError> {
        let d = self.depth.grid;
        let (x, y) = d.nearest(pixel).ok_or(MonoDepthError::OutOfBounds(
            pixel.x, pixel.y, d.width, d.height,
        ))?;
        let (x, y) = (x as isize, y as isize);
        let ld = self.depth.laplacian(x, y, &self.config).abs();
        let li = self
            .image
            .as_ref()
            .map(|img| img.laplacian(x, y, &self.config).abs())
            .unwrap_or(0.0);
        Ok((li, ld))
    }

    pub fn weight(&self, pixel: &Vector2<f64>) -> Result<f64, MonoDepthError> {
        let (li, ld) = self.laplacians(pixel)?;
        Ok(weight_from_laplacians(self.config.alpha, li, ld))
    }
}

/// `exp(−(α·|∇²Φ(I)| + |∇²Φ(D)|))`
pub fn weight_from_laplacians(alpha: f64, image_laplacian: f64, depth_laplacian: f64) -> f64 {
    (-(alpha * image_laplacian.abs() + depth_laplacian.abs())).exp()
}

/// Edge-aware weight at one pixel. Builds the per-map normalization, so use
/// [`EdgeWeighter`] when sampling many pixels of the same keyframe.
pub fn edge_weight(
    image: Option<&GrayImage>,
    depth: &DepthMap,
    pixel: &Vector2<f64>,
    alpha: f64,
) -> Result<f64, MonoDepthError> {
    let cfg = EdgeWeightConfig {
        alpha,
        ..Default::default()
    };
    EdgeWeighter::new(image, depth, cfg)?.weight(pixel)
}

/// One entry of the residual table fed to [`reject_outliers`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualEntry {
    pub feature: usize,
    pub keyframe: usize,
    pub residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionBranch {
    /// 25th percentile above σ_max.
    RejectAll,
    /// 85th percentile below σ_min.
    AcceptAll,
    /// Features at or above the 85th percentile dropped.
    DropLeastConsistent,
    /// No feature had two or more residuals.
    NoStatistics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionOutcome {
    pub branch: RejectionBranch,
    /// Surviving `(feature, keyframe)` pairs.
    pub inliers: BTreeSet<(usize, usize)>,
    /// Per-feature sample standard deviation, for features with ≥ 2 residuals.
    pub sigmas: BTreeMap<usize, f64>,
    /// The 85th percentile used as the cut in branch 3.
    pub cut: Option<f64>,
}

impl RejectionOutcome {
    pub fn rejected_features(&self) -> BTreeSet<usize> {
        let kept: BTreeSet<usize> = self.inliers.iter().map(|(f, _)| *f).collect();
        self.sigmas.keys().filter(|f| !kept.contains(f)).copied().collect()
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile_nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Sample standard deviation (`N − 1` denominator).
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|r| (r - mean).powi(2)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// Reject depth measurements whose feature is not self-consistent across
/// keyframes.
///
/// Features with fewer than two residuals carry no spread information; they
/// are excluded from the statistics and kept unless every constraint is
/// rejected.
pub fn reject_outliers(table: &[ResidualEntry], sigma_min: f64, sigma_max: f64) -> RejectionOutcome {
    let mut per_feature: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for e in table {
        per_feature.entry(e.feature).or_default().push(e.residual);
    }
    let sigmas: BTreeMap<usize, f64> = per_feature
        .iter()
        .filter(|(_, r)| r.len() >= 2)
        .map(|(f, r)| (*f, sample_std(r)))
        .collect();
    let all: BTreeSet<(usize, usize)> = table.iter().map(|e| (e.feature, e.keyframe)).collect();

    if sigmas.is_empty() {
        return RejectionOutcome {
            branch: RejectionBranch::NoStatistics,
            inliers: all,
            sigmas,
            cut: None,
        };
    }
    let mut sorted: Vec<f64> = sigmas.values().copied().collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let p25 = percentile_nearest_rank(&sorted, 25.0);
    let p85 = percentile_nearest_rank(&sorted, 85.0);

    if p25 > sigma_max {
        return RejectionOutcome {
            branch: RejectionBranch::RejectAll,
            inliers: BTreeSet::new(),
            sigmas,
            cut: None,
        };
    }
    if p85 < sigma_min {
        return RejectionOutcome {
            branch: RejectionBranch::AcceptAll,
            inliers: all,
            sigmas,
            cut: None,
        };
    }
    let inliers = all
        .into_iter()
        .filter(|(f, _)| sigmas.get(f).is_none_or(|s| *s < p85))
        .collect();
    RejectionOutcome {
        branch: RejectionBranch::DropLeastConsistent,
        inliers,
        sigmas,
        cut: Some(p85),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ss(a: f64, b: f64) -> ScaleShift {
        ScaleShift::from_scale_shift(a, b).unwrap()
    }

    #[test]
    fn depth_residual_examples() {
        assert!(depth_residual(0.25, &ss(1.0, 0.0), 4.0).value.abs() < 1e-12);
        assert!((depth_residual(0.5, &ss(1.0, 0.0), 4.0).value - 2f64.ln()).abs() < 1e-12);
        // anchor keyframe: Ω = 1/w
        let w: f64 = 0.2;
        assert!(depth_residual(0.1, &ss(2.0, 0.0), 1.0 / w).value.abs() < 1e-12);
        let sat = depth_residual(-1.0, &ss(1.0, 0.0), 2.0);
        assert!(sat.saturated);
        assert_eq!(sat.value, DEPTH_RATIO_FLOOR.ln());
    }

    #[test]
    fn prior_examples() {
        assert!(scale_shift_prior_residual(&ss(1.0, 0.0)).norm() < 1e-14);
        let r = scale_shift_prior_residual(&ss(1.3, -0.2));
        assert!((r - Vector2::new(-0.3, 0.2)).norm() < 1e-12);
        let w = ScaleShiftPrior::default().whitened(&ss(1.3, -0.2));
        assert!((w - Vector2::new(-1.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let base = ss(1.3, 0.05);
        let (d, omega) = (0.3, 2.5);
        let (_, j, j_omega) = depth_residual_with_jacobians(d, &base, omega);
        let h = 1e-6;
        let f = |s: f64, b: f64, o: f64| depth_residual(d, &ScaleShift { s, b }, o).value;
        let fd_s = (f(base.s + h, base.b, omega) - f(base.s - h, base.b, omega)) / (2.0 * h);
        let fd_b = (f(base.s, base.b + h, omega) - f(base.s, base.b - h, omega)) / (2.0 * h);
        let fd_o = (f(base.s, base.b, omega + h) - f(base.s, base.b, omega - h)) / (2.0 * h);
        assert!((fd_s - j[0]).abs() < 1e-8);
        assert!((fd_b - j[1]).abs() < 1e-8);
        assert!((fd_o - j_omega).abs() < 1e-8);
    }

    #[test]
    fn constant_maps_have_unit_weight() {
        let depth = DepthMap::from_fn(20, 15, |_, _| 0.3);
        let image = GrayImage {
            width: 20,
            height: 15,
            values: vec![77; 300],
        };
        let w = edge_weight(Some(&image), &depth, &Vector2::new(4.0, 7.0), 0.5).unwrap();
        assert_eq!(w, 1.0);
        assert!(matches!(
            edge_weight(None, &depth, &Vector2::new(25.0, 7.0), 0.5),
            Err(MonoDepthError::OutOfBounds(..))
        ));
    }

    #[test]
    fn weight_arithmetic() {
        assert!((weight_from_laplacians(0.5, 2.0, 1.0) - (-2f64).exp()).abs() < 1e-15);
        assert!((weight_from_laplacians(0.5, 2.0, 1.0) - 0.1353).abs() < 1e-4);
    }

    /// Direct full-map bilateral filter and Laplacian, written independently
    /// of the on-demand version.
    fn dense_laplacian(map: &DepthMap, cfg: &EdgeWeightConfig) -> Vec<f64> {
        let (w, h) = (map.width as isize, map.height as isize);
        let lo = map.values.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        let hi = map.values.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let get = |x: isize, y: isize| -> f64 {
            let x = x.clamp(0, w - 1) as usize;
            let y = y.clamp(0, h - 1) as usize;
            (map.values[y * map.width + x] as f64 - lo) / (hi - lo)
        };
        let mut filt = vec![0.0; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                let c = get(x, y);
                let (mut n, mut d) = (0.0, 0.0);
                for dy in -2..=2isize {
                    for dx in -2..=2isize {
                        let v = get(x + dx, y + dy);
                        let wt = (-((dx * dx + dy * dy) as f64) / (2.0 * cfg.spatial_sigma.powi(2))
                            - (v - c).powi(2) / (2.0 * cfg.range_sigma.powi(2)))
                        .exp();
                        n += wt * v;
                        d += wt;
                    }
                }
                filt[(y * w + x) as usize] = n / d;
            }
        }
        let f = |x: isize, y: isize| filt[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
        let mut lap = vec![0.0; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                lap[(y * w + x) as usize] =
                    f(x + 1, y) + f(x - 1, y) + f(x, y + 1) + f(x, y - 1) - 4.0 * f(x, y);
            }
        }
        lap
    }

    #[test]
    fn step_edge_lowers_weight() {
        let depth = DepthMap::from_fn(32, 16, |x, _| if x < 16 { 0.5 } else { 0.1 });
        let cfg = EdgeWeightConfig::default();
        let weighter = EdgeWeighter::new(None, &depth, cfg).unwrap();
        let lap = dense_laplacian(&depth, &cfg);
        for (x, y) in [(15usize, 8usize), (16, 8), (12, 3), (19, 8), (0, 0), (31, 15)] {
            let (_, ld) = weighter.laplacians(&Vector2::new(x as f64, y as f64)).unwrap();
            assert!((ld - lap[y * 32 + x].abs()).abs() < 1e-12);
        }
        let at_edge = weighter.weight(&Vector2::new(15.0, 8.0)).unwrap();
        let away = weighter.weight(&Vector2::new(12.0, 8.0)).unwrap();
        assert!(at_edge < away, "{at_edge} vs {away}");
    }

    #[test]
    fn rejection_branches() {
        let consistent: Vec<ResidualEntry> = (0..10)
            .flat_map(|f| (0..3).map(move |k| ResidualEntry { feature: f, keyframe: k, residual: 0.2 }))
            .collect();
        let out = reject_outliers(&consistent, 0.05, 0.4);
        assert_eq!(out.branch, RejectionBranch::AcceptAll);
        assert_eq!(out.inliers.len(), 30);

        let noisy: Vec<ResidualEntry> = (0..10)
            .flat_map(|f| (0..3).map(move |k| ResidualEntry {
                feature: f,
                keyframe: k,
                residual: if k == 1 { 4.0 * 4.0 } else { 0.0 },
            }))
            .collect();
        let out = reject_outliers(&noisy, 0.05, 0.4);
        assert_eq!(out.branch, RejectionBranch::RejectAll);
        assert!(out.inliers.is_empty());
    }

    #[test]
    fn percentile_examples() {
        let v: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        assert_eq!(percentile_nearest_rank(&v, 25.0), 5.0);
        assert_eq!(percentile_nearest_rank(&v, 85.0), 17.0);
        assert_eq!(percentile_nearest_rank(&[3.0], 85.0), 3.0);
    }

    proptest! {
        #[test]
        fn affine_gauge_invariance(d in 0.01f64..2.0, a in 0.2f64..5.0, b in -0.1f64..0.1, c in 0.1f64..10.0, omega in 0.5f64..20.0) {
            let r1 = depth_residual(d, &ss(a, b), omega);
            let r2 = depth_residual(c * d, &ss(a / c, b), omega);
            prop_assume!(!r1.saturated);
            prop_assert!((r1.value - r2.value).abs() < 1e-9);
        }

        #[test]
        fn weight_in_unit_interval_and_monotone(li in 0.0f64..10.0, ld in 0.0f64..10.0, alpha in 0.0f64..3.0, dl in 0.0f64..1.0) {
            let w = weight_from_laplacians(alpha, li, ld);
            prop_assert!(w > 0.0 && w <= 1.0);
            prop_assert!(weight_from_laplacians(alpha, li + dl, ld) <= w);
            prop_assert!(weight_from_laplacians(alpha, li, ld + dl) <= w);
        }

        #[test]
        fn rejection_returns_subset(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let table: Vec<ResidualEntry> = (0..25)
                .flat_map(|f| {
                    let n = 1 + (f % 4);
                    let spread = if f % 5 == 0 { 1.0 } else { 0.1 };
                    (0..n).map(|k| (f, k, spread)).collect::<Vec<_>>()
                })
                .map(|(f, k, spread)| ResidualEntry { feature: f, keyframe: k, residual: rng.random_range(-spread..spread) })
                .collect();
            let all: BTreeSet<(usize, usize)> = table.iter().map(|e| (e.feature, e.keyframe)).collect();
            let out = reject_outliers(&table, 0.05, 0.4);
            prop_assert!(out.inliers.is_subset(&all));
        }
    }
}
