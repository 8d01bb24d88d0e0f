//! The visual-inertial bundle-adjustment problem: keyframe states, anchored
//! inverse-depth features and per-keyframe depth scale/shift, tied together
//! by inertial, reprojection, mono-depth and prior residuals.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix1x3, SMatrix, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BlockLayout, LeastSquaresProblem, Linearization, ResidualLinearization, SolverError};
use crate::geometry::{quat_exp, PinholeCamera, Pose};
use crate::imu::{inertial_residual_with_jacobians, BiasPrior, Matrix15, PreintegratedImu, BA, BG, POS, ROT, VEL};
use crate::monodepth::{depth_residual_with_jacobians, ScaleShiftPrior};
use crate::state::{
    anchor_point, feature_point_in_camera_with_jacobians, KeyframeState, ScaleShift, MIN_INVERSE_DEPTH,
};
use crate::vision::{huber_cost, huber_weight, reprojection_with_jacobians};

pub const KEYFRAME_DIM: usize = 15;
pub const FEATURE_DIM: usize = 3;
pub const SCALE_SHIFT_DIM: usize = 2;

/// Free dofs of the first keyframe when the gauge is fixed: roll/pitch,
/// velocity and both biases.
const GAUGED_DIM: usize = 11;
type GaugeBasis = SMatrix<f64, 15, GAUGED_DIM>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gauge {
    /// Hold the first keyframe's position and yaw.
    FirstPositionYaw,
    /// Leave every keyframe free (the Hessian is then singular).
    Free,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureParam {
    pub id: u64,
    pub anchor: usize,
    pub uvw: Vector3<f64>,
}

/// The full estimated state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub keyframes: Vec<KeyframeState>,
    pub features: Vec<FeatureParam>,
    /// One per keyframe.
    pub scale_shifts: Vec<ScaleShift>,
}

impl Parameters {
    pub fn num_blocks(&self) -> usize {
        self.keyframes.len() * 2 + self.features.len()
    }

    pub fn feature_block(&self, feature: usize) -> usize {
        self.keyframes.len() + feature
    }

    pub fn scale_shift_block(&self, keyframe: usize) -> usize {
        self.keyframes.len() + self.features.len() + keyframe
    }

    /// Tangent dimension of a block.
    pub fn block_dim(&self, block: usize) -> usize {
        let n = self.keyframes.len();
        let m = self.features.len();
        if block < n {
            KEYFRAME_DIM
        } else if block < n + m {
            FEATURE_DIM
        } else {
            SCALE_SHIFT_DIM
        }
    }

    /// Apply a tangent increment to one block. Keyframe rotations are
    /// right-perturbed; feature inverse depth follows [`retract_inverse_depth`].
    pub fn retract_block(&mut self, block: usize, delta: &[f64]) {
        let n = self.keyframes.len();
        let m = self.features.len();
        if block < n {
            let kf = &mut self.keyframes[block];
            let seg = |o: usize| Vector3::new(delta[o], delta[o + 1], delta[o + 2]);
            kf.q *= quat_exp(&seg(ROT));
            kf.p += seg(POS);
            kf.v += seg(VEL);
            kf.ba += seg(BA);
            kf.bg += seg(BG);
        } else if block < n + m {
            let uvw = &mut self.features[block - n].uvw;
            uvw.x += delta[0];
            uvw.y += delta[1];
            uvw.z = retract_inverse_depth(uvw.z, delta[2]);
        } else {
            let ss = &mut self.scale_shifts[block - n - m];
            ss.s += delta[0];
            ss.b += delta[1];
        }
    }
}

/// Inverse depths never retract below this; it sits just above the
/// admissibility floor so a converged feature at infinity stays admissible.
pub const INVERSE_DEPTH_RETRACTION_FLOOR: f64 = 2.0 * MIN_INVERSE_DEPTH;

/// Apply an inverse-depth increment `δ` (in units of w). Increases are
/// additive. Decreases shrink the distance to the floor exponentially,
/// `f + (w − f)·exp(δ / (w − f))`, which has unit slope at `δ = 0`, is exact
/// for relative corrections of the log-depth residual, and never reaches the
/// floor.
pub fn retract_inverse_depth(w: f64, delta: f64) -> f64 {
    let f = INVERSE_DEPTH_RETRACTION_FLOOR;
    if delta >= 0.0 {
        w + delta
    } else if w <= f {
        w
    } else {
        f + (w - f) * (delta / (w - f)).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualFamily {
    Inertial,
    Visual,
    Depth,
    BiasPrior,
    ScaleShiftPrior,
}

impl ResidualFamily {
    pub fn name(self) -> &'static str {
        match self {
            ResidualFamily::Inertial => "inertial",
            ResidualFamily::Visual => "visual",
            ResidualFamily::Depth => "depth",
            ResidualFamily::BiasPrior => "bias_prior",
            ResidualFamily::ScaleShiftPrior => "scale_shift_prior",
        }
    }
}

#[derive(Clone, Debug)]
pub enum ResidualBlock {
    Inertial {
        from: usize,
        to: usize,
        preintegrated: Arc<PreintegratedImu>,
        sqrt_information: Matrix15,
    },
    Reprojection {
        feature: usize,
        keyframe: usize,
        pixel: Vector2<f64>,
        sigma: f64,
        huber_delta: f64,
    },
    Depth {
        feature: usize,
        keyframe: usize,
        d: f64,
        lambda: f64,
        huber_delta: f64,
    },
    BiasPrior {
        keyframe: usize,
        prior: BiasPrior,
    },
    ScaleShiftPrior {
        keyframe: usize,
        prior: ScaleShiftPrior,
    },
}

impl ResidualBlock {
    pub fn family(&self) -> ResidualFamily {
        match self {
            ResidualBlock::Inertial { .. } => ResidualFamily::Inertial,
            ResidualBlock::Reprojection { .. } => ResidualFamily::Visual,
            ResidualBlock::Depth { .. } => ResidualFamily::Depth,
            ResidualBlock::BiasPrior { .. } => ResidualFamily::BiasPrior,
            ResidualBlock::ScaleShiftPrior { .. } => ResidualFamily::ScaleShiftPrior,
        }
    }
}

/// One residual evaluated at a parameter set. Jacobians are w.r.t. the full
/// block tangents, before any gauge restriction.
#[derive(Clone, Debug)]
pub struct BlockEvaluation {
    /// Whitened residual.
    pub residual: DVector<f64>,
    /// `λ·ρ'(‖r‖²)`
    pub weight: f64,
    /// `½·λ·ρ(‖r‖²)`
    pub cost: f64,
    pub saturated: bool,
    pub jacobians: Vec<(usize, DMatrix<f64>)>,
}

pub struct Problem {
    pub params: Parameters,
    pub blocks: Vec<ResidualBlock>,
    pub extrinsics: Pose,
    pub camera: PinholeCamera,
    pub gravity: Vector3<f64>,
    pub gauge: Gauge,
    active: Vec<bool>,
    basis: Option<GaugeBasis>,
}

fn loss(squared: f64, lambda: f64, delta: Option<f64>) -> (f64, f64) {
    match delta {
        Some(d) => (0.5 * lambda * huber_cost(squared, d), lambda * huber_weight(squared, d)),
        None => (0.5 * lambda * squared, lambda),
    }
}

fn to_dmatrix<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

impl Problem {
    pub fn new(
        params: Parameters,
        blocks: Vec<ResidualBlock>,
        extrinsics: Pose,
        camera: PinholeCamera,
        gravity: Vector3<f64>,
        gauge: Gauge,
    ) -> Result<Self, SolverError> {
        let problem = Self {
            active: vec![true; blocks.len()],
            params,
            blocks,
            extrinsics,
            camera,
            gravity,
            gauge,
            basis: None,
        };
        problem.check()?;
        Ok(problem)
    }

    fn check(&self) -> Result<(), SolverError> {
        let n = self.params.keyframes.len();
        let m = self.params.features.len();
        if n == 0 {
            return Err(SolverError::InvalidProblem("no keyframes".into()));
        }
        if self.params.scale_shifts.len() != n {
            return Err(SolverError::InvalidProblem("one scale/shift per keyframe required".into()));
        }
        for f in &self.params.features {
            if f.anchor >= n {
                return Err(SolverError::InvalidProblem(format!("feature {} anchored outside window", f.id)));
            }
        }
        let bad = |what: &str| Err(SolverError::InvalidProblem(format!("{what} references unknown block")));
        for b in &self.blocks {
            match *b {
                ResidualBlock::Inertial { from, to, .. } if from >= n || to >= n => return bad("inertial"),
                ResidualBlock::Reprojection { feature, keyframe, .. } if feature >= m || keyframe >= n => {
                    return bad("reprojection")
                }
                ResidualBlock::Depth { feature, keyframe, .. } if feature >= m || keyframe >= n => return bad("depth"),
                ResidualBlock::BiasPrior { keyframe, .. } | ResidualBlock::ScaleShiftPrior { keyframe, .. }
                    if keyframe >= n =>
                {
                    return bad("prior")
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn referenced(&self) -> (Vec<bool>, Vec<bool>) {
        let mut features = vec![false; self.params.features.len()];
        let mut scale_shifts = vec![false; self.params.keyframes.len()];
        for b in &self.blocks {
            match *b {
                ResidualBlock::Reprojection { feature, .. } => features[feature] = true,
                ResidualBlock::Depth { feature, keyframe, .. } => {
                    features[feature] = true;
                    scale_shifts[keyframe] = true;
                }
                ResidualBlock::ScaleShiftPrior { keyframe, .. } => scale_shifts[keyframe] = true,
                _ => {}
            }
        }
        (features, scale_shifts)
    }

    fn gauge_basis(&self) -> Option<GaugeBasis> {
        match self.gauge {
            Gauge::Free => None,
            Gauge::FirstPositionYaw => {
                let rt = self.params.keyframes[0].q.to_rotation_matrix().into_inner().transpose();
                let mut b = GaugeBasis::zeros();
                // Global roll/pitch expressed as right perturbations.
                b.fixed_view_mut::<3, 1>(ROT, 0).copy_from(&rt.column(0));
                b.fixed_view_mut::<3, 1>(ROT, 1).copy_from(&rt.column(1));
                for i in 0..3 {
                    b[(VEL + i, 2 + i)] = 1.0;
                    b[(BA + i, 5 + i)] = 1.0;
                    b[(BG + i, 8 + i)] = 1.0;
                }
                Some(b)
            }
        }
    }

    /// Evaluate one residual block; `None` when its geometry is invalid
    /// (point behind a camera, non-positive inverse depth).
    pub fn evaluate_block(&self, index: usize, params: &Parameters, jacobians: bool) -> Option<BlockEvaluation> {
        let kfs = &params.keyframes;
        match &self.blocks[index] {
            ResidualBlock::Inertial {
                from,
                to,
                preintegrated,
                sqrt_information,
            } => {
                let (r, ji, jj) = inertial_residual_with_jacobians(&kfs[*from], &kfs[*to], preintegrated, &self.gravity);
                let rw = sqrt_information * r;
                let (cost, weight) = loss(rw.norm_squared(), 1.0, None);
                let jac = if jacobians {
                    vec![
                        (*from, to_dmatrix(&(sqrt_information * ji))),
                        (*to, to_dmatrix(&(sqrt_information * jj))),
                    ]
                } else {
                    Vec::new()
                };
                Some(BlockEvaluation {
                    residual: DVector::from_column_slice(rw.as_slice()),
                    weight,
                    cost,
                    saturated: false,
                    jacobians: jac,
                })
            }
            ResidualBlock::Reprojection {
                feature,
                keyframe,
                pixel,
                sigma,
                huber_delta,
            } => {
                let f = &params.features[*feature];
                let anchor = f.anchor;
                let same = anchor == *keyframe;
                let lin = reprojection_with_jacobians(
                    &f.uvw,
                    pixel,
                    &kfs[anchor].pose(),
                    &kfs[*keyframe].pose(),
                    same,
                    &self.extrinsics,
                    &self.camera,
                )
                .ok()?;
                let rw = lin.residual / *sigma;
                let (cost, weight) = loss(rw.norm_squared(), 1.0, Some(*huber_delta));
                let mut jac = Vec::new();
                if jacobians {
                    jac.push((params.feature_block(*feature), to_dmatrix(&(lin.d_feature / *sigma))));
                    if !same {
                        jac.push((anchor, pose_to_keyframe(&to_dmatrix(&(lin.d_anchor / *sigma)))));
                        jac.push((*keyframe, pose_to_keyframe(&to_dmatrix(&(lin.d_target / *sigma)))));
                    }
                }
                Some(BlockEvaluation {
                    residual: DVector::from_column_slice(rw.as_slice()),
                    weight,
                    cost,
                    saturated: false,
                    jacobians: jac,
                })
            }
            ResidualBlock::Depth {
                feature,
                keyframe,
                d,
                lambda,
                huber_delta,
            } => {
                let f = &params.features[*feature];
                let anchor = f.anchor;
                let same = anchor == *keyframe;
                let ss = &params.scale_shifts[*keyframe];
                let (omega, d_anchor, d_target, d_feature) = if same {
                    let pc = anchor_point(&f.uvw).ok()?;
                    let w = f.uvw.z;
                    (pc.z, None, None, Matrix1x3::new(0.0, 0.0, -1.0 / (w * w)))
                } else {
                    let j = feature_point_in_camera_with_jacobians(
                        &f.uvw,
                        &kfs[anchor].pose(),
                        &kfs[*keyframe].pose(),
                        &self.extrinsics,
                    )
                    .ok()?;
                    (
                        j.point.z,
                        Some(j.d_anchor.row(2).into_owned()),
                        Some(j.d_target.row(2).into_owned()),
                        j.d_feature.row(2).into_owned(),
                    )
                };
                if omega <= MIN_INVERSE_DEPTH {
                    return None;
                }
                let (r, d_ss, dr_domega) = depth_residual_with_jacobians(*d, ss, omega);
                let (cost, weight) = loss(r.value * r.value, *lambda, Some(*huber_delta));
                let mut jac = Vec::new();
                if jacobians {
                    jac.push((params.feature_block(*feature), to_dmatrix(&(d_feature * dr_domega))));
                    jac.push((
                        params.scale_shift_block(*keyframe),
                        DMatrix::from_row_slice(1, 2, &d_ss),
                    ));
                    if let (Some(da), Some(dt)) = (d_anchor, d_target) {
                        jac.push((anchor, pose_to_keyframe(&to_dmatrix(&(da * dr_domega)))));
                        jac.push((*keyframe, pose_to_keyframe(&to_dmatrix(&(dt * dr_domega)))));
                    }
                }
                Some(BlockEvaluation {
                    residual: DVector::from_element(1, r.value),
                    weight,
                    cost,
                    saturated: r.saturated,
                    jacobians: jac,
                })
            }
            ResidualBlock::BiasPrior { keyframe, prior } => {
                let rw = prior.whitened(&kfs[*keyframe]);
                let (cost, weight) = loss(rw.norm_squared(), 1.0, None);
                let mut jac = Vec::new();
                if jacobians {
                    let mut j = DMatrix::zeros(6, KEYFRAME_DIM);
                    for i in 0..3 {
                        j[(i, BA + i)] = 1.0 / prior.accel_sigma;
                        j[(3 + i, BG + i)] = 1.0 / prior.gyro_sigma;
                    }
                    jac.push((*keyframe, j));
                }
                Some(BlockEvaluation {
                    residual: DVector::from_column_slice(rw.as_slice()),
                    weight,
                    cost,
                    saturated: false,
                    jacobians: jac,
                })
            }
            ResidualBlock::ScaleShiftPrior { keyframe, prior } => {
                let ss = &params.scale_shifts[*keyframe];
                let rw = prior.whitened(ss);
                let (cost, weight) = loss(rw.norm_squared(), 1.0, None);
                let mut jac = Vec::new();
                if jacobians {
                    let da = crate::state::scale_from_free_derivative(ss.s);
                    let j = DMatrix::from_row_slice(2, 2, &[-da / prior.scale_sigma, 0.0, 0.0, -1.0 / prior.shift_sigma]);
                    jac.push((params.scale_shift_block(*keyframe), j));
                }
                Some(BlockEvaluation {
                    residual: DVector::from_column_slice(rw.as_slice()),
                    weight,
                    cost,
                    saturated: false,
                    jacobians: jac,
                })
            }
        }
    }

    /// Robust cost of all blocks valid at the current parameters.
    pub fn total_cost(&self) -> f64 {
        self.cost_breakdown().values().sum()
    }

    /// RMS reprojection error in pixels over all valid visual residuals.
    pub fn reprojection_rms(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, b) in self.blocks.iter().enumerate() {
            if let ResidualBlock::Reprojection { sigma, .. } = b {
                if let Some(e) = self.evaluate_block(i, &self.params, false) {
                    sum += e.residual.norm_squared() * sigma * sigma;
                    count += 1;
                }
            }
        }
        (count > 0).then(|| (sum / count as f64).sqrt())
    }

    /// Number of residual blocks that cannot be evaluated at the current
    /// parameters.
    pub fn invalid_blocks(&self) -> usize {
        (0..self.blocks.len())
            .filter(|&i| self.evaluate_block(i, &self.params, false).is_none())
            .count()
    }

    fn stepped(&self, step: &DVector<f64>) -> Parameters {
        let layout = self.layout();
        let mut params = self.params.clone();
        for b in 0..layout.sizes.len() {
            let size = layout.sizes[b];
            if size == 0 {
                continue;
            }
            let seg = step.rows(layout.offset(b), size);
            if b == 0 && size == GAUGED_DIM {
                let basis = self.basis.unwrap_or_else(|| self.gauge_basis().expect("gauge basis"));
                let full = basis * seg;
                params.retract_block(0, full.as_slice());
            } else {
                params.retract_block(b, seg.as_slice());
            }
        }
        params
    }
}

/// Scatter a `[rotation, position]` Jacobian into the 15-dim keyframe
/// tangent.
fn pose_to_keyframe(j: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(j.nrows(), KEYFRAME_DIM);
    out.view_mut((0, ROT), (j.nrows(), 3)).copy_from(&j.columns(0, 3));
    out.view_mut((0, POS), (j.nrows(), 3)).copy_from(&j.columns(3, 3));
    out
}

impl LeastSquaresProblem for Problem {
    fn layout(&self) -> BlockLayout {
        let n = self.params.keyframes.len();
        let (features, scale_shifts) = self.referenced();
        let mut sizes = Vec::with_capacity(self.params.num_blocks());
        let mut eliminable = Vec::with_capacity(self.params.num_blocks());
        for k in 0..n {
            let gauged = k == 0 && self.gauge == Gauge::FirstPositionYaw;
            sizes.push(if gauged { GAUGED_DIM } else { KEYFRAME_DIM });
            eliminable.push(false);
        }
        for used in features {
            sizes.push(if used { FEATURE_DIM } else { 0 });
            eliminable.push(true);
        }
        for used in scale_shifts {
            sizes.push(if used { SCALE_SHIFT_DIM } else { 0 });
            eliminable.push(false);
        }
        BlockLayout::new(sizes, eliminable)
    }

    fn linearize(&mut self) -> Result<Linearization, SolverError> {
        self.basis = self.gauge_basis();
        let evals: Vec<Option<BlockEvaluation>> = (0..self.blocks.len())
            .into_par_iter()
            .map(|i| self.evaluate_block(i, &self.params, true))
            .collect();
        let mut cost = 0.0;
        let mut residuals = Vec::with_capacity(evals.len());
        for (i, e) in evals.into_iter().enumerate() {
            self.active[i] = e.is_some();
            let Some(e) = e else { continue };
            if !e.cost.is_finite() || e.residual.iter().any(|v| !v.is_finite()) {
                return Err(SolverError::NumericalFailure);
            }
            cost += e.cost;
            let jacobians = e
                .jacobians
                .into_iter()
                .map(|(b, j)| match (b, &self.basis) {
                    (0, Some(basis)) => (0, j * to_dmatrix(basis)),
                    _ => (b, j),
                })
                .collect();
            residuals.push(ResidualLinearization {
                residual: e.residual,
                weight: e.weight,
                jacobians,
            });
        }
        Ok(Linearization { residuals, cost })
    }

    fn trial_cost(&self, step: &DVector<f64>) -> Option<f64> {
        let params = self.stepped(step);
        if params.features.iter().any(|f| f.uvw.z <= MIN_INVERSE_DEPTH) {
            return None;
        }
        let costs: Vec<Option<f64>> = (0..self.blocks.len())
            .into_par_iter()
            .map(|i| {
                if !self.active[i] {
                    return Some(0.0);
                }
                self.evaluate_block(i, &params, false).map(|e| e.cost)
            })
            .collect();
        let mut total = 0.0;
        for c in costs {
            total += c?;
        }
        total.is_finite().then_some(total)
    }

    fn apply_step(&mut self, step: &DVector<f64>) {
        self.params = self.stepped(step);
    }

    fn cost_breakdown(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let entry = out.entry(b.family().name().to_string()).or_insert(0.0);
            if let Some(e) = self.evaluate_block(i, &self.params, false) {
                *entry += e.cost;
            }
        }
        out
    }

    fn saturation_count(&self) -> usize {
        (0..self.blocks.len())
            .filter(|&i| matches!(self.blocks[i], ResidualBlock::Depth { .. }))
            .filter(|&i| self.evaluate_block(i, &self.params, false).is_some_and(|e| e.saturated))
            .count()
    }
}
