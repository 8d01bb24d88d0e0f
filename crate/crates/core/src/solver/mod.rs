//! Robust Levenberg–Marquardt on block-structured least-squares problems,
//! plus Hessian conditioning diagnostics.
//!
//! The minimized cost is `½ Σ λ·ρ(‖r‖²)` over whitened residuals `r`, with
//! IRLS weights `λ·ρ'` entering the Gauss-Newton normal equations.

mod linear;
pub mod problem;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use linear::NormalEquations;
pub use problem::{FeatureParam, Gauge, Parameters, Problem, ResidualBlock, ResidualFamily};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("normal equations indefinite beyond damping recovery")]
    NumericalFailure,
    #[error("Hessian is rank deficient (smallest singular value {0:e})")]
    RankDeficient(f64),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

/// Sizes of the parameter blocks in the free (tangent) space. Blocks of size
/// zero are held constant.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockLayout {
    pub sizes: Vec<usize>,
    pub eliminable: Vec<bool>,
    offsets: Vec<usize>,
}

impl BlockLayout {
    pub fn new(sizes: Vec<usize>, eliminable: Vec<bool>) -> Self {
        assert_eq!(sizes.len(), eliminable.len());
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for s in &sizes {
            offsets.push(acc);
            acc += s;
        }
        Self {
            sizes,
            eliminable,
            offsets,
        }
    }

    pub fn dense(sizes: Vec<usize>) -> Self {
        let n = sizes.len();
        Self::new(sizes, vec![false; n])
    }

    pub fn offset(&self, block: usize) -> usize {
        self.offsets[block]
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }
}

/// One whitened residual with its Jacobian blocks in the free space.
#[derive(Clone, Debug)]
pub struct ResidualLinearization {
    pub residual: DVector<f64>,
    /// `λ·ρ'(‖r‖²)`
    pub weight: f64,
    pub jacobians: Vec<(usize, DMatrix<f64>)>,
}

#[derive(Clone, Debug)]
pub struct Linearization {
    pub residuals: Vec<ResidualLinearization>,
    pub cost: f64,
}

/// A nonlinear least-squares problem the LM engine can drive.
pub trait LeastSquaresProblem {
    fn layout(&self) -> BlockLayout;

    /// Linearize at the current parameters. The set of residuals that are
    /// valid here stays fixed until the next call.
    fn linearize(&mut self) -> Result<Linearization, SolverError>;

    /// Cost after applying `step`, over the residual set of the last
    /// linearization; `None` rejects the step.
    fn trial_cost(&self, step: &DVector<f64>) -> Option<f64>;

    fn apply_step(&mut self, step: &DVector<f64>);

    fn cost_breakdown(&self) -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    fn saturation_count(&self) -> usize {
        0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveConfig {
    pub max_iter: usize,
    /// Relative cost decrease below which the solve stops.
    pub cost_tol: f64,
    /// Max-norm of the gradient below which the solve stops.
    pub grad_tol: f64,
    pub initial_damping: f64,
    /// Absolute cost below which the solve stops.
    pub absolute_cost_tol: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            cost_tol: 1e-8,
            grad_tol: 1e-10,
            initial_damping: 1e-4,
            absolute_cost_tol: 1e-16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    CostTolerance,
    GradientTolerance,
    AbsoluteCost,
    MaxIterations,
    /// Damping grew without finding a decreasing step.
    NoProgress,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub gradient_norm: f64,
    pub termination: Termination,
    pub initial_breakdown: BTreeMap<String, f64>,
    pub final_breakdown: BTreeMap<String, f64>,
    pub saturated_residuals: usize,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        !matches!(self.termination, Termination::MaxIterations | Termination::NoProgress)
    }
}

const MAX_DAMPING: f64 = 1e32;

/// Minimize the problem's robust cost in place.
pub fn solve<P: LeastSquaresProblem>(
    problem: &mut P,
    config: &SolveConfig,
) -> Result<SolveReport, SolverError> {
    let layout = problem.layout();
    let initial_breakdown = problem.cost_breakdown();
    let mut lin = problem.linearize()?;
    let initial_cost = lin.cost;
    let mut cost = lin.cost;
    let mut mu = config.initial_damping;
    let mut nu = 2.0;
    let mut iterations = 0;
    let mut accepted = 0;
    let mut gradient_norm;
    let mut failures = 0;

    let termination = 'outer: loop {
        let normal = NormalEquations::assemble(&layout, &lin)?;
        gradient_norm = normal.gradient().amax();
        if cost <= config.absolute_cost_tol {
            break Termination::AbsoluteCost;
        }
        if gradient_norm < config.grad_tol {
            break Termination::GradientTolerance;
        }
        loop {
            if iterations >= config.max_iter {
                break 'outer Termination::MaxIterations;
            }
            iterations += 1;
            let Some(step) = normal.solve_damped(mu) else {
                failures += 1;
                mu *= 10.0;
                if mu > MAX_DAMPING {
                    if failures == iterations {
                        return Err(SolverError::NumericalFailure);
                    }
                    break 'outer Termination::NoProgress;
                }
                continue;
            };
            if !(step.predicted_reduction > 0.0) {
                mu *= nu;
                nu *= 2.0;
                if mu > MAX_DAMPING {
                    break 'outer Termination::NoProgress;
                }
                continue;
            }
            if step.predicted_reduction <= config.cost_tol * cost * 1e-3 {
                break 'outer Termination::CostTolerance;
            }
            match problem.trial_cost(&step.step) {
                Some(new_cost) if new_cost < cost => {
                    let rho = (cost - new_cost) / step.predicted_reduction;
                    problem.apply_step(&step.step);
                    accepted += 1;
                    mu *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                    nu = 2.0;
                    let rel = (cost - new_cost) / cost;
                    lin = problem.linearize()?;
                    cost = lin.cost;
                    if rel < config.cost_tol {
                        let normal = NormalEquations::assemble(&layout, &lin)?;
                        gradient_norm = normal.gradient().amax();
                        break 'outer Termination::CostTolerance;
                    }
                    continue 'outer;
                }
                _ => {
                    mu *= nu;
                    nu *= 2.0;
                    if mu > MAX_DAMPING {
                        break 'outer Termination::NoProgress;
                    }
                }
            }
        }
    };

    Ok(SolveReport {
        iterations,
        accepted_steps: accepted,
        initial_cost,
        final_cost: cost,
        gradient_norm,
        termination,
        initial_breakdown,
        final_breakdown: problem.cost_breakdown(),
        saturated_residuals: problem.saturation_count(),
    })
}

/// Dense `JᵀWJ` over the free parameters at the current linearization point.
pub fn dense_hessian<P: LeastSquaresProblem>(problem: &mut P) -> Result<DMatrix<f64>, SolverError> {
    let layout = problem.layout();
    let lin = problem.linearize()?;
    Ok(NormalEquations::assemble(&layout, &lin)?.dense_hessian())
}

/// Natural log of `λ_max / λ_min` of the Gauss-Newton Hessian, i.e. twice
/// the log ratio of the whitened Jacobian's extreme singular values.
pub fn hessian_condition<P: LeastSquaresProblem>(problem: &mut P) -> Result<f64, SolverError> {
    log_condition_from_hessian(&dense_hessian(problem)?)
}

pub fn log_condition_from_hessian(h: &DMatrix<f64>) -> Result<f64, SolverError> {
    if h.is_empty() {
        return Err(SolverError::InvalidProblem("empty Hessian".into()));
    }
    let sym = 0.5 * (h + h.transpose());
    let eig = sym.symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    let sigma_min = min.max(0.0).sqrt();
    if sigma_min < 1e-300 || !(max > 0.0) {
        return Err(SolverError::RankDeficient(sigma_min));
    }
    Ok((max / min).ln())
}

/// Same quantity from a whitened Jacobian via its SVD.
pub fn log_condition_from_jacobian(j: &DMatrix<f64>) -> Result<f64, SolverError> {
    if j.is_empty() {
        return Err(SolverError::InvalidProblem("empty Jacobian".into()));
    }
    let sv = j.clone().singular_values();
    let max = sv.max();
    let min = if j.nrows() >= j.ncols() { sv.min() } else { 0.0 };
    if min < 1e-300 {
        return Err(SolverError::RankDeficient(min));
    }
    Ok(2.0 * (max / min).ln())
}
