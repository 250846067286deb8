//! Conserved-quantity bookkeeping, trajectory error metrics, convergence-rate
//! fitting, and an independent low-order splitting reference integrator.
//!
//! The splitting integrator shares no assembly code with the spectral
//! stepper: it advances the free rigid body by exactly integrable single-axis
//! rotations (with a Strang-split gravity kick for the pendulum), so the two
//! can cross-validate each other.

use crate::models::ModelSpec;
use crate::so3::{group_error, rotation_defect, Mat3, Vec3};
use crate::stepper::{eval_curve, GalerkinTrajectory};

#[derive(Debug, thiserror::Error)]
pub enum DiagnosticsError {
    #[error("trajectories sample different times (index {index}: {a} vs {b})")]
    MismatchedTimes { index: usize, a: f64, b: f64 },
    #[error("trajectories have different lengths ({a} vs {b})")]
    MismatchedLengths { a: usize, b: usize },
    #[error("rate fit needs at least 3 usable rows, found {usable}")]
    TooFewPoints { usable: usize },
    #[error(transparent)]
    Step(#[from] crate::stepper::StepError),
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

/// Body angular momentum `y = J Ω` (elementwise, J diagonal).
pub fn body_momentum(model: &ModelSpec, omega: Vec3) -> Vec3 {
    model.moments().component_mul(&omega)
}

/// The two momentum-space invariants of the free rigid body:
/// `C(y) = ½ Σ yᵢ²` and `H(y) = ½ Σ yᵢ²/Iᵢ`.
pub fn invariants(y: Vec3, moments: Vec3) -> (f64, f64) {
    let c = 0.5 * y.norm_squared();
    let h = 0.5 * (y.x * y.x / moments.x + y.y * y.y / moments.y + y.z * y.z / moments.z);
    (c, h)
}

/// Total energy `E = K + V` from the model's matrix forms: the kinetic part
/// of the Lagrangian plus the potential with its sign flipped.
pub fn energy(model: &ModelSpec, r: &Mat3, omega: Vec3) -> f64 {
    let weighted = model.moments().component_mul(&omega);
    let kinetic = model.kinetic_matrix_prefactor * omega.dot(&weighted);
    let potential = match &model.potential {
        Some(p) => -p.mass * p.gravity * p.up.dot(&(r * p.com)),
        None => 0.0,
    };
    kinetic + potential
}

/// Conserved-quantity snapshot along a trajectory.
#[derive(Debug, Clone, Copy)]
pub struct InvariantSample {
    pub t: f64,
    pub energy: f64,
    pub momentum: Vec3,
    pub c_invariant: f64,
    pub h_invariant: f64,
    pub orthogonality_defect: f64,
}

pub fn invariant_sample(model: &ModelSpec, t: f64, r: &Mat3, omega: Vec3) -> InvariantSample {
    let momentum = body_momentum(model, omega);
    let (c_invariant, h_invariant) = invariants(momentum, model.moments());
    InvariantSample {
        t,
        energy: energy(model, r, omega),
        momentum,
        c_invariant,
        h_invariant,
        orthogonality_defect: rotation_defect(r),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrajectorySample {
    pub t: f64,
    pub rotation: Mat3,
    pub omega: Vec3,
}

/// A time-sampled trajectory, the common currency between the spectral
/// integrator, the splitting reference, and the error metrics.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
}

/// Sample a spectral trajectory at its step endpoints (including t = 0).
pub fn sample_endpoints(traj: &GalerkinTrajectory) -> Result<Trajectory> {
    let mut samples = vec![TrajectorySample {
        t: 0.0,
        rotation: traj.initial_rotation,
        omega: traj.initial_omega,
    }];
    for (k, step) in traj.steps.iter().enumerate() {
        let (rotation, omega) = eval_curve(&step.stages, &traj.nodes, traj.h)?;
        samples.push(TrajectorySample {
            t: (k + 1) as f64 * traj.h,
            rotation,
            omega,
        });
    }
    Ok(Trajectory { samples })
}

/// Evaluate a spectral trajectory's Galerkin curve at any global time in
/// `[0, steps * h]`.
pub fn eval_at(traj: &GalerkinTrajectory, t: f64) -> Result<(Mat3, Vec3)> {
    let k = ((t / traj.h).floor() as usize).min(traj.steps.len().saturating_sub(1));
    let local = (t - k as f64 * traj.h).clamp(0.0, traj.h);
    Ok(eval_curve(&traj.steps[k].stages, &traj.nodes, local)?)
}

/// Sample a spectral trajectory densely, `per_step` subintervals per step.
pub fn sample_dense(traj: &GalerkinTrajectory, per_step: usize) -> Result<Trajectory> {
    let mut samples = vec![TrajectorySample {
        t: 0.0,
        rotation: traj.initial_rotation,
        omega: traj.initial_omega,
    }];
    for (k, step) in traj.steps.iter().enumerate() {
        for j in 1..=per_step {
            let local = traj.h * j as f64 / per_step as f64;
            let (rotation, omega) = eval_curve(&step.stages, &traj.nodes, local.min(traj.h))?;
            samples.push(TrajectorySample {
                t: k as f64 * traj.h + local,
                rotation,
                omega,
            });
        }
    }
    Ok(Trajectory { samples })
}

fn axis_rotation(axis: usize, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let mut m = Mat3::identity();
    let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
    m[(i, i)] = c;
    m[(j, j)] = c;
    m[(i, j)] = -s;
    m[(j, i)] = s;
    m
}

/// One exactly integrable sub-rotation of the free rigid body about a
/// principal axis: the attitude turns by `ω dt` about the axis while the
/// body momentum rotates the opposite way.
fn drift_axis(r: &mut Mat3, y: &mut Vec3, moments: Vec3, axis: usize, dt: f64) {
    let angle = y[axis] / moments[axis] * dt;
    let rot = axis_rotation(axis, angle);
    *r *= rot;
    *y = rot.transpose() * *y;
}

fn free_drift(r: &mut Mat3, y: &mut Vec3, moments: Vec3, dt: f64) {
    drift_axis(r, y, moments, 0, 0.5 * dt);
    drift_axis(r, y, moments, 1, 0.5 * dt);
    drift_axis(r, y, moments, 2, dt);
    drift_axis(r, y, moments, 1, 0.5 * dt);
    drift_axis(r, y, moments, 0, 0.5 * dt);
}

/// Second-order splitting reference integrator.
///
/// Strang composition of single-axis free rotations, wrapped in half-step
/// gravity kicks `ẏ = m g ρ × (Rᵀe₃)` when the model has a potential. Records
/// every `stride`-th step (plus the initial state and the final step).
pub fn splitting_oracle(
    model: &ModelSpec,
    r0: &Mat3,
    omega0: Vec3,
    h_small: f64,
    steps: usize,
    stride: usize,
) -> Trajectory {
    assert!(h_small > 0.0, "h_small must be positive");
    let stride = stride.max(1);
    let moments = model.moments();
    let mut r = *r0;
    let mut y = body_momentum(model, omega0);
    let mut samples = Vec::with_capacity(steps / stride + 2);
    let omega_of = |y: Vec3| Vec3::new(y.x / moments.x, y.y / moments.y, y.z / moments.z);
    samples.push(TrajectorySample {
        t: 0.0,
        rotation: r,
        omega: omega_of(y),
    });
    for k in 0..steps {
        if let Some(p) = &model.potential {
            let torque = p.mass * p.gravity * p.com.cross(&(r.transpose() * p.up));
            y += 0.5 * h_small * torque;
            free_drift(&mut r, &mut y, moments, h_small);
            let torque = p.mass * p.gravity * p.com.cross(&(r.transpose() * p.up));
            y += 0.5 * h_small * torque;
        } else {
            free_drift(&mut r, &mut y, moments, h_small);
        }
        if (k + 1) % stride == 0 || k + 1 == steps {
            samples.push(TrajectorySample {
                t: (k + 1) as f64 * h_small,
                rotation: r,
                omega: omega_of(y),
            });
        }
    }
    Trajectory { samples }
}

/// Maximum group error over shared sample times.
///
/// The two trajectories must sample identical times; anything else is a
/// caller bug, not something to paper over.
pub fn trajectory_error(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    if a.samples.len() != b.samples.len() {
        return Err(DiagnosticsError::MismatchedLengths {
            a: a.samples.len(),
            b: b.samples.len(),
        });
    }
    let mut worst = 0.0f64;
    for (index, (sa, sb)) in a.samples.iter().zip(&b.samples).enumerate() {
        if (sa.t - sb.t).abs() > 1e-9 * (1.0 + sa.t.abs()) {
            return Err(DiagnosticsError::MismatchedTimes {
                index,
                a: sa.t,
                b: sb.t,
            });
        }
        worst = worst.max(group_error(&sa.rotation, &sb.rotation));
    }
    Ok(worst)
}

/// One cell of a refinement sweep.
#[derive(Debug, Clone, Copy)]
pub struct ConvergenceRow {
    /// Refinement parameter: n for spectral sweeps, h for step sweeps.
    pub parameter: f64,
    pub one_step_error: f64,
    pub curve_error: f64,
    pub converged: bool,
}

/// Sweep results sorted by refinement parameter.
#[derive(Debug, Clone, Default)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceTable {
    pub fn new(mut rows: Vec<ConvergenceRow>) -> Self {
        rows.sort_by(|a, b| a.parameter.total_cmp(&b.parameter));
        ConvergenceTable { rows }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateMode {
    /// Fit ln(error) against n; the slope is ln of the geometric ratio.
    GeometricInN,
    /// Fit ln(error) against ln(h); the slope is the algebraic order.
    AlgebraicInH,
}

/// Least-squares slope of the one-step error in the requested coordinates.
///
/// Rows whose error is not finite, not positive, or below `error_floor`
/// (nonconvergent cells, solver-limited cells) are excluded; at least three
/// usable rows must remain.
pub fn fit_rate(table: &ConvergenceTable, mode: RateMode, error_floor: f64) -> Result<f64> {
    let points: Vec<(f64, f64)> = table
        .rows
        .iter()
        .filter(|row| row.converged && row.one_step_error.is_finite() && row.one_step_error > error_floor)
        .map(|row| {
            let x = match mode {
                RateMode::GeometricInN => row.parameter,
                RateMode::AlgebraicInH => row.parameter.ln(),
            };
            (x, row.one_step_error.ln())
        })
        .collect();
    if points.len() < 3 {
        return Err(DiagnosticsError::TooFewPoints {
            usable: points.len(),
        });
    }
    Ok(least_squares_slope(&points))
}

fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Spearman rank correlation with tie-averaged ranks.
pub fn spearman_rank_correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "series must have equal length");
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let points: Vec<(f64, f64)> = ra.into_iter().zip(rb).collect();
    pearson(&points)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx: f64 = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my: f64 = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in points {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    cov / (vx * vy).sqrt()
}
