//! The one-step map: assemble the discrete action over a natural chart,
//! solve the internal-stage stationarity equations together with momentum
//! matching by damped finite-difference Newton, and expose the resulting
//! curve on the group.
//!
//! A step based at `R_k` looks for stage vectors `ξ⁰..ξⁿ` (with `ξ⁰ = 0`
//! pinned) so that the curve `t ↦ R_k · Cay(Σᵢ ξⁱ φᵢ(t))` makes the
//! quadrature action stationary in the interior stages while its left
//! boundary momentum cancels the previous step's right boundary momentum.
//! Consecutive steps use different chart base points, so the boundary
//! condition carries a change-of-chart jacobian.

use crate::basis::{chebyshev_lobatto_nodes, gauss_legendre_rule, BasisTableau, QuadratureRule, StageNodes};
use crate::models::{chart_velocity_for, ChartLagrangian};
use crate::so3::{cay, chart_guard, dcay, hat, ChartHealth, Mat3, Vec3};
use nalgebra::{DMatrix, DVector};

/// Denominators of the chart transition maps smaller than this are treated
/// as singular.
const TRANSITION_TOL: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum StepError {
    #[error("stage/basis dimension mismatch: {what}")]
    DimensionMismatch { what: String },
    #[error("guess must pin stage 0 to zero")]
    UnpinnedGuess,
    #[error("transition singularity: denominator {denominator:.3e}")]
    TransitionSingularity { denominator: f64 },
    #[error("Newton did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("singular Newton matrix at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("curve parameter {t} outside [0, {h}]")]
    OutOfRange { t: f64, h: f64 },
    #[error(transparent)]
    Basis(#[from] crate::basis::BasisError),
}

pub type Result<T> = std::result::Result<T, StepError>;

/// Error from a multi-step integration, tagged with the failing step.
#[derive(Debug, thiserror::Error)]
#[error("step {step}: {source}")]
pub struct IntegrateError {
    pub step: usize,
    #[source]
    pub source: StepError,
}

/// The n+1 stage vectors parametrizing one step in the chart based at `base`.
#[derive(Debug, Clone)]
pub struct StageConfiguration {
    pub base: Mat3,
    /// Ascending node order; `xis[0]` is pinned to zero.
    pub xis: Vec<Vec3>,
}

impl StageConfiguration {
    /// Cold-start guess: every stage at the chart origin.
    pub fn zero(base: Mat3, degree: usize) -> Self {
        StageConfiguration {
            base,
            xis: vec![Vec3::zeros(); degree + 1],
        }
    }

    /// Guess that continues the incoming body velocity through the chart:
    /// `ξⁱ = ξ̇(0) tᵢ` with `ξ̇(0) = −Ω/2`.
    pub fn constant_velocity(base: Mat3, omega: Vec3, nodes: &StageNodes) -> Self {
        let v = chart_velocity_for(omega);
        StageConfiguration {
            base,
            xis: nodes.nodes().iter().map(|&t| v * t).collect(),
        }
    }

    pub fn degree(&self) -> usize {
        self.xis.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuessMode {
    Zero,
    ConstantVelocity,
}

/// Newton solver controls.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Convergence threshold on the residual infinity norm.
    pub residual_tol: f64,
    pub max_iters: usize,
    /// Base forward-difference step; column i uses `fd_step * (1 + |x_i|)`.
    pub fd_step: f64,
    pub initial_guess_mode: GuessMode,
    /// Stage-norm threshold for the per-step chart conditioning report.
    pub chart_warn_threshold: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            residual_tol: 1e-12,
            max_iters: 50,
            fd_step: f64::EPSILON.sqrt(),
            initial_guess_mode: GuessMode::ConstantVelocity,
            chart_warn_threshold: crate::so3::DEFAULT_CHART_WARN_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverStats {
    pub iterations: usize,
    pub final_residual: f64,
    /// Residual infinity norm after each accepted iterate, starting with the
    /// initial guess.
    pub residual_history: Vec<f64>,
}

/// One accepted step of the one-step map.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// `base · Cay(ξⁿ)`, the right endpoint of the Galerkin curve.
    pub next: Mat3,
    pub stages: StageConfiguration,
    /// Right boundary momentum `∂L_d/∂ξⁿ`, fed to the next step.
    pub boundary_momentum_plus: Vec3,
    pub solver_stats: SolverStats,
    pub chart_health: ChartHealth,
}

fn check_dimensions(
    basis: &BasisTableau,
    quad: &QuadratureRule,
    stages: &StageConfiguration,
) -> Result<()> {
    if basis.stage_count() != stages.xis.len() {
        return Err(StepError::DimensionMismatch {
            what: format!(
                "tableau has {} stage columns, configuration has {} stages",
                basis.stage_count(),
                stages.xis.len()
            ),
        });
    }
    if basis.quad_count() != quad.len() {
        return Err(StepError::DimensionMismatch {
            what: format!(
                "tableau has {} quadrature rows, rule has {} points",
                basis.quad_count(),
                quad.len()
            ),
        });
    }
    Ok(())
}

/// Quadrature discrete action of one step:
/// `h Σ_j b_j L(ξ(c_j h), ξ̇(c_j h))` with `ξ(t) = Σᵢ ξⁱ φᵢ(t)`.
pub fn discrete_action<M: ChartLagrangian>(
    model: &M,
    basis: &BasisTableau,
    quad: &QuadratureRule,
    stages: &StageConfiguration,
    h: f64,
) -> Result<f64> {
    check_dimensions(basis, quad, stages)?;
    let mut action = 0.0;
    for j in 0..quad.len() {
        let (xi, xidot) = interpolate_row(basis, stages, j);
        action += quad.weights[j] * model.lagrangian_coords(&stages.base, xi, xidot);
    }
    Ok(h * action)
}

fn interpolate_row(basis: &BasisTableau, stages: &StageConfiguration, j: usize) -> (Vec3, Vec3) {
    let mut xi = Vec3::zeros();
    let mut xidot = Vec3::zeros();
    for (i, stage) in stages.xis.iter().enumerate() {
        xi += stage * basis.phi[(j, i)];
        xidot += stage * basis.dphi[(j, i)];
    }
    (xi, xidot)
}

/// Gradient of the discrete action with respect to every stage vector,
/// returned as n+1 blocks of three. Block 0 and block n are the raw boundary
/// momentum patterns; blocks 1..n-1 are the interior stationarity residuals.
fn action_gradient_blocks<M: ChartLagrangian>(
    model: &M,
    basis: &BasisTableau,
    quad: &QuadratureRule,
    stages: &StageConfiguration,
    h: f64,
) -> Result<Vec<Vec3>> {
    check_dimensions(basis, quad, stages)?;
    let count = stages.xis.len();
    let mut blocks = vec![Vec3::zeros(); count];
    for j in 0..quad.len() {
        let (xi, xidot) = interpolate_row(basis, stages, j);
        let (d_xi, d_xidot) = model.coordinate_gradients(&stages.base, xi, xidot);
        let hb = h * quad.weights[j];
        for (i, block) in blocks.iter_mut().enumerate() {
            *block += hb * (d_xi * basis.phi[(j, i)] + d_xidot * basis.dphi[(j, i)]);
        }
    }
    Ok(blocks)
}

/// Interior-stage stationarity residual: the gradient of the discrete action
/// with respect to `ξ¹..ξⁿ⁻¹`, flattened in node order.
pub fn internal_residual<M: ChartLagrangian>(
    model: &M,
    basis: &BasisTableau,
    quad: &QuadratureRule,
    stages: &StageConfiguration,
    h: f64,
) -> Result<DVector<f64>> {
    if stages.xis[0] != Vec3::zeros() {
        return Err(StepError::UnpinnedGuess);
    }
    let blocks = action_gradient_blocks(model, basis, quad, stages, h)?;
    let interior = blocks.len() - 2;
    let mut residual = DVector::zeros(3 * interior);
    for i in 0..interior {
        residual.fixed_rows_mut::<3>(3 * i).copy_from(&blocks[i + 1]);
    }
    Ok(residual)
}

/// Composition expressed in the departing chart:
/// `hat(λ) = Cay⁻¹(Cay(hat(ξ₀)) · Cay(hat(ξ)))`, in closed form
/// `λ = (ξ₀ × ξ − ξ − ξ₀) / (ξ₀·ξ − 1)`.
pub fn chart_transition(xi0: Vec3, xik: Vec3) -> Result<Vec3> {
    let denominator = xi0.dot(&xik) - 1.0;
    if denominator.abs() < TRANSITION_TOL {
        return Err(StepError::TransitionSingularity { denominator });
    }
    Ok((xi0.cross(&xik) - xik - xi0) / denominator)
}

/// Inverse of [`chart_transition`] in its second argument:
/// `ξ = (λ − ξ₀ + ξ₀ × λ) / (1 + λ·ξ₀)`.
pub fn chart_transition_inv(xi0: Vec3, lambda: Vec3) -> Result<Vec3> {
    let denominator = 1.0 + lambda.dot(&xi0);
    if denominator.abs() < TRANSITION_TOL {
        return Err(StepError::TransitionSingularity { denominator });
    }
    Ok((lambda - xi0 + xi0.cross(&lambda)) / denominator)
}

/// Analytic jacobian `∂ξ/∂λ` of [`chart_transition_inv`] at `(ξ₀, λ)`.
pub fn transition_jacobian(xi0: Vec3, lambda: Vec3) -> Result<Mat3> {
    let denominator = 1.0 + lambda.dot(&xi0);
    if denominator.abs() < TRANSITION_TOL {
        return Err(StepError::TransitionSingularity { denominator });
    }
    let xi = chart_transition_inv(xi0, lambda)?;
    // Quotient rule on (λ − ξ₀ + ξ₀×λ)/(1 + λ·ξ₀).
    Ok((Mat3::identity() + hat(xi0) - xi * xi0.transpose()) / denominator)
}

/// Boundary momenta of one step.
///
/// `d2 = ∂L_d/∂ξⁿ` is the step's right momentum; `d1` is the left momentum
/// pattern `∂L_d/∂ξ⁰` chain-ruled into the previous chart through the
/// transition at `prev_transition` (the stage vector with
/// `base = prev_base · Cay(hat(prev_transition))`; zero on the first step).
pub fn boundary_momenta<M: ChartLagrangian>(
    model: &M,
    basis: &BasisTableau,
    quad: &QuadratureRule,
    stages: &StageConfiguration,
    h: f64,
    prev_transition: Vec3,
) -> Result<(Vec3, Vec3)> {
    let blocks = action_gradient_blocks(model, basis, quad, stages, h)?;
    let d2 = blocks[blocks.len() - 1];
    let lambda = chart_transition(prev_transition, stages.xis[0])?;
    let jac = transition_jacobian(prev_transition, lambda)?;
    let d1 = jac.transpose() * blocks[0];
    Ok((d1, d2))
}

/// Left-trivialized continuous momentum `∂L/∂ξ̇` at the chart origin with the
/// chart velocity matching `Ω₀`; stands in for the previous step's boundary
/// momentum when there is no previous step.
pub fn initialize_first_step<M: ChartLagrangian>(model: &M, r0: &Mat3, omega0: Vec3) -> Vec3 {
    model
        .coordinate_gradients(r0, Vec3::zeros(), chart_velocity_for(omega0))
        .1
}

fn pack(stages: &StageConfiguration) -> DVector<f64> {
    let n = stages.degree();
    let mut x = DVector::zeros(3 * n);
    for i in 1..=n {
        x.fixed_rows_mut::<3>(3 * (i - 1)).copy_from(&stages.xis[i]);
    }
    x
}

fn unpack(base: Mat3, x: &DVector<f64>) -> StageConfiguration {
    let n = x.len() / 3;
    let mut xis = vec![Vec3::zeros(); n + 1];
    for i in 1..=n {
        xis[i] = Vec3::new(x[3 * (i - 1)], x[3 * (i - 1) + 1], x[3 * (i - 1) + 2]);
    }
    StageConfiguration { base, xis }
}

/// Solve one step: interior stationarity plus momentum matching
/// `prev_momentum + d1 = 0`, by damped Newton with a forward-difference
/// jacobian and dense LU.
pub fn step<M: ChartLagrangian>(
    model: &M,
    basis: &BasisTableau,
    quad: &QuadratureRule,
    prev_momentum: Vec3,
    prev_transition: Vec3,
    guess: &StageConfiguration,
    opts: &SolverOptions,
) -> Result<StepResult> {
    if guess.xis[0] != Vec3::zeros() {
        return Err(StepError::UnpinnedGuess);
    }
    check_dimensions(basis, quad, guess)?;
    let base = guess.base;
    let n = guess.degree();
    let h = basis.h;

    // The transition jacobian is evaluated at the pinned left endpoint, so it
    // is constant throughout the solve.
    let lambda0 = chart_transition(prev_transition, Vec3::zeros())?;
    let trans_jac_t = transition_jacobian(prev_transition, lambda0)?.transpose();

    let residual = |x: &DVector<f64>| -> Result<DVector<f64>> {
        let stages = unpack(base, x);
        let blocks = action_gradient_blocks(model, basis, quad, &stages, h)?;
        let mut f = DVector::zeros(3 * n);
        for i in 1..n {
            f.fixed_rows_mut::<3>(3 * (i - 1)).copy_from(&blocks[i]);
        }
        let d1 = trans_jac_t * blocks[0];
        f.fixed_rows_mut::<3>(3 * (n - 1))
            .copy_from(&(prev_momentum + d1));
        Ok(f)
    };

    let mut x = pack(guess);
    let mut f = residual(&x)?;
    let mut res_norm = f.amax();
    let mut history = vec![res_norm];
    let mut iterations = 0;

    while res_norm > opts.residual_tol {
        if iterations >= opts.max_iters {
            return Err(StepError::NonConvergence {
                iterations,
                residual: res_norm,
            });
        }
        let jac = fd_jacobian(&residual, &x, &f, opts.fd_step)?;
        let delta = jac
            .lu()
            .solve(&f)
            .ok_or(StepError::SingularJacobian { iteration: iterations })?;

        // Halve the update until the residual decreases; a full step plus
        // eight halvings before giving up.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..9 {
            let trial = &x - scale * &delta;
            let f_trial = residual(&trial)?;
            let trial_norm = f_trial.amax();
            if trial_norm < res_norm {
                x = trial;
                f = f_trial;
                res_norm = trial_norm;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(StepError::NonConvergence {
                iterations,
                residual: res_norm,
            });
        }
        history.push(res_norm);
        iterations += 1;
    }

    let stages = unpack(base, &x);
    let (_, d2) = boundary_momenta(model, basis, quad, &stages, h, prev_transition)?;
    let chart_health = chart_guard(&stages.xis, opts.chart_warn_threshold);
    let next = base * cay(stages.xis[n]);
    Ok(StepResult {
        next,
        stages,
        boundary_momentum_plus: d2,
        solver_stats: SolverStats {
            iterations,
            final_residual: res_norm,
            residual_history: history,
        },
        chart_health,
    })
}

fn fd_jacobian(
    residual: &dyn Fn(&DVector<f64>) -> Result<DVector<f64>>,
    x: &DVector<f64>,
    f0: &DVector<f64>,
    fd_step: f64,
) -> Result<DMatrix<f64>> {
    let dim = x.len();
    let mut jac = DMatrix::zeros(dim, dim);
    for col in 0..dim {
        let dx = fd_step * (1.0 + x[col].abs());
        let mut shifted = x.clone();
        shifted[col] += dx;
        let f = residual(&shifted)?;
        jac.column_mut(col).copy_from(&((f - f0) / dx));
    }
    Ok(jac)
}

/// Evaluate the Galerkin curve and its body velocity at `t ∈ [0, h]`.
///
/// `t = 0` returns the base point exactly; `t = h` reproduces the step's
/// `next` rotation bit-for-bit because both go through `base · Cay(ξⁿ)`.
pub fn eval_curve(
    stages: &StageConfiguration,
    nodes: &StageNodes,
    t: f64,
) -> Result<(Mat3, Vec3)> {
    let h = nodes.h();
    if !(0.0..=h).contains(&t) {
        return Err(StepError::OutOfRange { t, h });
    }
    let (phi, dphi) = nodes.lagrange_matrices(&[t])?;
    let mut xi = Vec3::zeros();
    let mut xidot = Vec3::zeros();
    for (i, stage) in stages.xis.iter().enumerate() {
        xi += stage * phi[(0, i)];
        xidot += stage * dphi[(0, i)];
    }
    let rotation = stages.base * cay(xi);
    let omega_hat = cay(xi).transpose() * dcay(xi, xidot);
    let skew = 0.5 * (omega_hat - omega_hat.transpose());
    let omega = Vec3::new(skew[(2, 1)], skew[(0, 2)], skew[(1, 0)]);
    Ok((rotation, omega))
}

/// An accepted multi-step trajectory plus everything needed to evaluate its
/// Galerkin curves densely.
#[derive(Debug, Clone)]
pub struct GalerkinTrajectory {
    pub initial_rotation: Mat3,
    pub initial_omega: Vec3,
    pub h: f64,
    pub nodes: StageNodes,
    pub steps: Vec<StepResult>,
}

/// Stepping state machine: chains steps of the one-step map, handing each
/// step the previous step's right boundary momentum, final stage vector (the
/// chart transition), and endpoint as its chart base.
pub struct Integrator<'m, M: ChartLagrangian> {
    model: &'m M,
    nodes: StageNodes,
    quad: QuadratureRule,
    basis: BasisTableau,
    opts: SolverOptions,
    degree: usize,
    base: Mat3,
    omega: Vec3,
    prev_momentum: Vec3,
    prev_transition: Vec3,
    completed: usize,
}

impl<'m, M: ChartLagrangian> Integrator<'m, M> {
    pub fn new(
        model: &'m M,
        r0: Mat3,
        omega0: Vec3,
        h: f64,
        n: usize,
        quad_points: Option<usize>,
        opts: SolverOptions,
    ) -> Result<Self> {
        let nodes = chebyshev_lobatto_nodes(n, h)?;
        let quad = gauss_legendre_rule(quad_points.unwrap_or(n + 1))?;
        let basis = BasisTableau::new(&nodes, &quad)?;
        Ok(Integrator {
            model,
            nodes,
            quad,
            basis,
            opts,
            degree: n,
            base: r0,
            omega: omega0,
            prev_momentum: initialize_first_step(model, &r0, omega0),
            prev_transition: Vec3::zeros(),
            completed: 0,
        })
    }

    pub fn nodes(&self) -> &StageNodes {
        &self.nodes
    }

    /// Steps accepted so far.
    pub fn completed(&self) -> usize {
        self.completed
    }

    /// Rotation at the current trajectory endpoint.
    pub fn rotation(&self) -> Mat3 {
        self.base
    }

    /// Body velocity at the current trajectory endpoint.
    pub fn omega(&self) -> Vec3 {
        self.omega
    }

    /// Solve and accept the next step.
    pub fn advance(&mut self) -> Result<StepResult> {
        let guess = match self.opts.initial_guess_mode {
            GuessMode::Zero => StageConfiguration::zero(self.base, self.degree),
            GuessMode::ConstantVelocity => {
                StageConfiguration::constant_velocity(self.base, self.omega, &self.nodes)
            }
        };
        let result = step(
            self.model,
            &self.basis,
            &self.quad,
            self.prev_momentum,
            self.prev_transition,
            &guess,
            &self.opts,
        )?;
        self.omega = eval_curve(&result.stages, &self.nodes, self.nodes.h())?.1;
        self.base = result.next;
        self.prev_momentum = result.boundary_momentum_plus;
        self.prev_transition = result.stages.xis[self.degree];
        self.completed += 1;
        Ok(result)
    }
}

/// Chain `steps` steps of the one-step map from `(R₀, Ω₀)`.
pub fn integrate<M: ChartLagrangian>(
    model: &M,
    r0: Mat3,
    omega0: Vec3,
    h: f64,
    n: usize,
    quad_points: Option<usize>,
    steps: usize,
    opts: &SolverOptions,
) -> std::result::Result<GalerkinTrajectory, IntegrateError> {
    let mut integrator = Integrator::new(model, r0, omega0, h, n, quad_points, *opts)
        .map_err(|source| IntegrateError { step: 0, source })?;
    let mut results = Vec::with_capacity(steps);
    for k in 0..steps {
        results.push(
            integrator
                .advance()
                .map_err(|source| IntegrateError { step: k, source })?,
        );
    }
    Ok(GalerkinTrajectory {
        initial_rotation: r0,
        initial_omega: omega0,
        h,
        nodes: integrator.nodes,
        steps: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    fn rigid_body() -> ModelSpec {
        ModelSpec::rigid_body(Vec3::new(1.3, 2.1, 1.2)).unwrap()
    }

    fn discretization(n: usize, h: f64) -> (StageNodes, QuadratureRule, BasisTableau) {
        let nodes = chebyshev_lobatto_nodes(n, h).unwrap();
        let quad = gauss_legendre_rule(n + 1).unwrap();
        let basis = BasisTableau::new(&nodes, &quad).unwrap();
        (nodes, quad, basis)
    }

    fn random_stages(
        rng: &mut ChaCha8Rng,
        base: Mat3,
        n: usize,
        scale: f64,
    ) -> StageConfiguration {
        let mut xis = vec![Vec3::zeros(); n + 1];
        for xi in xis.iter_mut().skip(1) {
            *xi = rand_vec(rng, scale);
        }
        StageConfiguration { base, xis }
    }

    #[test]
    fn action_vanishes_for_resting_rigid_body() {
        let model = rigid_body();
        let (_, quad, basis) = discretization(4, 0.5);
        let stages = StageConfiguration::zero(Mat3::identity(), 4);
        assert_eq!(
            discrete_action(&model, &basis, &quad, &stages, 0.5).unwrap(),
            0.0
        );
    }

    #[test]
    fn action_of_resting_pendulum_is_h_times_potential() {
        let model = ModelSpec::pendulum(Vec3::new(1.0, 2.8, 2.0), 1.0, 1.0, Vec3::z()).unwrap();
        let h = 0.7;
        let (_, quad, basis) = discretization(5, h);
        let stages = StageConfiguration::zero(Mat3::identity(), 5);
        let action = discrete_action(&model, &basis, &quad, &stages, h).unwrap();
        assert!((action - h).abs() <= 1e-14);
    }

    #[test]
    fn action_is_quadrature_converged_at_default_order() {
        // m = n + 1 Gauss points against a heavily over-resolved rule.
        let model = rigid_body();
        let n = 3;
        let h = 0.5;
        let nodes = chebyshev_lobatto_nodes(n, h).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // The defect of the m = n + 1 rule on this rational integrand scales
        // like the fourth power of the stage amplitude; small stages put it
        // below 1e-10 absolute.
        let stages = random_stages(&mut rng, Mat3::identity(), n, 1e-3);

        let coarse_rule = gauss_legendre_rule(n + 1).unwrap();
        let coarse_tab = BasisTableau::new(&nodes, &coarse_rule).unwrap();
        let coarse = discrete_action(&model, &coarse_tab, &coarse_rule, &stages, h).unwrap();

        let fine_rule = gauss_legendre_rule(40).unwrap();
        let fine_tab = BasisTableau::new(&nodes, &fine_rule).unwrap();
        let fine = discrete_action(&model, &fine_tab, &fine_rule, &stages, h).unwrap();

        assert!((coarse - fine).abs() <= 1e-10);
    }

    #[test]
    fn action_rejects_dimension_mismatch() {
        let model = rigid_body();
        let (_, quad, basis) = discretization(4, 0.5);
        let stages = StageConfiguration::zero(Mat3::identity(), 3);
        assert!(matches!(
            discrete_action(&model, &basis, &quad, &stages, 0.5),
            Err(StepError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn internal_residual_vanishes_at_equilibrium() {
        let model = rigid_body();
        let (_, quad, basis) = discretization(5, 0.5);
        let stages = StageConfiguration::zero(Mat3::identity(), 5);
        let r = internal_residual(&model, &basis, &quad, &stages, 0.5).unwrap();
        assert_eq!(r.amax(), 0.0);
    }

    #[test]
    fn internal_residual_scales_linearly_with_the_lagrangian() {
        struct Scaled(ModelSpec, f64);
        impl ChartLagrangian for Scaled {
            fn lagrangian_coords(&self, base: &Mat3, xi: Vec3, xidot: Vec3) -> f64 {
                self.1 * self.0.lagrangian_coords(base, xi, xidot)
            }
            fn coordinate_gradients(&self, base: &Mat3, xi: Vec3, xidot: Vec3) -> (Vec3, Vec3) {
                let (a, b) = self.0.coordinate_gradients(base, xi, xidot);
                (self.1 * a, self.1 * b)
            }
        }
        let model = rigid_body();
        let scaled = Scaled(rigid_body(), 7.3);
        let n = 4;
        let h = 0.5;
        let (_, quad, basis) = discretization(n, h);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let stages = random_stages(&mut rng, Mat3::identity(), n, 0.4);
        let r1 = internal_residual(&model, &basis, &quad, &stages, h).unwrap();
        let r2 = internal_residual(&scaled, &basis, &quad, &stages, h).unwrap();
        assert!((r2 - 7.3 * r1).amax() <= 1e-12);
    }

    #[test]
    fn chart_transition_identity_cases() {
        let a = Vec3::new(0.3, -0.2, 0.4);
        assert!((chart_transition(Vec3::zeros(), a).unwrap() - a).norm() <= 1e-15);
        assert!((chart_transition(a, Vec3::zeros()).unwrap() - a).norm() <= 1e-15);
        assert!((chart_transition_inv(Vec3::zeros(), a).unwrap() - a).norm() <= 1e-15);
    }

    #[test]
    fn chart_transition_matches_group_multiplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..100 {
            let a = rand_vec(&mut rng, 0.5);
            let b = rand_vec(&mut rng, 0.5);
            let lambda = chart_transition(a, b).unwrap();
            assert!((cay(lambda) - cay(a) * cay(b)).norm() <= 1e-12);
        }
    }

    #[test]
    fn chart_transition_inv_matches_group_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..100 {
            let xi0 = rand_vec(&mut rng, 0.5);
            let lambda = rand_vec(&mut rng, 0.5);
            let xi = chart_transition_inv(xi0, lambda).unwrap();
            let expected = cay(xi0).transpose() * cay(lambda);
            assert!((cay(xi) - expected).norm() <= 1e-12);
            // Round trip back through the forward transition.
            let back = chart_transition(xi0, xi).unwrap();
            assert!((back - lambda).norm() <= 1e-12);
        }
    }

    #[test]
    fn chart_transition_detects_singularity() {
        // ξ₀·ξ = 1 makes the composition angle hit pi.
        let e = Vec3::new(1.0, 0.0, 0.0);
        assert!(matches!(
            chart_transition(e, e),
            Err(StepError::TransitionSingularity { .. })
        ));
    }

    #[test]
    fn transition_jacobian_identity_and_finite_differences() {
        let lam = Vec3::new(0.2, 0.1, -0.3);
        let jac = transition_jacobian(Vec3::zeros(), lam).unwrap();
        assert!((jac - Mat3::identity()).norm() <= 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let eps = 1e-6;
        for _ in 0..50 {
            let xi0 = rand_vec(&mut rng, 0.6);
            let lambda = rand_vec(&mut rng, 0.6);
            let jac = transition_jacobian(xi0, lambda).unwrap();
            assert!(jac.determinant().abs() > 1e-6);
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = eps;
                let hi = chart_transition_inv(xi0, lambda + e).unwrap();
                let lo = chart_transition_inv(xi0, lambda - e).unwrap();
                let fd = (hi - lo) / (2.0 * eps);
                assert!((jac.column(k) - fd).norm() <= 1e-6);
            }
        }
    }

    #[test]
    fn boundary_momenta_match_finite_differences_of_the_action() {
        let model = rigid_body();
        let n = 5;
        let h = 0.5;
        let (_, quad, basis) = discretization(n, h);
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let stages = random_stages(&mut rng, Mat3::identity(), n, 0.4);
        let eps = 1e-6;

        // With a zero previous transition the jacobian is the identity and d1
        // is the raw left-endpoint pattern.
        let (d1, d2) = boundary_momenta(&model, &basis, &quad, &stages, h, Vec3::zeros()).unwrap();
        for k in 0..3 {
            let mut probe = stages.clone();
            probe.xis[n][k] += eps;
            let hi = discrete_action(&model, &basis, &quad, &probe, h).unwrap();
            probe.xis[n][k] -= 2.0 * eps;
            let lo = discrete_action(&model, &basis, &quad, &probe, h).unwrap();
            let fd = (hi - lo) / (2.0 * eps);
            assert!((d2[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()));

            let mut probe = stages.clone();
            probe.xis[0][k] += eps;
            let hi = discrete_action(&model, &basis, &quad, &probe, h).unwrap();
            probe.xis[0][k] -= 2.0 * eps;
            let lo = discrete_action(&model, &basis, &quad, &probe, h).unwrap();
            let fd = (hi - lo) / (2.0 * eps);
            assert!((d1[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
        }

        // All stages zero: both momenta vanish for the free rigid body.
        let rest = StageConfiguration::zero(Mat3::identity(), n);
        let (d1, d2) = boundary_momenta(&model, &basis, &quad, &rest, h, Vec3::zeros()).unwrap();
        assert_eq!(d1 + d2, Vec3::zeros());
    }

    #[test]
    fn step_keeps_resting_body_at_rest() {
        let model = rigid_body();
        let (_, quad, basis) = discretization(6, 0.5);
        let base = cay(Vec3::new(0.1, 0.7, -0.3));
        let guess = StageConfiguration::zero(base, 6);
        let result = step(
            &model,
            &basis,
            &quad,
            Vec3::zeros(),
            Vec3::zeros(),
            &guess,
            &SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(result.next, base);
        assert_eq!(result.solver_stats.iterations, 0);
        assert!(result.stages.xis.iter().all(|xi| *xi == Vec3::zeros()));
    }

    #[test]
    fn step_rejects_unpinned_guess() {
        let model = rigid_body();
        let (_, quad, basis) = discretization(4, 0.5);
        let mut guess = StageConfiguration::zero(Mat3::identity(), 4);
        guess.xis[0] = Vec3::new(1e-3, 0.0, 0.0);
        assert!(matches!(
            step(
                &model,
                &basis,
                &quad,
                Vec3::zeros(),
                Vec3::zeros(),
                &guess,
                &SolverOptions::default(),
            ),
            Err(StepError::UnpinnedGuess)
        ));
    }

    #[test]
    fn first_step_momentum_examples() {
        let model = rigid_body();
        assert_eq!(
            initialize_first_step(&model, &Mat3::identity(), Vec3::zeros()),
            Vec3::zeros()
        );
        // Quadratic kinetic energy: the start-up momentum is linear in Ω₀.
        let a = initialize_first_step(&model, &Mat3::identity(), Vec3::new(1.0, 0.0, 2.0));
        let b = initialize_first_step(&model, &Mat3::identity(), Vec3::new(0.0, 3.0, -1.0));
        let ab = initialize_first_step(&model, &Mat3::identity(), Vec3::new(1.0, 3.0, 1.0));
        assert!((ab - a - b).norm() <= 1e-12);
        // ∂L/∂ξ̇ at the origin with ξ̇ = −Ω/2 is −2 J∘Ω for this model.
        let expected = -2.0 * model.moments().component_mul(&Vec3::new(1.0, 0.0, 2.0));
        assert!((a - expected).norm() <= 1e-12);
    }

    #[test]
    fn eval_curve_endpoints_and_orthogonality() {
        let model = rigid_body();
        let h = 0.5;
        let n = 8;
        let opts = SolverOptions::default();
        let traj = integrate(
            &model,
            Mat3::identity(),
            Vec3::new(2.0, -1.9, 1.0),
            h,
            n,
            None,
            1,
            &opts,
        )
        .unwrap();
        let result = &traj.steps[0];
        let (r0, omega0) = eval_curve(&result.stages, &traj.nodes, 0.0).unwrap();
        assert_eq!(r0, Mat3::identity());
        // The curve velocity is one derivative rougher than the curve itself;
        // at n = 8 with this fast spin it is accurate to ~1e-5.
        assert!((omega0 - Vec3::new(2.0, -1.9, 1.0)).norm() <= 1e-4);

        let (rh, _) = eval_curve(&result.stages, &traj.nodes, h).unwrap();
        assert_eq!(rh, result.next);

        for k in 0..=50 {
            let t = h * k as f64 / 50.0;
            let (r, _) = eval_curve(&result.stages, &traj.nodes, t).unwrap();
            assert!(crate::so3::rotation_defect(&r) <= 1e-12);
        }
        assert!(matches!(
            eval_curve(&result.stages, &traj.nodes, h * 1.01),
            Err(StepError::OutOfRange { .. })
        ));
    }

    #[test]
    fn integrate_keeps_zero_velocity_constant() {
        let model = rigid_body();
        let base = cay(Vec3::new(0.4, -0.2, 0.6));
        let traj = integrate(
            &model,
            base,
            Vec3::zeros(),
            0.5,
            4,
            None,
            10,
            &SolverOptions::default(),
        )
        .unwrap();
        for step in &traj.steps {
            assert_eq!(step.next, base);
        }
    }

    #[test]
    fn momentum_matching_holds_at_every_accepted_step() {
        let model = rigid_body();
        let opts = SolverOptions::default();
        let traj = integrate(
            &model,
            Mat3::identity(),
            Vec3::new(2.0, -1.9, 1.0),
            0.5,
            6,
            None,
            8,
            &opts,
        )
        .unwrap();
        let nodes = &traj.nodes;
        let quad = gauss_legendre_rule(7).unwrap();
        let basis = BasisTableau::new(nodes, &quad).unwrap();

        let mut prev_momentum = initialize_first_step(&model, &Mat3::identity(), traj.initial_omega);
        let mut prev_transition = Vec3::zeros();
        for step in &traj.steps {
            let (d1, d2) = boundary_momenta(
                &model,
                &basis,
                &quad,
                &step.stages,
                traj.h,
                prev_transition,
            )
            .unwrap();
            assert!((prev_momentum + d1).amax() <= opts.residual_tol * 10.0);
            prev_momentum = d2;
            prev_transition = step.stages.xis[6];
        }
    }
}
