//! Experiment driver: JSON configuration with presets for the standard
//! experiments, the five commands behind the `lie-svi` binary, and CSV
//! emission.
//!
//! Exit-code contract: 0 success, 1 configuration error, 2 solver
//! nonconvergence, 3 reference cross-check failure.

use crate::diagnostics::{
    self, eval_at, fit_rate, invariant_sample, sample_endpoints, splitting_oracle,
    trajectory_error, ConvergenceRow, ConvergenceTable, DiagnosticsError, RateMode,
};
use crate::models::ModelSpec;
use crate::so3::{group_error, is_rotation, ChartStatus, Mat3, Vec3};
use crate::stepper::{
    integrate, GalerkinTrajectory, GuessMode, IntegrateError, Integrator, SolverOptions,
};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Caps the number of worker threads used for sweep cells.
pub const THREADS_ENV_VAR: &str = "LIE_SVI_THREADS";

pub const SIMULATE_HEADER: &str = "k,t,r11,r12,r13,r21,r22,r23,r31,r32,r33,omega_x,omega_y,omega_z,energy,y1,y2,y3,c_invariant,h_invariant,orthogonality_defect,newton_iterations,residual,max_stage_norm";
pub const TRAJECTORY_HEADER: &str =
    "t,r11,r12,r13,r21,r22,r23,r31,r32,r33,omega_x,omega_y,omega_z";
pub const CONVERGENCE_HEADER: &str = "parameter,one_step_error,curve_error,converged";
pub const INVARIANTS_RUN_HEADER: &str = "k,t,y1,y2,y3,c_invariant,h_invariant";
pub const INVARIANTS_SUMMARY_HEADER: &str = "run,max_rel_drift_c,max_rel_drift_h";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Integration(#[from] IntegrateError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("reference cross-check failed: mutual error {error:.3e} exceeds {tolerance:.3e}")]
    ReferenceMismatch { error: f64, tolerance: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Integration(_) | CliError::Diagnostics(_) => 2,
            CliError::ReferenceMismatch { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn config_err(message: impl Into<String>) -> CliError {
    CliError::Config(message.into())
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    model: Option<RawModel>,
    r0: Option<[f64; 9]>,
    omega0: Option<[f64; 3]>,
    h: Option<f64>,
    n: Option<usize>,
    m: Option<usize>,
    steps: Option<usize>,
    solver: Option<RawSolver>,
    n_list: Option<Vec<usize>>,
    h_list: Option<Vec<f64>>,
    reference: Option<RawReference>,
    dense_samples_per_step: Option<usize>,
    invariants: Option<RawInvariants>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    jd: [f64; 3],
    potential: Option<RawPotential>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPotential {
    mass: Option<f64>,
    gravity: Option<f64>,
    rho: Option<[f64; 3]>,
    up: Option<[f64; 3]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    residual_tol: Option<f64>,
    max_iters: Option<usize>,
    fd_step: Option<f64>,
    initial_guess: Option<String>,
    chart_warn_threshold: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReference {
    n: Option<usize>,
    h: Option<f64>,
    splitting_h: Option<f64>,
    tolerance: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInvariants {
    count: Option<usize>,
    seed: Option<u64>,
    momenta: Option<Vec<[f64; 3]>>,
}

/// Reference trajectory controls for cross-checks and convergence sweeps.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceSpec {
    pub n: usize,
    pub h: f64,
    pub splitting_h: f64,
    pub tolerance: f64,
}

/// Initial conditions for the invariants command: explicit momenta, or a
/// seeded count of points drawn on the unit momentum sphere (C = 1/2).
#[derive(Debug, Clone)]
pub struct InvariantsSpec {
    pub count: usize,
    pub seed: u64,
    pub momenta: Option<Vec<Vec3>>,
}

/// A fully validated experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub r0: Mat3,
    pub omega0: Vec3,
    pub h: f64,
    pub n: usize,
    pub quad_points: usize,
    pub steps: usize,
    pub solver: SolverOptions,
    pub n_list: Vec<usize>,
    pub h_list: Vec<f64>,
    pub reference: ReferenceSpec,
    pub dense_samples_per_step: usize,
    pub invariants: InvariantsSpec,
}

struct Preset {
    model: ModelSpec,
    r0: Mat3,
    omega0: Vec3,
}

fn lookup_preset(name: &str) -> Result<Preset> {
    let jd_rigid = Vec3::new(1.3, 2.1, 1.2);
    let jd_pend = Vec3::new(1.0, 2.8, 2.0);
    let omega_pend = Vec3::new(0.5, -0.5, 0.4);
    let build = |model: crate::models::Result<ModelSpec>| {
        model.map_err(|e| config_err(format!("preset model: {e}")))
    };
    match name {
        "rigid-body" => Ok(Preset {
            model: build(ModelSpec::rigid_body(jd_rigid))?,
            r0: Mat3::identity(),
            omega0: Vec3::new(2.0, -1.9, 1.0),
        }),
        "pendulum-stable" => Ok(Preset {
            model: build(ModelSpec::pendulum(jd_pend, 1.0, 1.0, Vec3::z()))?,
            r0: Mat3::identity(),
            omega0: omega_pend,
        }),
        "pendulum-unstable" => Ok(Preset {
            model: build(ModelSpec::pendulum(jd_pend, 1.0, 1.0, Vec3::z()))?,
            r0: Mat3::from_diagonal(&Vec3::new(-1.0, 1.0, -1.0)),
            omega0: omega_pend,
        }),
        other => Err(config_err(format!(
            "preset: unknown preset {other:?} (expected rigid-body, pendulum-stable, or pendulum-unstable)"
        ))),
    }
}

fn build_model(raw: &RawModel) -> Result<ModelSpec> {
    let jd = Vec3::from(raw.jd);
    match &raw.potential {
        None => ModelSpec::rigid_body(jd).map_err(|e| config_err(format!("model.jd: {e}"))),
        Some(p) => ModelSpec::pendulum_with_up(
            jd,
            p.mass.unwrap_or(1.0),
            p.gravity.unwrap_or(1.0),
            p.rho.map(Vec3::from).unwrap_or_else(Vec3::z),
            p.up.map(Vec3::from).unwrap_or_else(Vec3::z),
        )
        .map_err(|e| config_err(format!("model.potential: {e}"))),
    }
}

/// Parse and validate a JSON experiment configuration.
///
/// A `preset` expands to one of the standard experiments; explicit keys
/// override preset values field by field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig =
        serde_json::from_str(text).map_err(|e| config_err(format!("invalid config: {e}")))?;

    let preset = raw.preset.as_deref().map(lookup_preset).transpose()?;

    let model = match (&raw.model, &preset) {
        (Some(m), _) => build_model(m)?,
        (None, Some(p)) => p.model,
        (None, None) => return Err(config_err("model: required unless a preset is given")),
    };
    let r0 = match (&raw.r0, &preset) {
        (Some(entries), _) => {
            let r = Mat3::from_row_slice(entries);
            if !is_rotation(&r) {
                return Err(config_err("r0: not a rotation matrix (orthogonality or orientation defect)"));
            }
            r
        }
        (None, Some(p)) => p.r0,
        (None, None) => Mat3::identity(),
    };
    let omega0 = match (&raw.omega0, &preset) {
        (Some(w), _) => Vec3::from(*w),
        (None, Some(p)) => p.omega0,
        (None, None) => Vec3::zeros(),
    };

    let h = raw.h.unwrap_or(0.5);
    if !(h > 0.0 && h.is_finite()) {
        return Err(config_err(format!("h: must be positive and finite, got {h}")));
    }
    let n = raw.n.unwrap_or(8);
    if n < 2 {
        return Err(config_err(format!("n: must be at least 2, got {n}")));
    }
    let quad_points = raw.m.unwrap_or(n + 1);
    if quad_points < 1 {
        return Err(config_err("m: must be at least 1"));
    }
    let steps = raw.steps.unwrap_or(10);
    if steps < 1 {
        return Err(config_err(format!("steps: must be at least 1, got {steps}")));
    }

    let mut solver = SolverOptions::default();
    if let Some(s) = &raw.solver {
        if let Some(tol) = s.residual_tol {
            if !(tol > 0.0) {
                return Err(config_err("solver.residual_tol: must be positive"));
            }
            solver.residual_tol = tol;
        }
        if let Some(iters) = s.max_iters {
            if iters < 1 {
                return Err(config_err("solver.max_iters: must be at least 1"));
            }
            solver.max_iters = iters;
        }
        if let Some(fd) = s.fd_step {
            if !(fd > 0.0) {
                return Err(config_err("solver.fd_step: must be positive"));
            }
            solver.fd_step = fd;
        }
        if let Some(guess) = &s.initial_guess {
            solver.initial_guess_mode = match guess.as_str() {
                "zero" => GuessMode::Zero,
                "constant-velocity" => GuessMode::ConstantVelocity,
                other => {
                    return Err(config_err(format!(
                        "solver.initial_guess: expected \"zero\" or \"constant-velocity\", got {other:?}"
                    )))
                }
            };
        }
        if let Some(w) = s.chart_warn_threshold {
            if !(w > 0.0) {
                return Err(config_err("solver.chart_warn_threshold: must be positive"));
            }
            solver.chart_warn_threshold = w;
        }
    }

    let n_list = raw.n_list.unwrap_or_default();
    if n_list.iter().any(|&k| k < 2) {
        return Err(config_err("n_list: every entry must be at least 2"));
    }
    let h_list = raw.h_list.unwrap_or_default();
    if h_list.iter().any(|&hh| !(hh > 0.0 && hh.is_finite())) {
        return Err(config_err("h_list: every entry must be positive and finite"));
    }

    let reference = ReferenceSpec {
        n: raw.reference.as_ref().and_then(|r| r.n).unwrap_or(26),
        h: raw.reference.as_ref().and_then(|r| r.h).unwrap_or(h),
        splitting_h: raw
            .reference
            .as_ref()
            .and_then(|r| r.splitting_h)
            .unwrap_or(1e-5),
        tolerance: raw
            .reference
            .as_ref()
            .and_then(|r| r.tolerance)
            .unwrap_or(1e-6),
    };
    if reference.n < 2 {
        return Err(config_err("reference.n: must be at least 2"));
    }
    if !(reference.h > 0.0) || !(reference.splitting_h > 0.0) || !(reference.tolerance > 0.0) {
        return Err(config_err("reference: h, splitting_h, and tolerance must be positive"));
    }

    let invariants = InvariantsSpec {
        count: raw.invariants.as_ref().and_then(|i| i.count).unwrap_or(5),
        seed: raw.invariants.as_ref().and_then(|i| i.seed).unwrap_or(9001),
        momenta: raw
            .invariants
            .as_ref()
            .and_then(|i| i.momenta.as_ref())
            .map(|list| list.iter().map(|y| Vec3::from(*y)).collect()),
    };
    if invariants.count < 1 && invariants.momenta.is_none() {
        return Err(config_err("invariants.count: must be at least 1"));
    }

    Ok(ExperimentConfig {
        model,
        r0,
        omega0,
        h,
        n,
        quad_points,
        steps,
        solver,
        n_list,
        h_list,
        reference,
        dense_samples_per_step: raw.dense_samples_per_step.unwrap_or(16),
        invariants,
    })
}

// ---------------------------------------------------------------------------
// CSV plumbing

/// 17 significant digits: round-trip safe for 64-bit floats, so identical
/// configs produce byte-identical files.
fn fmt(value: f64) -> String {
    format!("{value:.16e}")
}

fn write_lines(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{header}")?;
    for row in rows {
        writeln!(out, "{row}")?;
    }
    out.flush()?;
    Ok(())
}

fn rotation_fields(r: &Mat3) -> String {
    let mut parts = Vec::with_capacity(9);
    for i in 0..3 {
        for j in 0..3 {
            parts.push(fmt(r[(i, j)]));
        }
    }
    parts.join(",")
}

fn trajectory_rows(samples: &[diagnostics::TrajectorySample]) -> Vec<String> {
    samples
        .iter()
        .map(|s| {
            format!(
                "{},{},{},{},{}",
                fmt(s.t),
                rotation_fields(&s.rotation),
                fmt(s.omega.x),
                fmt(s.omega.y),
                fmt(s.omega.z)
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Sweep-cell parallelism

fn thread_cap() -> usize {
    std::env::var(THREADS_ENV_VAR)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Run one closure per input on up to `LIE_SVI_THREADS` workers, preserving
/// input order in the results.
fn run_cells<I: Sync, O: Send>(inputs: &[I], job: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let workers = thread_cap().min(inputs.len()).max(1);
    if workers == 1 {
        return inputs.iter().map(job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<O>>> = inputs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= inputs.len() {
                    break;
                }
                let out = job(&inputs[i]);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("cell completed"))
        .collect()
}

// ---------------------------------------------------------------------------
// Commands

/// Per-step record of a simulation run.
#[derive(Debug, Clone)]
pub struct RunRow {
    pub k: usize,
    pub t: f64,
    pub rotation: Mat3,
    pub omega: Vec3,
    pub energy: f64,
    pub momentum: Vec3,
    pub c_invariant: f64,
    pub h_invariant: f64,
    pub orthogonality_defect: f64,
    pub newton_iterations: usize,
    pub residual: f64,
    pub max_stage_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    pub rows: Vec<RunRow>,
}

fn run_row_line(row: &RunRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        row.k,
        fmt(row.t),
        rotation_fields(&row.rotation),
        fmt(row.omega.x),
        fmt(row.omega.y),
        fmt(row.omega.z),
        fmt(row.energy),
        fmt(row.momentum.x),
        fmt(row.momentum.y),
        fmt(row.momentum.z),
        fmt(row.c_invariant),
        fmt(row.h_invariant),
        fmt(row.orthogonality_defect),
        row.newton_iterations,
        fmt(row.residual),
        fmt(row.max_stage_norm)
    )
}

/// Integrate one trajectory, streaming per-step rows to `simulate.csv` (plus
/// `simulate_dense.csv` when dense output is enabled). On a failed step the
/// rows so far are flushed followed by a failure marker row.
pub fn cmd_simulate(config: &ExperimentConfig, out_dir: &Path) -> Result<RunRecord> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("simulate.csv");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(out, "{SIMULATE_HEADER}")?;

    let mut dense_out = if config.dense_samples_per_step > 0 {
        let mut w =
            std::io::BufWriter::new(std::fs::File::create(out_dir.join("simulate_dense.csv"))?);
        writeln!(w, "{TRAJECTORY_HEADER}")?;
        let line = format!(
            "{},{},{},{},{}",
            fmt(0.0),
            rotation_fields(&config.r0),
            fmt(config.omega0.x),
            fmt(config.omega0.y),
            fmt(config.omega0.z)
        );
        writeln!(w, "{line}")?;
        Some(w)
    } else {
        None
    };

    let mut integrator = Integrator::new(
        &config.model,
        config.r0,
        config.omega0,
        config.h,
        config.n,
        Some(config.quad_points),
        config.solver,
    )
    .map_err(|source| IntegrateError { step: 0, source })?;

    let mut record = RunRecord::default();
    for k in 0..config.steps {
        let result = match integrator.advance() {
            Ok(result) => result,
            Err(source) => {
                let err = IntegrateError { step: k, source };
                writeln!(out, "error,step={k},{err}")?;
                out.flush()?;
                return Err(err.into());
            }
        };
        if result.chart_health.status == ChartStatus::NearSingular {
            eprintln!(
                "warning: step {k}: chart near-singular (max stage norm {:.3} >= {:.3})",
                result.chart_health.max_stage_norm, result.chart_health.warn_threshold
            );
        }
        let t = (k + 1) as f64 * config.h;
        let omega = integrator.omega();
        let sample = invariant_sample(&config.model, t, &result.next, omega);
        let row = RunRow {
            k: k + 1,
            t,
            rotation: result.next,
            omega,
            energy: sample.energy,
            momentum: sample.momentum,
            c_invariant: sample.c_invariant,
            h_invariant: sample.h_invariant,
            orthogonality_defect: sample.orthogonality_defect,
            newton_iterations: result.solver_stats.iterations,
            residual: result.solver_stats.final_residual,
            max_stage_norm: result.chart_health.max_stage_norm,
        };
        writeln!(out, "{}", run_row_line(&row))?;
        record.rows.push(row);

        if let Some(w) = dense_out.as_mut() {
            for j in 1..=config.dense_samples_per_step {
                let local = config.h * j as f64 / config.dense_samples_per_step as f64;
                let (r, om) =
                    crate::stepper::eval_curve(&result.stages, integrator.nodes(), local.min(config.h))
                        .map_err(|source| IntegrateError { step: k, source })?;
                let line = format!(
                    "{},{},{},{},{}",
                    fmt(k as f64 * config.h + local),
                    rotation_fields(&r),
                    fmt(om.x),
                    fmt(om.y),
                    fmt(om.z)
                );
                writeln!(w, "{line}")?;
            }
        }
    }
    out.flush()?;
    if let Some(mut w) = dense_out {
        w.flush()?;
    }
    Ok(record)
}

fn stride_steps(total_time: f64, piece: f64, what: &str) -> Result<usize> {
    let count = (total_time / piece).round();
    if count < 1.0 || (count * piece - total_time).abs() > 1e-9 * total_time.max(1.0) {
        return Err(config_err(format!(
            "{what}: {piece} does not evenly divide the total time {total_time}"
        )));
    }
    Ok(count as usize)
}

/// Compute the spectral reference and the splitting reference over the
/// configured time span, write both, and cross-check them. A mutual error
/// above the configured tolerance signals a build defect.
pub fn cmd_reference(config: &ExperimentConfig, out_dir: &Path) -> Result<f64> {
    std::fs::create_dir_all(out_dir)?;
    let total_time = config.steps as f64 * config.h;
    let ref_steps = stride_steps(total_time, config.reference.h, "reference.h")?;
    let split_per_ref = stride_steps(config.reference.h, config.reference.splitting_h, "reference.splitting_h")?;

    let spectral = integrate(
        &config.model,
        config.r0,
        config.omega0,
        config.reference.h,
        config.reference.n,
        None,
        ref_steps,
        &config.solver,
    )?;
    let spectral_samples = sample_endpoints(&spectral)?;

    let split = splitting_oracle(
        &config.model,
        &config.r0,
        config.omega0,
        config.reference.splitting_h,
        split_per_ref * ref_steps,
        split_per_ref,
    );

    write_lines(
        &out_dir.join("reference_spectral.csv"),
        TRAJECTORY_HEADER,
        &trajectory_rows(&spectral_samples.samples),
    )?;
    write_lines(
        &out_dir.join("reference_splitting.csv"),
        TRAJECTORY_HEADER,
        &trajectory_rows(&split.samples),
    )?;

    let mutual = trajectory_error(&spectral_samples, &split)?;
    println!(
        "reference cross-check: max group error {mutual:.3e} over t in [0, {total_time}] \
         (spectral n={}, h={} vs splitting h={:.1e})",
        config.reference.n, config.reference.h, config.reference.splitting_h
    );
    if mutual > config.reference.tolerance {
        return Err(CliError::ReferenceMismatch {
            error: mutual,
            tolerance: config.reference.tolerance,
        });
    }
    Ok(mutual)
}

struct SweepCell {
    parameter: f64,
    n: usize,
    h: f64,
    steps: usize,
}

fn sweep_errors(
    config: &ExperimentConfig,
    reference: &GalerkinTrajectory,
    cells: &[SweepCell],
) -> Vec<ConvergenceRow> {
    run_cells(cells, |cell| {
        let outcome = integrate(
            &config.model,
            config.r0,
            config.omega0,
            cell.h,
            cell.n,
            None,
            cell.steps,
            &config.solver,
        );
        match outcome {
            Ok(traj) => {
                let total_time = cell.steps as f64 * cell.h;
                let measure = || -> Result<(f64, f64)> {
                    let (end_ref, _) = eval_at(reference, total_time)?;
                    let (end_cell, _) = eval_at(&traj, total_time)?;
                    let one_step_error = group_error(&end_cell, &end_ref);
                    let mut curve_error = 0.0f64;
                    for k in 0..cell.steps {
                        for j in 1..=config.dense_samples_per_step {
                            let t = (k as f64
                                + j as f64 / config.dense_samples_per_step as f64)
                                * cell.h;
                            let t = t.min(total_time);
                            let (rc, _) = eval_at(&traj, t)?;
                            let (rr, _) = eval_at(reference, t)?;
                            curve_error = curve_error.max(group_error(&rc, &rr));
                        }
                    }
                    Ok((one_step_error, curve_error))
                };
                match measure() {
                    Ok((one_step_error, curve_error)) => ConvergenceRow {
                        parameter: cell.parameter,
                        one_step_error,
                        curve_error,
                        converged: true,
                    },
                    Err(_) => ConvergenceRow {
                        parameter: cell.parameter,
                        one_step_error: f64::NAN,
                        curve_error: f64::NAN,
                        converged: false,
                    },
                }
            }
            Err(err) => {
                eprintln!("warning: sweep cell {} failed: {err}", cell.parameter);
                ConvergenceRow {
                    parameter: cell.parameter,
                    one_step_error: f64::NAN,
                    curve_error: f64::NAN,
                    converged: false,
                }
            }
        }
    })
}

fn write_convergence(path: &Path, table: &ConvergenceTable) -> Result<()> {
    let rows: Vec<String> = table
        .rows
        .iter()
        .map(|row| {
            format!(
                "{},{},{},{}",
                fmt(row.parameter),
                fmt(row.one_step_error),
                fmt(row.curve_error),
                row.converged
            )
        })
        .collect();
    write_lines(path, CONVERGENCE_HEADER, &rows)
}

fn reference_trajectory(config: &ExperimentConfig) -> Result<GalerkinTrajectory> {
    let total_time = config.steps as f64 * config.h;
    let ref_steps = stride_steps(total_time, config.reference.h, "reference.h")?;
    Ok(integrate(
        &config.model,
        config.r0,
        config.omega0,
        config.reference.h,
        config.reference.n,
        None,
        ref_steps,
        &config.solver,
    )?)
}

/// Sweep the stage count at fixed step size against the spectral reference;
/// fit the geometric rate (ln error per unit n).
pub fn cmd_converge_n(config: &ExperimentConfig, out_dir: &Path) -> Result<(ConvergenceTable, f64)> {
    if config.n_list.is_empty() {
        return Err(config_err("n_list: required and nonempty for converge-n"));
    }
    std::fs::create_dir_all(out_dir)?;
    let reference = reference_trajectory(config)?;
    let cells: Vec<SweepCell> = config
        .n_list
        .iter()
        .map(|&n| SweepCell {
            parameter: n as f64,
            n,
            h: config.h,
            steps: config.steps,
        })
        .collect();
    let table = ConvergenceTable::new(sweep_errors(config, &reference, &cells));
    write_convergence(&out_dir.join("converge_n.csv"), &table)?;
    let floor = 10.0 * config.solver.residual_tol;
    let slope = fit_rate(&table, RateMode::GeometricInN, floor)
        .map_err(|e| config_err(format!("n_list: {e}")))?;
    println!("converge-n: fitted ln-error slope per unit n = {slope:.3} (floor {floor:.1e})");
    Ok((table, slope))
}

/// Sweep the step size at fixed stage count against the spectral reference;
/// fit the algebraic order and report the expected order (n for even n,
/// n - 1 for odd n).
pub fn cmd_converge_h(config: &ExperimentConfig, out_dir: &Path) -> Result<(ConvergenceTable, f64)> {
    if config.h_list.is_empty() {
        return Err(config_err("h_list: required and nonempty for converge-h"));
    }
    std::fs::create_dir_all(out_dir)?;
    let total_time = config.steps as f64 * config.h;
    let reference = reference_trajectory(config)?;
    let cells = config
        .h_list
        .iter()
        .map(|&h| {
            Ok(SweepCell {
                parameter: h,
                n: config.n,
                h,
                steps: stride_steps(total_time, h, "h_list")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = ConvergenceTable::new(sweep_errors(config, &reference, &cells));
    write_convergence(&out_dir.join("converge_h.csv"), &table)?;
    let floor = 10.0 * config.solver.residual_tol;
    let order = fit_rate(&table, RateMode::AlgebraicInH, floor)
        .map_err(|e| config_err(format!("h_list: {e}")))?;
    let expected = if config.n % 2 == 0 {
        config.n
    } else {
        config.n - 1
    };
    println!(
        "converge-h: fitted order = {order:.3} (expected about {expected} for n = {})",
        config.n
    );
    Ok((table, order))
}

/// Initial body momenta for the invariants command.
pub fn invariant_momenta(spec: &InvariantsSpec) -> Vec<Vec3> {
    if let Some(momenta) = &spec.momenta {
        return momenta.clone();
    }
    // Gaussian draws via Box-Muller, normalized onto the C = 1/2 sphere.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = move || {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    (0..spec.count)
        .map(|_| loop {
            let y = Vec3::new(normal(), normal(), normal());
            if y.norm() > 1e-6 {
                break y / y.norm();
            }
        })
        .collect()
}

/// Long-run conservation study: integrate from each initial momentum, write
/// the momentum-space trajectory per run, and report the worst relative
/// drift of C and H per run.
pub fn cmd_invariants(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<(f64, f64)>> {
    std::fs::create_dir_all(out_dir)?;
    let momenta = invariant_momenta(&config.invariants);
    if momenta.is_empty() {
        return Err(config_err("invariants: no initial momenta"));
    }
    let moments = config.model.moments();

    struct RunOutcome {
        rows: Vec<String>,
        drift: Result<(f64, f64)>,
    }

    let outcomes = run_cells(&momenta, |y0| {
        let omega0 = Vec3::new(y0.x / moments.x, y0.y / moments.y, y0.z / moments.z);
        let (c0, h0) = diagnostics::invariants(*y0, moments);
        let c_scale = if c0 == 0.0 { 1.0 } else { c0.abs() };
        let h_scale = if h0 == 0.0 { 1.0 } else { h0.abs() };
        let run = || -> Result<(Vec<String>, f64, f64)> {
            let traj = integrate(
                &config.model,
                config.r0,
                omega0,
                config.h,
                config.n,
                Some(config.quad_points),
                config.steps,
                &config.solver,
            )?;
            let samples = sample_endpoints(&traj)?;
            let mut rows = Vec::with_capacity(config.steps);
            let mut max_dc = 0.0f64;
            let mut max_dh = 0.0f64;
            for (k, s) in samples.samples.iter().enumerate().skip(1) {
                let y = diagnostics::body_momentum(&config.model, s.omega);
                let (c, h) = diagnostics::invariants(y, moments);
                max_dc = max_dc.max((c - c0).abs() / c_scale);
                max_dh = max_dh.max((h - h0).abs() / h_scale);
                rows.push(format!(
                    "{},{},{},{},{},{},{}",
                    k,
                    fmt(s.t),
                    fmt(y.x),
                    fmt(y.y),
                    fmt(y.z),
                    fmt(c),
                    fmt(h)
                ));
            }
            Ok((rows, max_dc, max_dh))
        };
        match run() {
            Ok((rows, dc, dh)) => RunOutcome {
                rows,
                drift: Ok((dc, dh)),
            },
            Err(err) => RunOutcome {
                rows: Vec::new(),
                drift: Err(err),
            },
        }
    });

    let mut drifts = Vec::with_capacity(outcomes.len());
    let mut summary = Vec::with_capacity(outcomes.len());
    for (i, outcome) in outcomes.into_iter().enumerate() {
        write_lines(
            &out_dir.join(format!("invariants_run{i}.csv")),
            INVARIANTS_RUN_HEADER,
            &outcome.rows,
        )?;
        let (dc, dh) = outcome.drift?;
        println!("invariants run {i}: max relative drift C = {dc:.3e}, H = {dh:.3e}");
        summary.push(format!("{i},{},{}", fmt(dc), fmt(dh)));
        drifts.push((dc, dh));
    }
    write_lines(
        &out_dir.join("invariants_summary.csv"),
        INVARIANTS_SUMMARY_HEADER,
        &summary,
    )?;
    Ok(drifts)
}

// ---------------------------------------------------------------------------
// Binary entry point

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Simulate,
    Reference,
    ConvergeN,
    ConvergeH,
    Invariants,
}

/// Load the config file, run one command, and map the outcome onto the
/// process exit-code contract.
pub fn run_command(kind: CommandKind, config_path: &Path, out_dir: &Path) -> i32 {
    let text = match std::fs::read_to_string(config_path) {
        Ok(text) => text,
        Err(err) => {
            eprintln!("error: cannot read {}: {err}", config_path.display());
            return 1;
        }
    };
    let config = match parse_config(&text) {
        Ok(config) => config,
        Err(err) => {
            eprintln!("error: {err}");
            return err.exit_code();
        }
    };
    let outcome: Result<()> = match kind {
        CommandKind::Simulate => cmd_simulate(&config, out_dir).map(|_| ()),
        CommandKind::Reference => cmd_reference(&config, out_dir).map(|_| ()),
        CommandKind::ConvergeN => cmd_converge_n(&config, out_dir).map(|_| ()),
        CommandKind::ConvergeH => cmd_converge_h(&config, out_dir).map(|_| ()),
        CommandKind::Invariants => cmd_invariants(&config, out_dir).map(|_| ()),
    };
    match outcome {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_expand_to_paper_parameters() {
        let config = parse_config(r#"{"preset": "rigid-body"}"#).unwrap();
        assert!((config.model.inertia.jd - Vec3::new(1.3, 2.1, 1.2)).norm() <= 1e-15);
        assert_eq!(config.r0, Mat3::identity());
        assert!((config.omega0 - Vec3::new(2.0, -1.9, 1.0)).norm() <= 1e-15);
        assert!(!config.model.has_potential());

        let config = parse_config(r#"{"preset": "pendulum-stable"}"#).unwrap();
        assert!((config.model.inertia.jd - Vec3::new(1.0, 2.8, 2.0)).norm() <= 1e-15);
        let p = config.model.potential.unwrap();
        assert_eq!((p.mass, p.gravity), (1.0, 1.0));
        assert_eq!(p.com, Vec3::z());
        assert_eq!(config.r0, Mat3::identity());
        assert!((config.omega0 - Vec3::new(0.5, -0.5, 0.4)).norm() <= 1e-15);

        let config = parse_config(r#"{"preset": "pendulum-unstable"}"#).unwrap();
        assert_eq!(
            config.r0,
            Mat3::from_diagonal(&Vec3::new(-1.0, 1.0, -1.0))
        );
        assert!((config.omega0 - Vec3::new(0.5, -0.5, 0.4)).norm() <= 1e-15);
    }

    #[test]
    fn explicit_keys_override_presets() {
        let config = parse_config(
            r#"{"preset": "rigid-body", "omega0": [0.0, 0.0, 0.0], "h": 0.25, "n": 4}"#,
        )
        .unwrap();
        assert_eq!(config.omega0, Vec3::zeros());
        assert_eq!(config.h, 0.25);
        assert_eq!(config.n, 4);
        assert_eq!(config.quad_points, 5, "m defaults to n + 1");
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = parse_config(r#"{"preset": "rigid-body", "steps": 0}"#).unwrap_err();
        assert!(err.to_string().contains("steps"), "{err}");
        assert_eq!(err.exit_code(), 1);

        let err = parse_config(r#"{"preset": "rigid-body", "h": -1.0}"#).unwrap_err();
        assert!(err.to_string().contains('h'), "{err}");

        let err = parse_config(r#"{"preset": "rigid-body", "unknown_key": 1}"#).unwrap_err();
        assert!(err.to_string().contains("unknown_key"), "{err}");

        let err = parse_config(r#"{"preset": "nope"}"#).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");

        let err = parse_config(r#"{"model": {"jd": [1.0, -2.0, 1.0]}}"#).unwrap_err();
        assert!(err.to_string().contains("jd"), "{err}");

        let err = parse_config(
            r#"{"preset": "rigid-body", "r0": [1,0,0, 0,1,0, 0,0,2]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("r0"), "{err}");

        let err = parse_config("{}").unwrap_err();
        assert!(err.to_string().contains("model"), "{err}");
    }

    #[test]
    fn unit_sphere_momenta_are_deterministic_and_normalized() {
        let spec = InvariantsSpec {
            count: 5,
            seed: 9001,
            momenta: None,
        };
        let a = invariant_momenta(&spec);
        let b = invariant_momenta(&spec);
        assert_eq!(a.len(), 5);
        for (ya, yb) in a.iter().zip(&b) {
            assert_eq!(ya, yb);
            assert!((ya.norm() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [
            0.0,
            1.0,
            -1.0,
            std::f64::consts::PI,
            1.3e-17,
            -4.9e300,
            0.1 + 0.2,
        ] {
            let s = fmt(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
    }
}
