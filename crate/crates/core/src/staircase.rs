//! Staircase controls: a chain of small minimal-norm steps along a path of
//! nonnegative reference states, keeping the controlled state above a floor.
//!
//! Two variants are provided. With scalar diffusion the references are constant
//! states `e^{tA} Z̄_k` on the segment between the means of the data, reached
//! after a free waiting phase. With diagonal diffusion the references are free
//! trajectories issued from convex combinations of the data, and each step is
//! synthesized for the shifted generator `A − λ I`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::control::{ControlSchedule, ControlSignal};
use crate::error::{Error, Result};
use crate::evolution::{free_state_at, ConstraintReport, TrajectoryRecord, CERTIFY_TOL};
use crate::hum::{SteerConfig, Steerer};
use crate::linalg;
use crate::minimal_time::{mass_obstruction, MassObstruction};
use crate::spectral::{self, SampleGrid, SpectralState};
use crate::system::{kalman_condition_all_modes, validate_structure, SystemSpec, RANK_TOL};

/// Terminal matching tolerance for shipped scenarios.
pub const ACCEPT_TOL: f64 = 1e-3;
/// Mode-0 coefficients below this are treated as identically zero components.
pub const ZERO_COMPONENT_TOL: f64 = 1e-8;
/// Margin added to the rescaling rate.
pub const SHIFT_MARGIN: f64 = 0.01;

#[derive(Debug, Clone, Copy)]
pub struct StaircaseConfig {
    pub tau: f64,
    pub steer: SteerConfig,
    pub grid_points: usize,
    /// Safety factor applied to the measured tracking constant.
    pub safety: f64,
    /// Time step of the waiting-time search.
    pub wait_step: f64,
    /// Longest admissible waiting time.
    pub wait_cap: f64,
    /// Horizon over which free trajectories are scanned for ζ.
    pub zeta_horizon: f64,
    /// Upper bound on the number of ladder steps.
    pub max_steps: usize,
}

impl Default for StaircaseConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            steer: SteerConfig::default(),
            grid_points: 513,
            safety: 2.0,
            wait_step: 0.01,
            wait_cap: 200.0,
            zeta_horizon: 100.0,
            max_steps: 5000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    IdentityDiffusion,
    GeneralDiagonal,
}

/// How the state floor is set for the general variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum FloorMode {
    /// Floor `−ε`.
    Relaxed { epsilon: f64 },
    /// Floor `ζ − ε` with `ζ` the smallest value of the free references.
    ZetaShift { epsilon: f64 },
    /// Floor 0, using `ζ` itself as the deviation budget.
    Exact,
}

#[derive(Debug, Clone, Serialize)]
pub struct StaircasePlan {
    pub variant: Variant,
    pub tau: f64,
    pub steps: usize,
    pub delta: f64,
    /// Calibrated tracking constant (safety factor included).
    pub c_tau: f64,
    pub wait_time: Option<f64>,
    pub lambda_shift: Option<f64>,
    pub m_bound: f64,
    pub zeta: Option<f64>,
    /// Deviation budget (`ε`, or `ζ` for the identity variant).
    pub budget: f64,
    pub floor: f64,
    pub total_time: f64,
    /// Means of the intermediate references.
    pub target_means: Vec<Vec<f64>>,
    /// Set when the plan cannot be executed; the reason is recorded.
    pub infeasibility: Option<String>,
    #[serde(skip)]
    pub y0: SpectralState,
    #[serde(skip)]
    pub yf0: SpectralState,
}

impl StaircasePlan {
    /// Reference seed `k` of the general ladder.
    pub fn seed(&self, k: usize) -> SpectralState {
        self.y0.lerp(&self.yf0, k as f64 / self.steps as f64)
    }
}


#[derive(Debug, Clone, Serialize)]
pub struct StepDiagnostic {
    pub phase: String,
    pub t_start: f64,
    pub control_norm: f64,
    /// L² distance to the phase target at its end, all modes.
    pub defect: f64,
    pub min_state: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StaircaseSummary {
    pub plan: StaircasePlan,
    pub terminal_error: f64,
    pub min_state: f64,
    pub min_z: Option<f64>,
    pub control_norm: f64,
    pub feasible: bool,
    pub constraint_violated: bool,
    pub terminal_ok: bool,
    pub steps: Vec<StepDiagnostic>,
    pub obstruction: Option<MassObstruction>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct StaircaseResult {
    pub summary: StaircaseSummary,
    pub trajectory: TrajectoryRecord,
    pub schedule: ControlSchedule,
    pub constraint: Option<ConstraintReport>,
    /// Per-time componentwise minima of `Z = e^{−tA} Y` (identity variant).
    pub z_minima: Option<Vec<Vec<f64>>>,
}

fn check_nonnegative(name: &str, s: &SpectralState, grid: &SampleGrid) -> Result<()> {
    let mins = grid.minima(s);
    if let Some((i, v)) = mins.iter().enumerate().find(|(_, &v)| v < -CERTIFY_TOL) {
        return Err(Error::Hypothesis(format!(
            "{name} component {i} takes the negative value {v:.3e}"
        )));
    }
    Ok(())
}

/// `2 × max_d sup_s ‖Y(s)‖_∞ / ‖d‖` over steering runs `d → 0` with rescaling rate `rate`.
fn calibrate(steerer: &Steerer, candidates: &[SpectralState], grid: &SampleGrid, rate: f64, safety: f64) -> Result<f64> {
    let zero = SpectralState::zeros(steerer.cfg.j_state + 1, steerer.spec.n);
    let ratios: Vec<Result<f64>> = candidates
        .par_iter()
        .map(|d| {
            let nd = d.l2_norm();
            let (_, rec) = steerer.steer_and_run(d, &zero, 0.0)?;
            let sup = rec
                .times
                .iter()
                .zip(&rec.states)
                .map(|(t, s)| grid.reconstruct(s).amax() * (rate * t).exp())
                .fold(0.0, f64::max);
            Ok(sup / nd)
        })
        .collect();
    let mut worst: f64 = 0.0;
    for r in ratios {
        worst = worst.max(r?);
    }
    Ok(safety * worst)
}

fn unit_mode(modes: usize, n: usize, p: usize, i: usize) -> SpectralState {
    let mut s = SpectralState::zeros(modes, n);
    s.coeffs[(p, i)] = 1.0;
    s
}

fn constant_state(v: &[f64], modes: usize) -> SpectralState {
    SpectralState::constant(v, modes)
}

/// Plans the constant-reference staircase for scalar diffusion.
pub fn plan_identity(
    spec: &SystemSpec,
    y0: &SpectralState,
    yf0: &SpectralState,
    cfg: &StaircaseConfig,
) -> Result<StaircasePlan> {
    let report = validate_structure(spec, 1e-12)?;
    let c = report
        .scalar_diffusion
        .ok_or_else(|| Error::Hypothesis("diffusion matrix is not a multiple of the identity".into()))?;
    if !report.is_quasipositive_a {
        return Err(Error::Hypothesis("coupling matrix is not quasipositive".into()));
    }
    if !report.eigenvalues_nonneg_real {
        return Err(Error::Hypothesis("coupling matrix has an eigenvalue with negative real part".into()));
    }
    let kalman = kalman_condition_all_modes(spec, 1, RANK_TOL)?;
    if kalman.all_modes_exact != Some(true) {
        return Err(Error::Hypothesis("rank condition on [A|B] fails".into()));
    }
    let modes = cfg.steer.j_state + 1;
    let y0 = y0.resized(modes);
    let yf0 = yf0.resized(modes);
    let grid = SampleGrid::new(cfg.grid_points, modes);
    check_nonnegative("initial state", &y0, &grid)?;
    check_nonnegative("target state", &yf0, &grid)?;
    let zbar = y0.means();
    let zbar_f = yf0.means();
    let zeta = zbar.iter().chain(&zbar_f).copied().fold(f64::INFINITY, f64::min);
    if zeta <= ZERO_COMPONENT_TOL {
        return Err(Error::Hypothesis(format!(
            "a component of the data has mean {zeta:.3e}, i.e. vanishes identically"
        )));
    }
    let steerer = Steerer::new(spec, cfg.tau, cfg.steer)?;
    if let Some(e) = steerer.gramian().to_error() {
        return Err(e);
    }
    let n = spec.n;
    let mut candidates = Vec::new();
    for i in 0..n {
        candidates.push(unit_mode(modes, n, 0, i));
        candidates.push(unit_mode(modes, n, 1, i));
    }
    let gap: Vec<f64> = zbar_f.iter().zip(&zbar).map(|(a, b)| a - b).collect();
    let gap_norm = gap.iter().map(|v| v * v).sum::<f64>().sqrt();
    if gap_norm > 0.0 {
        let unit: Vec<f64> = gap.iter().map(|v| v / gap_norm).collect();
        candidates.push(constant_state(&unit, modes));
    }
    let c_tau = calibrate(&steerer, &candidates, &grid, 0.0, cfg.safety)?;
    let delta = zeta / c_tau;

    // Z evolves by the pure heat semigroup, so the oscillating part is explicit.
    let tail = |s: &SpectralState, t: f64| -> f64 {
        (1..s.modes())
            .map(|p| (-2.0 * c * spectral::eigenvalue(p) * t).exp() * s.coeffs.row(p).norm_squared())
            .sum::<f64>()
            .sqrt()
    };
    let mut wait = 0.0;
    while tail(&y0, wait) > delta || tail(&yf0, wait) > delta {
        wait += cfg.wait_step;
        if wait > cfg.wait_cap {
            return Err(Error::Planning(format!(
                "free trajectories do not settle within {} of their means before t = {}",
                delta, cfg.wait_cap
            )));
        }
    }
    let steps = ((gap_norm / delta).ceil() as usize).max(1);
    if steps > cfg.max_steps {
        return Err(Error::Planning(format!("{steps} ladder steps exceed the cap {}", cfg.max_steps)));
    }
    let m_bound = zbar.iter().chain(&zbar_f).copied().fold(1.0, f64::max);
    let target_means = (0..=steps)
        .map(|k| {
            let th = k as f64 / steps as f64;
            zbar.iter().zip(&zbar_f).map(|(a, b)| (1.0 - th) * a + th * b).collect()
        })
        .collect();
    Ok(StaircasePlan {
        variant: Variant::IdentityDiffusion,
        tau: cfg.tau,
        steps,
        delta,
        c_tau,
        wait_time: Some(wait),
        lambda_shift: None,
        m_bound,
        zeta: Some(zeta),
        budget: zeta,
        floor: 0.0,
        total_time: wait + (steps + 2) as f64 * cfg.tau,
        target_means,
        infeasibility: None,
        y0,
        yf0,
    })
}

fn min_over(rec: &TrajectoryRecord, grid: &SampleGrid) -> f64 {
    rec.states
        .iter()
        .map(|s| grid.reconstruct(s).min())
        .fold(f64::INFINITY, f64::min)
}

/// Executes an identity-diffusion plan: wait, enter the ladder, climb it, exit.
pub fn run_identity(spec: &SystemSpec, plan: &StaircasePlan, cfg: &StaircaseConfig) -> Result<StaircaseResult> {
    if plan.variant != Variant::IdentityDiffusion {
        return Err(Error::Configuration("plan is not an identity-diffusion plan".into()));
    }
    let modes = cfg.steer.j_state + 1;
    let grid = SampleGrid::new(cfg.grid_points, modes);
    let steerer = Steerer::new(spec, plan.tau, cfg.steer)?;
    let wait = plan.wait_time.unwrap_or(0.0);
    let mut schedule = ControlSchedule::default();
    let mut diags = Vec::new();
    let mut traj;
    let mut state = plan.y0.clone();
    if wait > 0.0 {
        let steps = ((wait / steerer.evolver.h).ceil() as usize).max(1);
        let ev = crate::evolution::Evolver::new(spec, cfg.steer.j_state, wait / steps as f64)?;
        traj = ev.free(&state, 0.0, steps)?;
        state = traj.final_state().clone();
        schedule.push(ControlSignal::zero(0.0, wait, spec.omega, cfg.steer.j_ctrl, spec.m, 1))?;
        diags.push(StepDiagnostic {
            phase: "wait".into(),
            t_start: 0.0,
            control_norm: 0.0,
            defect: 0.0,
            min_state: min_over(&traj, &grid),
        });
    } else {
        traj = TrajectoryRecord::start(0.0, state.clone());
    }
    let big_t = plan.total_time;
    let yf_end = free_state_at(spec, &plan.yf0, big_t);
    let n_phases = plan.steps + 2;
    for k in 0..n_phases {
        let t_s = wait + k as f64 * plan.tau;
        let t_e = t_s + plan.tau;
        let (label, target) = if k + 1 == n_phases {
            ("exit".to_string(), yf_end.clone())
        } else {
            let zk = &plan.target_means[k];
            let e = linalg::expm(&(&spec.a * t_e));
            let v = e * nalgebra::DVector::from_column_slice(zk);
            let label = if k == 0 { "enter".to_string() } else { format!("ladder {k}") };
            (label, constant_state(v.as_slice(), modes))
        };
        let (out, rec) = steerer.steer_and_run(&state, &target, t_s)?;
        state = rec.final_state().clone();
        diags.push(StepDiagnostic {
            phase: label,
            t_start: t_s,
            control_norm: out.cost.norm,
            defect: state.sub(&target).l2_norm(),
            min_state: min_over(&rec, &grid),
        });
        schedule.push(out.control)?;
        traj.append(&rec);
    }
    let terminal_error = state.sub(&yf_end).l2_norm();
    let constraint = ConstraintReport::from_minima(traj.times.clone(), traj.minima(&grid), 0.0);
    let z_minima: Vec<Vec<f64>> = traj
        .times
        .par_iter()
        .zip(&traj.states)
        .map(|(&t, s)| {
            let e = linalg::expm(&(&spec.a * (-t)));
            let z = SpectralState::from_coeffs(&s.coeffs * e.transpose());
            grid.minima(&z)
        })
        .collect();
    let min_z = z_minima.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let mut notes = Vec::new();
    if constraint.violated {
        notes.push(format!(
            "state fell to {:.3e} below the floor 0 at t = {:?}",
            constraint.global_min, constraint.first_violation
        ));
    }
    let terminal_ok = terminal_error <= ACCEPT_TOL;
    let summary = StaircaseSummary {
        plan: plan.clone(),
        terminal_error,
        min_state: constraint.global_min,
        min_z: Some(min_z),
        control_norm: schedule.norm(),
        feasible: !constraint.violated && terminal_ok,
        constraint_violated: constraint.violated,
        terminal_ok,
        steps: diags,
        obstruction: None,
        notes,
    };
    Ok(StaircaseResult {
        summary,
        trajectory: traj,
        schedule,
        constraint: Some(constraint),
        z_minima: Some(z_minima),
    })
}

/// Rescaling rate making `A − λI` dissipative.
pub fn shift_rate(a: &DMatrix<f64>) -> f64 {
    linalg::max_sym_eigenvalue(a).max(0.0) + SHIFT_MARGIN
}

/// Smallest grid value of the free trajectories from `y0` and `yf0` over `[0, horizon]`.
pub fn estimate_zeta(spec: &SystemSpec, y0: &SpectralState, yf0: &SpectralState, horizon: f64, grid: &SampleGrid) -> f64 {
    let mut times: Vec<f64> = (0..=400).map(|i| horizon * i as f64 / 400.0).collect();
    times.extend((0..=60).map(|i| horizon * 10f64.powf(-6.0 + 6.0 * i as f64 / 60.0)));
    times
        .par_iter()
        .map(|&t| {
            let a = grid.reconstruct(&free_state_at(spec, y0, t)).min();
            let b = grid.reconstruct(&free_state_at(spec, yf0, t)).min();
            a.min(b)
        })
        .reduce(|| f64::INFINITY, f64::min)
}

/// Plans the free-trajectory staircase for diagonal diffusion.
pub fn plan_general(
    spec: &SystemSpec,
    y0: &SpectralState,
    yf0: &SpectralState,
    floor_mode: FloorMode,
    cfg: &StaircaseConfig,
) -> Result<StaircasePlan> {
    let report = validate_structure(spec, 1e-12)?;
    if !report.is_elliptic || !report.is_diagonal_d || !report.is_quasipositive_a {
        return Err(Error::Hypothesis(format!("structure requirements not met: {}", report.summary())));
    }
    let kalman = kalman_condition_all_modes(spec, cfg.steer.j_state, RANK_TOL)?;
    if let Some(p) = kalman.failed_at {
        return Err(Error::Hypothesis(format!("rank condition fails at mode {p}")));
    }
    let modes = cfg.steer.j_state + 1;
    let y0 = y0.resized(modes);
    let yf0 = yf0.resized(modes);
    let grid = SampleGrid::new(cfg.grid_points, modes);
    check_nonnegative("initial state", &y0, &grid)?;
    check_nonnegative("target state", &yf0, &grid)?;
    let lambda = shift_rate(&spec.a);
    let shifted = spec.with_a(&spec.a - DMatrix::identity(spec.n, spec.n) * lambda);
    let m_bound = y0.l2_norm().max(yf0.l2_norm()).max(1.0);

    let (zeta, budget, floor) = match floor_mode {
        FloorMode::Relaxed { epsilon } => (None, epsilon, -epsilon),
        FloorMode::ZetaShift { epsilon } => {
            let z = estimate_zeta(spec, &y0, &yf0, cfg.zeta_horizon, &grid);
            (Some(z), epsilon, z - epsilon)
        }
        FloorMode::Exact => {
            let z = estimate_zeta(spec, &y0, &yf0, cfg.zeta_horizon, &grid);
            (Some(z), z, 0.0)
        }
    };
    let mut plan = StaircasePlan {
        variant: Variant::GeneralDiagonal,
        tau: cfg.tau,
        steps: 0,
        delta: 0.0,
        c_tau: 0.0,
        wait_time: None,
        lambda_shift: Some(lambda),
        m_bound,
        zeta,
        budget,
        floor,
        total_time: 0.0,
        target_means: Vec::new(),
        infeasibility: None,
        y0: y0.clone(),
        yf0: yf0.clone(),
    };
    if !(budget > ZERO_COMPONENT_TOL) {
        plan.infeasibility = Some(format!(
            "deviation budget {budget:.3e} is not positive: the free references approach zero (zeta = {:.3e}), so an exact floor cannot be certified",
            zeta.unwrap_or(0.0)
        ));
        return Ok(plan);
    }
    let steerer = Steerer::new(&shifted, cfg.tau, cfg.steer)?;
    if let Some(e) = steerer.gramian().to_error() {
        return Err(e);
    }
    let n = spec.n;
    let mut candidates: Vec<SpectralState> = (0..n).map(|i| unit_mode(modes, n, 0, i)).collect();
    let diff = y0.sub(&yf0);
    if diff.l2_norm() > 0.0 {
        candidates.push(diff.scale(1.0 / diff.l2_norm()));
    }
    let c_tau = calibrate(&steerer, &candidates, &grid, lambda, cfg.safety)?;
    let delta = budget / (m_bound * c_tau);
    let steps = ((diff.l2_norm() / delta).ceil() as usize).max(1);
    if steps > cfg.max_steps {
        return Err(Error::Planning(format!("{steps} ladder steps exceed the cap {}", cfg.max_steps)));
    }
    plan.c_tau = c_tau;
    plan.delta = delta;
    plan.steps = steps;
    plan.total_time = steps as f64 * cfg.tau;
    plan.target_means = (0..=steps).map(|k| plan.seed(k).means()).collect();
    Ok(plan)
}

/// Executes a general-diagonal plan step by step in locally rescaled variables.
pub fn run_general(spec: &SystemSpec, plan: &StaircasePlan, cfg: &StaircaseConfig) -> Result<StaircaseResult> {
    if plan.variant != Variant::GeneralDiagonal {
        return Err(Error::Configuration("plan is not a general-diagonal plan".into()));
    }
    if let Some(reason) = &plan.infeasibility {
        let obstruction = mass_obstruction(spec, &plan.y0, &plan.yf0, cfg.zeta_horizon);
        let mut notes = vec![reason.clone()];
        if let Some(o) = &obstruction {
            notes.push(o.describe());
        }
        return Ok(StaircaseResult {
            summary: StaircaseSummary {
                plan: plan.clone(),
                terminal_error: f64::NAN,
                min_state: f64::NAN,
                min_z: None,
                control_norm: 0.0,
                feasible: false,
                constraint_violated: false,
                terminal_ok: false,
                steps: Vec::new(),
                obstruction,
                notes,
            },
            trajectory: TrajectoryRecord::default(),
            schedule: ControlSchedule::default(),
            constraint: None,
            z_minima: None,
        });
    }
    let modes = cfg.steer.j_state + 1;
    let grid = SampleGrid::new(cfg.grid_points, modes);
    let lambda = plan.lambda_shift.unwrap_or(0.0);
    let shifted = spec.with_a(&spec.a - DMatrix::identity(spec.n, spec.n) * lambda);
    let steerer = Steerer::new(&shifted, plan.tau, cfg.steer)?;
    let mut schedule = ControlSchedule::default();
    let mut diags = Vec::with_capacity(plan.steps);
    let mut state = plan.y0.clone();
    let mut traj = TrajectoryRecord::start(0.0, state.clone());
    let shrink = (-lambda * plan.tau).exp();
    for k in 0..plan.steps {
        let t_s = k as f64 * plan.tau;
        let target = free_state_at(spec, &plan.seed(k + 1), t_s + plan.tau);
        let (out, rec) = steerer.steer_and_run(&state, &target.scale(shrink), t_s)?;
        let mut back = TrajectoryRecord::default();
        for (t, s) in rec.times.iter().zip(&rec.states) {
            back.push(*t, s.scale((lambda * (t - t_s)).exp()));
        }
        state = back.final_state().clone();
        let mut control = out.control;
        control.growth = lambda;
        diags.push(StepDiagnostic {
            phase: format!("step {k}"),
            t_start: t_s,
            control_norm: control.norm(),
            defect: state.sub(&target).l2_norm(),
            min_state: min_over(&back, &grid),
        });
        schedule.push(control)?;
        traj.append(&back);
    }
    let yf_end = free_state_at(spec, &plan.yf0, plan.total_time);
    let terminal_error = state.sub(&yf_end).l2_norm();
    let constraint = ConstraintReport::from_minima(traj.times.clone(), traj.minima(&grid), plan.floor);
    let mut notes = Vec::new();
    if constraint.violated {
        notes.push(format!(
            "state fell to {:.3e}, below the floor {:.3e}",
            constraint.global_min, plan.floor
        ));
    }
    let terminal_ok = terminal_error <= ACCEPT_TOL;
    Ok(StaircaseResult {
        summary: StaircaseSummary {
            plan: plan.clone(),
            terminal_error,
            min_state: constraint.global_min,
            min_z: None,
            control_norm: schedule.norm(),
            feasible: !constraint.violated && terminal_ok,
            constraint_violated: constraint.violated,
            terminal_ok,
            steps: diags,
            obstruction: None,
            notes,
        },
        trajectory: traj,
        schedule,
        constraint: Some(constraint),
        z_minima: None,
    })
}
