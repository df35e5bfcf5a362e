//! Executes scenario tasks and writes the manifest.

use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use rdcontrol::evolution::{free_evolve, free_state_at, monitor_constraint, ConstraintReport};
use rdcontrol::hum::{cost_sweep, Steerer};
use rdcontrol::minimal_time::{
    bisect_minimal_time, gamma_certificate, mass_obstruction, presweep, restrict_to_ball, sl_basis,
    FeasibilityProblem,
};
use rdcontrol::staircase::{
    plan_general, plan_identity, run_general, run_identity, FloorMode, StaircaseConfig, StaircaseResult,
};
use rdcontrol::system::{kalman_condition_all_modes, validate_structure, RANK_TOL};
use rdcontrol::{Error, SpectralState, SystemSpec};

use crate::artifacts::{fmt, write_root_json, ArtifactDir, SCHEMA_VERSION};
use crate::config::{Overrides, ScenarioConfig, Task};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Ok,
    /// The task established that the requested transfer cannot be done.
    Infeasible,
    NonConvergence,
    Invalid,
    Failed,
}

impl TaskStatus {
    pub fn label(self) -> &'static str {
        match self {
            TaskStatus::Ok => "ok",
            TaskStatus::Infeasible => "infeasible",
            TaskStatus::NonConvergence => "non_convergence",
            TaskStatus::Invalid => "invalid",
            TaskStatus::Failed => "failed",
        }
    }

    pub fn exit_code(self) -> u8 {
        match self {
            TaskStatus::Ok => 0,
            TaskStatus::Infeasible => 3,
            TaskStatus::NonConvergence => 4,
            TaskStatus::Invalid => 2,
            TaskStatus::Failed => 1,
        }
    }
}

/// Combines exit codes: error over validation over non-convergence over infeasibility.
pub fn combine_exit(codes: impl IntoIterator<Item = u8>) -> u8 {
    let rank = |c: u8| match c {
        0 => 0,
        3 => 1,
        4 => 2,
        2 => 3,
        _ => 4,
    };
    codes.into_iter().max_by_key(|&c| rank(c)).unwrap_or(0)
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskRecord {
    pub index: usize,
    pub kind: String,
    pub dir: String,
    pub status: TaskStatus,
    pub message: String,
    pub seconds: f64,
    pub metrics: Value,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub toolkit_version: String,
    pub name: Option<String>,
    pub config_sha256: String,
    pub overrides: String,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub exit_code: u8,
    pub tasks: Vec<TaskRecord>,
}

struct TaskOutput {
    status: TaskStatus,
    message: String,
    metrics: Value,
}

impl TaskOutput {
    fn ok(message: impl Into<String>, metrics: Value) -> Self {
        Self {
            status: TaskStatus::Ok,
            message: message.into(),
            metrics,
        }
    }
}

fn status_of(e: &Error) -> TaskStatus {
    match e {
        Error::Dimension(_)
        | Error::Structure(_)
        | Error::Configuration(_)
        | Error::Hypothesis(_)
        | Error::Setup(_)
        | Error::Resolution(_) => TaskStatus::Invalid,
        Error::NearUncontrollable { .. } | Error::Numerical(_) | Error::Planning(_) => TaskStatus::NonConvergence,
    }
}

pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

struct Context<'a> {
    cfg: &'a ScenarioConfig,
    spec: SystemSpec,
    data: Option<(SpectralState, SpectralState)>,
}

impl Context<'_> {
    fn data(&self) -> (&SpectralState, &SpectralState) {
        let (a, b) = self.data.as_ref().expect("data checked during validation");
        (a, b)
    }
}

pub fn run_scenario(cfg: &ScenarioConfig, text: &str, out: &Path, ov: &Overrides) -> Result<Manifest, CliError> {
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let spec = cfg.spec()?;
    let data = if cfg.initial.is_some() && cfg.target.is_some() {
        Some(cfg.data()?)
    } else {
        None
    };
    let ctx = Context { cfg, spec, data };
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let mut tasks = Vec::with_capacity(cfg.tasks.len());
    for (i, task) in cfg.tasks.iter().enumerate() {
        let name = format!("{i:02}_{}", task.kind());
        let mut dir = ArtifactDir::create(out, &name)?;
        let t0 = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| execute(&ctx, task, &mut dir)));
        let output = match result {
            Err(panic) => TaskOutput {
                status: TaskStatus::Failed,
                message: panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "task panicked".into()),
                metrics: Value::Null,
            },
            Ok(Ok(o)) => o,
            Ok(Err(TaskError::Core(e))) => TaskOutput {
                status: status_of(&e),
                message: e.to_string(),
                metrics: Value::Null,
            },
            Ok(Err(TaskError::Cli(e))) => return Err(e),
        };
        tasks.push(TaskRecord {
            index: i,
            kind: task.kind().to_string(),
            dir: name,
            status: output.status,
            message: output.message,
            seconds: t0.elapsed().as_secs_f64(),
            metrics: output.metrics,
            artifacts: dir.files,
        });
    }
    let exit_code = combine_exit(tasks.iter().map(|t| t.status.exit_code()));
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        name: cfg.name.clone(),
        config_sha256: config_hash(text),
        overrides: ov.describe(),
        started_unix,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        exit_code,
        tasks,
    };
    write_root_json(out, "manifest.json", &manifest)?;
    Ok(manifest)
}

enum TaskError {
    Core(Error),
    Cli(CliError),
}

impl From<Error> for TaskError {
    fn from(e: Error) -> Self {
        TaskError::Core(e)
    }
}

impl From<CliError> for TaskError {
    fn from(e: CliError) -> Self {
        TaskError::Cli(e)
    }
}

fn constraint_json(r: &ConstraintReport) -> Value {
    json!({
        "floor": r.floor,
        "component_min": r.component_min,
        "global_min": r.global_min,
        "violated": r.violated,
        "first_violation": r.first_violation,
    })
}

fn execute(ctx: &Context, task: &Task, dir: &mut ArtifactDir) -> Result<TaskOutput, TaskError> {
    let cfg = ctx.cfg;
    let spec = &ctx.spec;
    let grid = cfg.numerics.grid_points;
    match task {
        Task::Validate { tol } => {
            let report = validate_structure(spec, *tol)?;
            dir.write_json("report.json", &json!({ "schema_version": SCHEMA_VERSION, "structure": &report }))?;
            Ok(TaskOutput::ok(report.summary(), serde_json::to_value(&report).unwrap_or_default()))
        }
        Task::Kalman { p_max } => {
            let v = kalman_condition_all_modes(spec, *p_max, RANK_TOL)?;
            dir.write_json("report.json", &json!({ "schema_version": SCHEMA_VERSION, "kalman": &v }))?;
            let metrics = serde_json::to_value(&v).unwrap_or_default();
            if v.satisfied_up_to_p_max && v.all_modes_exact != Some(false) {
                Ok(TaskOutput::ok(format!("rank condition holds for modes 0..={p_max}"), metrics))
            } else {
                Ok(TaskOutput {
                    status: TaskStatus::Infeasible,
                    message: match v.failed_at {
                        Some(p) => format!("rank condition fails at mode {p}"),
                        None => "rank condition fails for the reduced matrix".into(),
                    },
                    metrics,
                })
            }
        }
        Task::Free { horizon, steps } => {
            let (y0, _) = ctx.data();
            let rec = free_evolve(spec, y0, *horizon, *steps)?;
            let c = monitor_constraint(&rec, 0.0, grid);
            dir.trajectory(&rec, grid)?;
            let metrics = json!({
                "horizon": horizon,
                "final_l2": rec.final_state().l2_norm(),
                "constraint": constraint_json(&c),
            });
            dir.write_json("report.json", &json!({ "schema_version": SCHEMA_VERSION, "free": &metrics }))?;
            Ok(TaskOutput::ok(format!("minimum {:.4e} over [0, {horizon}]", c.global_min), metrics))
        }
        Task::Steer { tau } => {
            let (y0, yf0) = ctx.data();
            let st = Steerer::new(spec, *tau, cfg.steer_config())?;
            if let Some(e) = st.gramian().to_error() {
                return Err(e.into());
            }
            let target = free_state_at(spec, yf0, *tau);
            let (out, rec) = st.steer_and_run(y0, &target, 0.0)?;
            let terminal = rec.final_state().sub(&target).l2_norm();
            let c = monitor_constraint(&rec, 0.0, grid);
            dir.trajectory(&rec, grid)?;
            let mut sched = rdcontrol::ControlSchedule::default();
            sched.push(out.control)?;
            dir.control(&sched)?;
            let metrics = json!({
                "control_norm": out.cost.norm,
                "cost": &out.cost,
                "terminal_error": terminal,
                "gramian_min_eigenvalue": st.gramian().min_eigenvalue,
                "constraint": constraint_json(&c),
            });
            dir.write_json("report.json", &json!({ "schema_version": SCHEMA_VERSION, "steer": &metrics }))?;
            Ok(TaskOutput::ok(
                format!("‖U‖ = {:.6e}, terminal error {terminal:.3e}", out.cost.norm),
                metrics,
            ))
        }
        Task::CostSweep { taus } => {
            let (y0, yf0) = ctx.data();
            let sw = cost_sweep(spec, y0, yf0, taus, cfg.steer_config())?;
            let rows: Vec<Vec<String>> = sw
                .taus
                .iter()
                .zip(&sw.norms)
                .zip(&sw.defect_norms)
                .map(|((t, n), d)| vec![fmt(*t), fmt(*n), fmt(*d)])
                .collect();
            dir.csv("cost.csv", &["tau", "control_norm", "defect_norm"], &rows)?;
            dir.write_json("report.json", &json!({ "schema_version": SCHEMA_VERSION, "cost_sweep": &sw }))?;
            Ok(TaskOutput::ok(
                format!("slope of log‖U‖ against 1/τ {:.4}, decreasing {}", sw.slope, sw.strictly_decreasing),
                serde_json::to_value(&sw).unwrap_or_default(),
            ))
        }
        Task::StaircaseIdentity { tau, safety } => {
            let (y0, yf0) = ctx.data();
            let sc = staircase_config(cfg, *tau, *safety);
            let plan = plan_identity(spec, y0, yf0, &sc)?;
            let r = run_identity(spec, &plan, &sc)?;
            staircase_output(dir, r, grid)
        }
        Task::StaircaseGeneral { tau, floor, epsilon, safety } => {
            let (y0, yf0) = ctx.data();
            let sc = staircase_config(cfg, *tau, *safety);
            let mode = match (floor.as_str(), epsilon) {
                ("relaxed", Some(e)) => FloorMode::Relaxed { epsilon: *e },
                ("zeta_shift", Some(e)) => FloorMode::ZetaShift { epsilon: *e },
                _ => FloorMode::Exact,
            };
            let plan = plan_general(spec, y0, yf0, mode, &sc)?;
            let r = run_general(spec, &plan, &sc)?;
            staircase_output(dir, r, grid)
        }
        Task::MinimalTime {
            bound,
            t_lo,
            t_hi,
            iterations,
            j,
            knots,
            presweep: horizons,
            ball_center,
            ball_radius,
            sl_modes,
        } => {
            let (y0, yf0) = ctx.data();
            let mut p = FeasibilityProblem::new(spec, y0, yf0, *bound);
            p.j = *j;
            p.j_state = cfg.numerics.modes.max(*j);
            p.knots = *knots;
            p.substeps = cfg.numerics.substeps;
            let mut metrics = json!({});
            let mut notes = Vec::new();
            if let (Some(c), Some(r)) = (ball_center, ball_radius) {
                if spec.n != 1 {
                    return Err(Error::Configuration("the ball certificate needs a scalar system".into()).into());
                }
                let basis = sl_basis(spec.a[(0, 0)], *sl_modes);
                let yb = restrict_to_ball(y0, 0, *c, *r, &spec.omega, 2001)?;
                let fb = restrict_to_ball(yf0, 0, *c, *r, &spec.omega, 2001)?;
                let cert = gamma_certificate(&yb, &fb, &basis, 1e-9)?;
                let rows: Vec<Vec<String>> = (0..basis.len())
                    .map(|k| {
                        vec![
                            (k + 1).to_string(),
                            fmt(basis.mu[k]),
                            fmt(basis.lambda[k]),
                            fmt(basis.alpha[k]),
                            fmt(cert.ratios[k]),
                        ]
                    })
                    .collect();
                dir.csv("sl_basis.csv", &["n", "mu", "lambda", "alpha", "ratio"], &rows)?;
                dir.write_json(
                    "certificate.json",
                    &json!({ "schema_version": SCHEMA_VERSION, "center": c, "radius": r, "certificate": &cert }),
                )?;
                notes.push(if cert.certifies_positive_time {
                    "ball certificate: positive minimal time"
                } else {
                    "ball certificate inconclusive"
                });
                metrics["certificate"] = json!({
                    "spread": cert.spread,
                    "mean_ratio": cert.mean_ratio,
                    "certifies_positive_time": cert.certifies_positive_time,
                });
            }
            if !horizons.is_empty() {
                let calls = presweep(&p, horizons)?;
                dir.csv("presweep.csv", &["horizon", "verdict", "control_norm", "min_state"], &call_rows(&calls))?;
            }
            let b = bisect_minimal_time(&p, *t_lo, *t_hi, *iterations)?;
            dir.csv("calls.csv", &["horizon", "verdict", "control_norm", "min_state"], &call_rows(&b.calls))?;
            metrics["lower"] = json!(b.lower);
            metrics["upper"] = json!(b.upper);
            metrics["estimate"] = json!(b.estimate());
            metrics["indeterminate"] = json!(b.indeterminate);
            metrics["calls"] = json!(b.calls.len());
            dir.write_json("report.json", &json!({ "schema_version": SCHEMA_VERSION, "bisection": &b }))?;
            let mut message = format!("minimal time in [{:.6}, {:.6}]", b.lower, b.upper);
            if b.indeterminate > 0 {
                message.push_str(&format!(", {} indeterminate calls", b.indeterminate));
            }
            for n in notes {
                message.push_str("; ");
                message.push_str(n);
            }
            Ok(TaskOutput::ok(message, metrics))
        }
        Task::Obstruction { horizon } => {
            let (y0, yf0) = ctx.data();
            let o = mass_obstruction(spec, y0, yf0, *horizon);
            dir.write_json("report.json", &json!({ "schema_version": SCHEMA_VERSION, "obstruction": &o }))?;
            Ok(match o {
                Some(o) if o.obstructed => TaskOutput {
                    status: TaskStatus::Infeasible,
                    message: o.describe(),
                    metrics: serde_json::to_value(&o).unwrap_or_default(),
                },
                Some(o) => TaskOutput::ok(o.describe(), serde_json::to_value(&o).unwrap_or_default()),
                None => TaskOutput::ok("the system does not have the mass-transfer pattern", Value::Null),
            })
        }
    }
}

fn call_rows(calls: &[rdcontrol::minimal_time::FeasibilityCall]) -> Vec<Vec<String>> {
    calls
        .iter()
        .map(|c| vec![fmt(c.horizon), format!("{:?}", c.verdict).to_lowercase(), fmt(c.norm), fmt(c.min_state)])
        .collect()
}

fn staircase_config(cfg: &ScenarioConfig, tau: f64, safety: f64) -> StaircaseConfig {
    StaircaseConfig {
        tau,
        safety,
        steer: cfg.steer_config(),
        grid_points: cfg.numerics.grid_points,
        ..StaircaseConfig::default()
    }
}

fn staircase_output(dir: &mut ArtifactDir, r: StaircaseResult, grid: usize) -> Result<TaskOutput, TaskError> {
    let s = &r.summary;
    let rows: Vec<Vec<String>> = s
        .steps
        .iter()
        .map(|d| vec![d.phase.clone(), fmt(d.t_start), fmt(d.control_norm), fmt(d.defect), fmt(d.min_state)])
        .collect();
    dir.csv("steps.csv", &["phase", "t_start", "control_norm", "defect", "min_state"], &rows)?;
    if !r.trajectory.is_empty() {
        dir.trajectory(&r.trajectory, grid)?;
        dir.control(&r.schedule)?;
    }
    dir.write_json("report.json", &json!({ "schema_version": SCHEMA_VERSION, "staircase": s }))?;
    let metrics = json!({
        "steps": s.plan.steps,
        "delta": s.plan.delta,
        "c_tau": s.plan.c_tau,
        "floor": s.plan.floor,
        "total_time": s.plan.total_time,
        "terminal_error": s.terminal_error,
        "min_state": s.min_state,
        "control_norm": s.control_norm,
        "terminal_ok": s.terminal_ok,
        "constraint_violated": s.constraint_violated,
    });
    let (status, message) = if let Some(reason) = &s.plan.infeasibility {
        let mut m = reason.clone();
        if let Some(o) = &s.obstruction {
            m.push_str("; ");
            m.push_str(&o.describe());
        }
        (TaskStatus::Infeasible, m)
    } else if !s.terminal_ok || s.constraint_violated {
        (
            TaskStatus::NonConvergence,
            format!(
                "N = {}, terminal error {:.3e}, min state {:.3e} below floor {:.3e}: {}",
                s.plan.steps,
                s.terminal_error,
                s.min_state,
                s.plan.floor,
                s.notes.join("; ")
            ),
        )
    } else {
        (
            TaskStatus::Ok,
            format!("N = {}, terminal error {:.3e}, min state {:.3e}", s.plan.steps, s.terminal_error, s.min_state),
        )
    };
    Ok(TaskOutput { status, message, metrics })
}
