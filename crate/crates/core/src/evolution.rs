//! Free and controlled propagation in the truncated spectral representation,
//! a finite-difference cross-check, and constraint monitoring.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::control::{indicator_weights, ControlSignal};
use crate::error::{Error, Result};
use crate::linalg;
use crate::spectral::{self, coupling_matrix, NeumannBasis, SampleGrid, SpectralState};
use crate::system::SystemSpec;

/// Default spectral truncation.
pub const DEFAULT_MODES: usize = 32;
/// Default monitoring grid.
pub const DEFAULT_GRID_POINTS: usize = 512;
/// Slack used when certifying `state ≥ floor`.
pub const CERTIFY_TOL: f64 = 1e-6;

/// Per-mode one-step propagators for a fixed step `h`.
#[derive(Debug, Clone)]
pub struct Evolver {
    pub spec: SystemSpec,
    pub basis: NeumannBasis,
    pub h: f64,
    /// `e^{M_p h}`.
    pub e: Vec<DMatrix<f64>>,
    /// `∫_0^h e^{M_p (h−s)} ds`.
    pub f: Vec<DMatrix<f64>>,
    /// `∫_ω e_p e_q` over state modes.
    pub g: DMatrix<f64>,
}

impl Evolver {
    pub fn new(spec: &SystemSpec, j: usize, h: f64) -> Result<Self> {
        spec.check_dimensions()?;
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Configuration(format!("step size {h} must be positive")));
        }
        let basis = NeumannBasis::new(j);
        let (e, f): (Vec<_>, Vec<_>) = (0..=j)
            .into_par_iter()
            .map(|p| linalg::exp_and_phi1(&spec.mode_matrix(basis.eigenvalue(p)), h))
            .unzip();
        let g = coupling_matrix(&spec.omega, &basis)?.g;
        Ok(Self {
            spec: spec.clone(),
            basis,
            h,
            e,
            f,
            g,
        })
    }

    pub fn modes(&self) -> usize {
        self.basis.mode_count()
    }

    /// Mode forcing `(J+1) × n` produced by control coefficients `u` (`(jc+1) × m`).
    pub fn forcing(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let jc = u.nrows();
        self.g.columns(0, jc) * u * self.spec.b.transpose()
    }

    fn check_state(&self, state: &SpectralState) -> Result<()> {
        if state.modes() != self.modes() || state.components() != self.spec.n {
            return Err(Error::Dimension(format!(
                "state has {}×{} coefficients, evolver expects {}×{}",
                state.modes(),
                state.components(),
                self.modes(),
                self.spec.n
            )));
        }
        Ok(())
    }

    /// One step; `forcing` holds the midpoint source per mode.
    pub fn step(&self, state: &SpectralState, forcing: Option<&DMatrix<f64>>) -> SpectralState {
        let mut out = SpectralState::zeros(self.modes(), self.spec.n);
        for p in 0..self.modes() {
            let c = state.coeffs.row(p).transpose();
            let mut next = &self.e[p] * c;
            if let Some(fm) = forcing {
                next += &self.f[p] * fm.row(p).transpose();
            }
            out.coeffs.set_row(p, &next.transpose());
        }
        out
    }

    pub fn free(&self, state0: &SpectralState, t0: f64, steps: usize) -> Result<TrajectoryRecord> {
        self.check_state(state0)?;
        let mut rec = TrajectoryRecord::start(t0, state0.clone());
        let mut s = state0.clone();
        for k in 1..=steps {
            s = self.step(&s, None);
            rec.push(t0 + k as f64 * self.h, s.clone());
        }
        Ok(rec)
    }

    /// Substeps per control interval implied by this step size.
    pub fn substeps_for(&self, control: &ControlSignal) -> Result<usize> {
        let per = control.tau / control.intervals() as f64 / self.h;
        let r = per.round();
        if r < 1.0 || (per - r).abs() > 1e-8 * per.max(1.0) {
            return Err(Error::Structure(format!(
                "control interval {} is not a multiple of the step {}",
                control.tau / control.intervals() as f64,
                self.h
            )));
        }
        Ok(r as usize)
    }

    /// Evolves across the control window, starting at `control.t0`.
    pub fn controlled(
        &self,
        state0: &SpectralState,
        control: &ControlSignal,
    ) -> Result<TrajectoryRecord> {
        self.check_state(state0)?;
        if control.jc > self.basis.j || control.m != self.spec.m {
            return Err(Error::Structure(format!(
                "control with {} modes and {} channels does not fit {} modes and {} channels",
                control.jc + 1,
                control.m,
                self.modes(),
                self.spec.m
            )));
        }
        let r = self.substeps_for(control)?;
        let mut rec = TrajectoryRecord::start(control.t0, state0.clone());
        let mut s = state0.clone();
        let steps = r * control.intervals();
        for k in 0..steps {
            let i = k / r;
            let theta = ((k % r) as f64 + 0.5) / r as f64;
            let u = control.value_in(i, theta);
            let fm = self.forcing(&u);
            s = self.step(&s, Some(&fm));
            let t = if k + 1 == steps {
                control.t_end()
            } else {
                control.t0 + (k + 1) as f64 * self.h
            };
            rec.push(t, s.clone());
        }
        Ok(rec)
    }
}

/// Time series of spectral states.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub states: Vec<SpectralState>,
}

impl TrajectoryRecord {
    pub fn start(t0: f64, s: SpectralState) -> Self {
        Self {
            times: vec![t0],
            states: vec![s],
        }
    }

    pub fn push(&mut self, t: f64, s: SpectralState) {
        self.times.push(t);
        self.states.push(s);
    }

    /// Appends `other`, dropping its first sample when it repeats our last time.
    pub fn append(&mut self, other: &TrajectoryRecord) {
        let skip = match (self.times.last(), other.times.first()) {
            (Some(a), Some(b)) if (a - b).abs() <= 1e-12 * a.abs().max(1.0) => 1,
            _ => 0,
        };
        self.times.extend_from_slice(&other.times[skip..]);
        self.states.extend_from_slice(&other.states[skip..]);
    }

    pub fn final_state(&self) -> &SpectralState {
        self.states.last().expect("empty trajectory")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("empty trajectory")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn l2_norms(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.l2_norm()).collect()
    }

    /// Per-time L² distance to `reference`, which must share the time grid.
    pub fn distances_to(&self, reference: &TrajectoryRecord) -> Vec<f64> {
        self.states
            .iter()
            .zip(&reference.states)
            .map(|(a, b)| a.sub(b).l2_norm())
            .collect()
    }

    /// Per-time componentwise spatial minima.
    pub fn minima(&self, grid: &SampleGrid) -> Vec<Vec<f64>> {
        self.states.par_iter().map(|s| grid.minima(s)).collect()
    }

    pub fn is_increasing(&self) -> bool {
        self.times.windows(2).all(|w| w[1] > w[0])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstraintReport {
    pub floor: f64,
    pub certify_tol: f64,
    pub times: Vec<f64>,
    /// `minima[k][i]`: minimum of component `i` at `times[k]`.
    pub minima: Vec<Vec<f64>>,
    pub component_min: Vec<f64>,
    pub global_min: f64,
    pub violated: bool,
    pub first_violation: Option<f64>,
}

impl ConstraintReport {
    pub fn from_minima(times: Vec<f64>, minima: Vec<Vec<f64>>, floor: f64) -> Self {
        let n = minima.first().map_or(0, |m| m.len());
        let mut component_min = vec![f64::INFINITY; n];
        let mut first_violation = None;
        for (t, row) in times.iter().zip(&minima) {
            for (i, &v) in row.iter().enumerate() {
                component_min[i] = component_min[i].min(v);
                if v < floor - CERTIFY_TOL && first_violation.is_none() {
                    first_violation = Some(*t);
                }
            }
        }
        let global_min = component_min.iter().copied().fold(f64::INFINITY, f64::min);
        Self {
            floor,
            certify_tol: CERTIFY_TOL,
            times,
            minima,
            component_min,
            global_min,
            violated: first_violation.is_some(),
            first_violation,
        }
    }
}

pub fn monitor_constraint(traj: &TrajectoryRecord, floor: f64, grid_points: usize) -> ConstraintReport {
    let modes = traj.states.first().map_or(1, |s| s.modes());
    let grid = SampleGrid::new(grid_points.max(4 * modes), modes);
    ConstraintReport::from_minima(traj.times.clone(), traj.minima(&grid), floor)
}

fn steps_for(t: f64, steps: usize) -> Result<f64> {
    if !(t > 0.0 && t.is_finite()) || steps == 0 {
        return Err(Error::Configuration(format!(
            "horizon {t} and step count {steps} must be positive"
        )));
    }
    Ok(t / steps as f64)
}

/// Free evolution over `[0, t]`; the truncation level is taken from `state0`.
pub fn free_evolve(
    spec: &SystemSpec,
    state0: &SpectralState,
    t: f64,
    steps: usize,
) -> Result<TrajectoryRecord> {
    let h = steps_for(t, steps)?;
    Evolver::new(spec, state0.modes() - 1, h)?.free(state0, 0.0, steps)
}

/// Controlled evolution across the control window of length `t`.
pub fn controlled_evolve(
    spec: &SystemSpec,
    state0: &SpectralState,
    control: &ControlSignal,
    t: f64,
    steps: usize,
) -> Result<TrajectoryRecord> {
    let h = steps_for(t, steps)?;
    if (t - control.tau).abs() > 1e-12 * t.max(1.0) || !steps.is_multiple_of(control.intervals()) {
        return Err(Error::Structure(format!(
            "{steps} steps over {t} do not match a control of {} intervals over {}",
            control.intervals(),
            control.tau
        )));
    }
    Evolver::new(spec, state0.modes() - 1, h)?.controlled(state0, control)
}

/// Exact free state at time `t` (one matrix exponential per mode).
pub fn free_state_at(spec: &SystemSpec, state0: &SpectralState, t: f64) -> SpectralState {
    let mut out = state0.clone();
    if t == 0.0 {
        return out;
    }
    for p in 0..state0.modes() {
        let e = linalg::expm(&(spec.mode_matrix(spectral::eigenvalue(p)) * t));
        out.set_mode_vector(p, &(e * state0.mode_vector(p)));
    }
    out
}

/// Output of the finite-difference cross-check.
#[derive(Debug, Clone)]
pub struct FdResult {
    pub x: Vec<f64>,
    pub state: DMatrix<f64>,
    pub min_over_time: Vec<f64>,
}

impl FdResult {
    /// Trapezoid L² distance to a spectral state sampled at the same nodes.
    pub fn l2_distance(&self, s: &SpectralState) -> f64 {
        let grid = SampleGrid::new(self.x.len(), s.modes());
        let diff = grid.reconstruct(s) - &self.state;
        let h = 1.0 / (self.x.len() - 1) as f64;
        let w = linalg::trapezoid_weights(self.x.len(), h);
        (0..self.x.len())
            .map(|i| w[i] * diff.row(i).norm_squared())
            .sum::<f64>()
            .sqrt()
    }
}

/// Second-order central differences with mirrored ghost nodes, Heun steps in time.
///
/// `y0` holds node values (`points × n`) on `x_i = i/(points−1)`.
/// A control, when given, is applied on `[control.t0, control.t_end()]` with
/// the indicator of ω spread by dual-cell overlap.
pub fn fd_oracle_evolve(
    spec: &SystemSpec,
    y0: &DMatrix<f64>,
    control: Option<&ControlSignal>,
    t: f64,
    steps: usize,
) -> Result<FdResult> {
    spec.check_dimensions()?;
    let points = y0.nrows();
    if points < 3 || y0.ncols() != spec.n {
        return Err(Error::Dimension(format!(
            "grid data {}×{} does not fit n = {}",
            points,
            y0.ncols(),
            spec.n
        )));
    }
    let h = steps_for(t, steps)?;
    let dx = 1.0 / (points - 1) as f64;
    let dmax = (0..spec.n).map(|i| spec.d[(i, i)]).fold(0.0, f64::max);
    if h > dx * dx / (2.0 * dmax) {
        return Err(Error::Configuration(format!(
            "explicit step {h:.3e} exceeds stability bound {:.3e}",
            dx * dx / (2.0 * dmax)
        )));
    }
    let x = spectral::uniform_grid(points);
    let t0 = control.map_or(0.0, |c| c.t0);
    let table = control.map(|c| {
        let w = indicator_weights(&x, &c.omega);
        DMatrix::from_fn(points, c.jc + 1, |i, q| w[i] * spectral::mode(q, x[i]))
    });
    let dt = spec.d.transpose();
    let at = spec.a.transpose();
    let bt = spec.b.transpose();
    let rhs = |y: &DMatrix<f64>, time: f64| -> DMatrix<f64> {
        let mut lap = DMatrix::zeros(points, spec.n);
        for i in 0..points {
            let left = if i == 0 { 1 } else { i - 1 };
            let right = if i == points - 1 { points - 2 } else { i + 1 };
            for k in 0..spec.n {
                lap[(i, k)] = (y[(left, k)] - 2.0 * y[(i, k)] + y[(right, k)]) / (dx * dx);
            }
        }
        let mut out = lap * &dt + y * &at;
        if let (Some(c), Some(tab)) = (control, table.as_ref()) {
            if time >= c.t0 && time <= c.t_end() {
                out += tab * c.value_at(time) * &bt;
            }
        }
        out
    };
    let mut y = y0.clone();
    let mut min_over_time: Vec<f64> = y.column_iter().map(|c| c.min()).collect();
    for k in 0..steps {
        let tk = t0 + k as f64 * h;
        let k1 = rhs(&y, tk);
        let ystar = &y + &k1 * h;
        let k2 = rhs(&ystar, tk + h);
        y += (k1 + k2) * (0.5 * h);
        for (i, c) in y.column_iter().enumerate() {
            min_over_time[i] = min_over_time[i].min(c.min());
        }
    }
    Ok(FdResult {
        x,
        state: y,
        min_over_time,
    })
}
