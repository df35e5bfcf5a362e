//! Minimal-norm steering of the truncated system through its controllability Gramian.
//!
//! Controls are piecewise linear in time on `K` uniform intervals and live in the
//! span of `e_0 … e_jc` restricted to ω. The Gramian used by [`Steerer`] is built
//! from the same one-step propagators as [`Evolver`], so a synthesized control
//! reaches its target on the controlled modes up to rounding.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::control::{ControlSchedule, ControlSignal, Envelope};
use crate::error::{Error, Result};
use crate::evolution::{free_state_at, Evolver, TrajectoryRecord};
use crate::linalg;
use crate::spectral::{self, SpectralState};
use crate::system::SystemSpec;

/// Smallest admissible Gramian eigenvalue before steering is refused.
pub const GRAMIAN_EIG_FLOOR: f64 = 1e-12;
/// Endpoint defect tolerance on the controlled modes.
pub const STEER_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteerConfig {
    /// Highest controlled mode, also the highest control mode.
    pub j_ctrl: usize,
    /// Highest propagated mode.
    pub j_state: usize,
    /// Control time intervals.
    pub intervals: usize,
    /// Integrator substeps per control interval.
    pub substeps: usize,
    pub envelope: Envelope,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            j_ctrl: 8,
            j_state: 32,
            intervals: 64,
            substeps: 4,
            envelope: Envelope::None,
        }
    }
}

impl SteerConfig {
    pub fn steps(&self) -> usize {
        self.intervals * self.substeps
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub tau: f64,
    pub norm: f64,
    /// L² norm of the endpoint defect on the controlled modes.
    pub defect_norm: f64,
    /// `norm / defect_norm` (zero when the defect vanishes).
    pub ratio: f64,
    /// Fitted slope of `log‖U‖` against `1/τ`, filled by sweeps.
    pub blowup_slope: Option<f64>,
}

/// Continuous-time Gramian of the controlled modes.
#[derive(Debug, Clone)]
pub struct GramianOperator {
    pub w: DMatrix<f64>,
    pub min_eigenvalue: f64,
    pub min_eigenvector: DVector<f64>,
    pub warning: Option<String>,
}

impl GramianOperator {
    fn from_matrix(w: DMatrix<f64>) -> Self {
        let w = linalg::sym_part(&w);
        let (vals, vecs) = linalg::sym_eigen(&w);
        let min_eigenvalue = vals.first().copied().unwrap_or(0.0);
        let warning = (min_eigenvalue < GRAMIAN_EIG_FLOOR).then(|| {
            format!("Gramian smallest eigenvalue {min_eigenvalue:.3e} is below {GRAMIAN_EIG_FLOOR:.0e}")
        });
        Self {
            min_eigenvector: vecs.column(0).into_owned(),
            w,
            min_eigenvalue,
            warning,
        }
    }

    pub fn to_error(&self) -> Option<Error> {
        self.warning.as_ref().map(|_| Error::NearUncontrollable {
            min_eigenvalue: self.min_eigenvalue,
            eigenvector: self.min_eigenvector.clone(),
        })
    }
}

/// Orthonormalized control basis: `u = map · w` and mode coupling `coupling · w`.
pub(crate) struct ControlBasis {
    pub(crate) map: DMatrix<f64>,
    pub(crate) coupling: DMatrix<f64>,
}

pub(crate) fn control_basis(g: &DMatrix<f64>, jc: usize) -> ControlBasis {
    let gcc = g.view((0, 0), (jc + 1, jc + 1)).into_owned();
    let (vals, vecs) = linalg::sym_eigen(&gcc);
    let top = vals.last().copied().unwrap_or(0.0);
    let keep: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > 1e-13 * top).collect();
    let map = DMatrix::from_fn(jc + 1, keep.len(), |q, k| vecs[(q, keep[k])] / vals[keep[k]].sqrt());
    let coupling = g.columns(0, jc + 1) * &map;
    ControlBasis { map, coupling }
}

/// `(C_p ⊗ B)`: control coefficients (`rank × m`, row-major) to mode-`p` forcing.
pub(crate) fn input_block(coupling: &DMatrix<f64>, b: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    linalg::kron(&coupling.rows(p, 1).into_owned(), b)
}

/// Continuous Gramian over `[0, tau]` by composite Simpson quadrature.
pub fn build_gramian(
    spec: &SystemSpec,
    j_ctrl: usize,
    tau: f64,
    quad_steps: usize,
) -> Result<GramianOperator> {
    spec.check_dimensions()?;
    let steps = quad_steps.max(2) + quad_steps % 2;
    let basis = spectral::NeumannBasis::new(j_ctrl);
    let g = spectral::coupling_matrix(&spec.omega, &basis)?.g;
    let cb = control_basis(&g, j_ctrl);
    let n = spec.n;
    let ns = (j_ctrl + 1) * n;
    let input = {
        let mut m = DMatrix::zeros(ns, cb.map.ncols() * spec.m);
        for p in 0..=j_ctrl {
            m.view_mut((p * n, 0), (n, m.ncols()))
                .copy_from(&input_block(&cb.coupling, &spec.b, p));
        }
        m
    };
    let bb = &input * input.transpose();
    let hs = tau / steps as f64;
    let step: Vec<DMatrix<f64>> = (0..=j_ctrl)
        .map(|p| linalg::expm(&(spec.mode_matrix(basis.eigenvalue(p)) * hs)))
        .collect();
    let weights = linalg::simpson_weights(steps + 1, hs);
    let mut phi: Vec<DMatrix<f64>> = vec![DMatrix::identity(n, n); j_ctrl + 1];
    let mut w = DMatrix::zeros(ns, ns);
    for (k, &wk) in weights.iter().enumerate() {
        if k > 0 {
            for p in 0..=j_ctrl {
                phi[p] = &step[p] * &phi[p];
            }
        }
        for p in 0..=j_ctrl {
            for q in 0..=j_ctrl {
                let blk = &phi[p] * bb.view((p * n, q * n), (n, n)) * phi[q].transpose() * wk;
                let mut target = w.view_mut((p * n, q * n), (n, n));
                target += blk;
            }
        }
    }
    Ok(GramianOperator::from_matrix(w))
}

/// Solves `T X = R` for a symmetric tridiagonal `T` acting on row blocks of height `b`.
fn block_thomas(diag: &[f64], off: f64, rhs: &DMatrix<f64>, b: usize) -> DMatrix<f64> {
    let k = diag.len();
    let cols = rhs.ncols();
    let mut cp = vec![0.0; k];
    let mut x = rhs.clone();
    let mut denom = diag[0];
    cp[0] = off / denom;
    {
        let mut r = x.view_mut((0, 0), (b, cols));
        r /= denom;
    }
    for j in 1..k {
        denom = diag[j] - off * cp[j - 1];
        cp[j] = off / denom;
        let prev = x.view((b * (j - 1), 0), (b, cols)).into_owned();
        let mut r = x.view_mut((b * j, 0), (b, cols));
        r -= prev * off;
        r /= denom;
    }
    for j in (0..k - 1).rev() {
        let next = x.view((b * (j + 1), 0), (b, cols)).into_owned();
        let mut r = x.view_mut((b * j, 0), (b, cols));
        r -= next * cp[j];
    }
    x
}

/// Precomputed minimal-norm steering over a fixed horizon.
pub struct Steerer {
    pub spec: SystemSpec,
    pub cfg: SteerConfig,
    pub tau: f64,
    pub evolver: Evolver,
    map: DMatrix<f64>,
    rank: usize,
    /// Endpoint response of the controlled modes to knot values.
    response: DMatrix<f64>,
    /// Metric-weighted adjoint: knot values per unit multiplier.
    adjoint: DMatrix<f64>,
    gramian: GramianOperator,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    free_prop: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct SteerOutcome {
    pub control: ControlSignal,
    pub cost: CostReport,
}

impl Steerer {
    pub fn new(spec: &SystemSpec, tau: f64, cfg: SteerConfig) -> Result<Self> {
        spec.check_dimensions()?;
        if cfg.j_ctrl > cfg.j_state {
            return Err(Error::Configuration(format!(
                "controlled modes {} exceed propagated modes {}",
                cfg.j_ctrl, cfg.j_state
            )));
        }
        if cfg.intervals == 0 || cfg.substeps == 0 || !(tau > 0.0) {
            return Err(Error::Configuration("steering grid must be nonempty".into()));
        }
        let n = spec.n;
        let m = spec.m;
        let jc = cfg.j_ctrl;
        let k = cfg.intervals;
        let r = cfg.substeps;
        let evolver = Evolver::new(spec, cfg.j_state, tau / (k * r) as f64)?;
        let cb = control_basis(&evolver.g, jc);
        let rank = cb.map.ncols();
        let blk = rank * m;
        let ns = (jc + 1) * n;
        let mut response = DMatrix::zeros(ns, (k + 1) * blk);
        let mut free_prop = Vec::with_capacity(jc + 1);
        for p in 0..=jc {
            let input = input_block(&cb.coupling, &spec.b, p);
            let mut q = vec![DMatrix::<f64>::zeros(n, n); k + 1];
            let mut phi = DMatrix::<f64>::identity(n, n);
            for s in (0..k * r).rev() {
                let i = s / r;
                let theta = ((s % r) as f64 + 0.5) / r as f64;
                let pf = &phi * &evolver.f[p];
                q[i] += &pf * (1.0 - theta);
                q[i + 1] += &pf * theta;
                phi = &phi * &evolver.e[p];
            }
            for (j, qj) in q.iter().enumerate() {
                response
                    .view_mut((p * n, j * blk), (n, blk))
                    .copy_from(&(qj * &input));
            }
            free_prop.push(phi);
        }
        let h = tau / k as f64;
        let rt = response.transpose();
        let adjoint = match cfg.envelope {
            Envelope::None => {
                let mut diag = vec![2.0 * h / 3.0; k + 1];
                diag[0] = h / 3.0;
                diag[k] = h / 3.0;
                block_thomas(&diag, h / 6.0, &rt, blk)
            }
            Envelope::Bump => {
                let mut a = rt;
                for j in 0..=k {
                    let psi = cfg.envelope.value(j as f64 / k as f64);
                    let wgt = if psi > 1e-14 { psi / h } else { 0.0 };
                    let mut rows = a.view_mut((j * blk, 0), (blk, ns));
                    rows *= wgt;
                }
                a
            }
        };
        let gramian = GramianOperator::from_matrix(&response * &adjoint);
        let chol = if gramian.warning.is_none() {
            gramian.w.clone().cholesky()
        } else {
            None
        };
        Ok(Self {
            spec: spec.clone(),
            cfg,
            tau,
            evolver,
            map: cb.map,
            rank,
            response,
            adjoint,
            gramian,
            chol,
            free_prop,
        })
    }

    pub fn gramian(&self) -> &GramianOperator {
        &self.gramian
    }

    pub fn controlled_dim(&self) -> usize {
        (self.cfg.j_ctrl + 1) * self.spec.n
    }

    fn stack(&self, s: &SpectralState) -> DVector<f64> {
        let n = self.spec.n;
        DVector::from_fn(self.controlled_dim(), |i, _| s.coeffs[(i / n, i % n)])
    }

    /// Controlled-mode defect `target − free endpoint of state0`.
    pub fn defect(&self, state0: &SpectralState, target: &SpectralState) -> DVector<f64> {
        let n = self.spec.n;
        let mut d = self.stack(target);
        for p in 0..=self.cfg.j_ctrl {
            let free = &self.free_prop[p] * state0.mode_vector(p);
            for i in 0..n {
                d[p * n + i] -= free[i];
            }
        }
        d
    }

    /// Knot values (orthonormal control coordinates) reaching `d` with least norm.
    pub fn knot_coordinates(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        let chol = self.chol.as_ref().ok_or_else(|| {
            self.gramian.to_error().unwrap_or_else(|| {
                Error::Numerical("Gramian is not positive definite".into())
            })
        })?;
        let mut eta = chol.solve(d);
        let resid = d - &self.gramian.w * &eta;
        eta += chol.solve(&resid);
        Ok(&self.adjoint * eta)
    }

    /// Endpoint effect on the controlled modes of orthonormal knot coordinates.
    pub fn endpoint_effect(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.response * w
    }

    pub fn knot_dim(&self) -> usize {
        self.response.ncols()
    }

    /// Builds a signal on `[t0, t0+τ]` from orthonormal knot coordinates.
    pub fn signal(&self, t0: f64, w: &DVector<f64>) -> ControlSignal {
        let m = self.spec.m;
        let blk = self.rank * m;
        let knots = (0..=self.cfg.intervals)
            .map(|j| {
                let wj = DMatrix::from_row_slice(self.rank, m, &w.as_slice()[j * blk..(j + 1) * blk]);
                &self.map * wj
            })
            .collect();
        ControlSignal {
            t0,
            tau: self.tau,
            omega: self.spec.omega,
            jc: self.cfg.j_ctrl,
            m,
            knots,
            growth: 0.0,
        }
    }

    /// Minimal-norm control steering `state0` at `t0` to `target` at `t0 + τ`.
    pub fn steer(&self, state0: &SpectralState, target: &SpectralState, t0: f64) -> Result<SteerOutcome> {
        let modes = self.cfg.j_state + 1;
        let state0 = state0.resized(modes);
        let target = target.resized(modes);
        let d = self.defect(&state0, &target);
        let w = self.knot_coordinates(&d)?;
        let control = self.signal(t0, &w);
        let norm = control.norm();
        let defect_norm = d.norm();
        Ok(SteerOutcome {
            cost: CostReport {
                tau: self.tau,
                norm,
                defect_norm,
                ratio: if defect_norm > 0.0 { norm / defect_norm } else { 0.0 },
                blowup_slope: None,
            },
            control,
        })
    }

    /// Steers and propagates; returns the outcome with its trajectory.
    pub fn steer_and_run(
        &self,
        state0: &SpectralState,
        target: &SpectralState,
        t0: f64,
    ) -> Result<(SteerOutcome, TrajectoryRecord)> {
        let out = self.steer(state0, target, t0)?;
        let rec = self
            .evolver
            .controlled(&state0.resized(self.cfg.j_state + 1), &out.control)?;
        Ok((out, rec))
    }
}

/// One-shot minimal-norm steer; fails when the Gramian is near singular.
pub fn steer(
    spec: &SystemSpec,
    state0: &SpectralState,
    target: &SpectralState,
    t0: f64,
    tau: f64,
    cfg: SteerConfig,
) -> Result<(ControlSignal, CostReport)> {
    let s = Steerer::new(spec, tau, cfg)?;
    if let Some(e) = s.gramian().to_error() {
        return Err(e);
    }
    let out = s.steer(state0, target, t0)?;
    Ok((out.control, out.cost))
}

/// L² defect of `state` against `target` on modes `0..=j`.
pub fn mode_defect(state: &SpectralState, target: &SpectralState, j: usize) -> f64 {
    let k = (j + 1).min(state.modes()).min(target.modes());
    (state.coeffs.rows(0, k) - target.coeffs.rows(0, k)).norm()
}

#[derive(Debug, Clone)]
pub struct LrOutcome {
    pub schedule: ControlSchedule,
    pub trajectory: TrajectoryRecord,
    pub stage_modes: Vec<usize>,
    pub norm: f64,
    /// Terminal defect over all propagated modes.
    pub final_defect: f64,
    /// Plain single steer over the whole horizon with the final stage's modes.
    pub plain_norm: f64,
    pub plain_final_defect: f64,
}

/// Alternates control phases with growing mode counts and free dissipation phases.
///
/// Stage `j` steers modes `0..=j_min·2^j` during its first half toward the free
/// trajectory issued from `target0` at `t0`, then lets the system evolve freely.
pub fn lr_steer(
    spec: &SystemSpec,
    state0: &SpectralState,
    target0: &SpectralState,
    t0: f64,
    total_t: f64,
    stage_count: usize,
    j_min: usize,
    cfg: SteerConfig,
) -> Result<LrOutcome> {
    if stage_count == 0 {
        return Err(Error::Configuration("stage_count must be at least 1".into()));
    }
    let modes = cfg.j_state + 1;
    let target0 = target0.resized(modes);
    let stage = total_t / stage_count as f64;
    let half = 0.5 * stage;
    let mut schedule = ControlSchedule::default();
    let mut state = state0.resized(modes);
    let mut traj = TrajectoryRecord::start(t0, state.clone());
    let mut stage_modes = Vec::with_capacity(stage_count);
    for j in 0..stage_count {
        let ts = t0 + j as f64 * stage;
        let jc = (j_min << j).min(cfg.j_state);
        stage_modes.push(jc);
        let st = Steerer::new(spec, half, SteerConfig { j_ctrl: jc, ..cfg })?;
        if let Some(e) = st.gramian().to_error() {
            return Err(e);
        }
        let target = free_state_at(spec, &target0, ts + half - t0);
        let (out, rec) = st.steer_and_run(&state, &target, ts)?;
        traj.append(&rec);
        schedule.push(out.control)?;
        let free = st.evolver.free(rec.final_state(), ts + half, cfg.steps())?;
        schedule.push(ControlSignal::zero(ts + half, half, spec.omega, jc, spec.m, cfg.intervals))?;
        state = free.final_state().clone();
        traj.append(&free);
    }
    let target_end = free_state_at(spec, &target0, total_t);
    let final_defect = state.sub(&target_end).l2_norm();
    let jc_last = *stage_modes.last().unwrap_or(&j_min);
    let plain = Steerer::new(spec, total_t, SteerConfig { j_ctrl: jc_last, ..cfg })?;
    let (plain_out, plain_rec) = plain.steer_and_run(state0, &target_end, t0)?;
    Ok(LrOutcome {
        norm: schedule.norm(),
        schedule,
        trajectory: traj,
        stage_modes,
        final_defect,
        plain_norm: plain_out.cost.norm,
        plain_final_defect: plain_rec.final_state().sub(&target_end).l2_norm(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CostSweep {
    pub taus: Vec<f64>,
    pub norms: Vec<f64>,
    pub defect_norms: Vec<f64>,
    /// Least-squares slope of `log‖U‖` against `1/τ`.
    pub slope: f64,
    pub strictly_decreasing: bool,
}

/// Steers `state0` toward the free trajectory from `target0` over each horizon.
pub fn cost_sweep(
    spec: &SystemSpec,
    state0: &SpectralState,
    target0: &SpectralState,
    taus: &[f64],
    cfg: SteerConfig,
) -> Result<CostSweep> {
    let mut norms = Vec::with_capacity(taus.len());
    let mut defect_norms = Vec::with_capacity(taus.len());
    for &tau in taus {
        let target = free_state_at(spec, &target0.resized(cfg.j_state + 1), tau);
        let (_, cost) = steer(spec, state0, &target, 0.0, tau, cfg)?;
        norms.push(cost.norm);
        defect_norms.push(cost.defect_norm);
    }
    let xs: Vec<f64> = taus.iter().map(|t| 1.0 / t).collect();
    let ys: Vec<f64> = norms.iter().map(|v| v.ln()).collect();
    let mut order: Vec<usize> = (0..taus.len()).collect();
    order.sort_by(|&a, &b| taus[a].total_cmp(&taus[b]));
    let strictly_decreasing = order.windows(2).all(|w| norms[w[1]] < norms[w[0]]);
    Ok(CostSweep {
        taus: taus.to_vec(),
        norms,
        defect_norms,
        slope: ls_slope(&xs, &ys),
        strictly_decreasing,
    })
}

pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
