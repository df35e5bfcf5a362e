//! Minimal controllability time under a state floor: a Sturm–Liouville
//! certificate on balls away from the control region, a sampled feasibility
//! program with bisection on the horizon, and a mass-balance obstruction.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::PI;

use crate::control::ControlSignal;
use crate::error::{Error, Result};
use crate::evolution::{free_state_at, Evolver, CERTIFY_TOL};
use crate::hum::{control_basis, input_block, STEER_TOL};
use crate::linalg;
use crate::qp::{solve_qp, QpOptions, QpStatus};
use crate::spectral::{SampleGrid, SpectralState};
use crate::system::{Interval, SystemSpec};

/// Eigenpairs of `−p'' − a p = λ p` on the radial interval `[0, 1]`, with
/// `p'(0) = 0`, `p(1) = 0`, normalized so that `ω₀ ∫₀¹ p² = 1` with `ω₀ = 2`.
#[derive(Debug, Clone, Serialize)]
pub struct SlBasis {
    pub a: f64,
    pub omega0: f64,
    /// `μ_n = (n − ½)π`, `n = 1..=n_max`.
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Boundary derivative `p_n'(1) = (−1)ⁿ μ_n`.
    pub alpha: Vec<f64>,
}

pub fn sl_basis(a: f64, n_max: usize) -> SlBasis {
    let mu: Vec<f64> = (1..=n_max).map(|n| (n as f64 - 0.5) * PI).collect();
    let lambda = mu.iter().map(|m| m * m - a).collect();
    let alpha = mu
        .iter()
        .enumerate()
        .map(|(k, m)| if (k + 1) % 2 == 0 { *m } else { -*m })
        .collect();
    SlBasis {
        a,
        omega0: 2.0,
        mu,
        lambda,
        alpha,
    }
}

impl SlBasis {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// `p_n(r)` for `n ≥ 1`.
    pub fn eval(&self, n: usize, r: f64) -> f64 {
        (self.mu[n - 1] * r).cos()
    }

    /// `max_n |ω₀ α_n² / (2(λ_n + a)) − 1|`.
    pub fn identity_residual(&self) -> f64 {
        (0..self.len())
            .map(|k| (self.omega0 * self.alpha[k].powi(2) / (2.0 * (self.lambda[k] + self.a)) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Coefficients `∫_{−1}^{1} y(s) p_n(|s|) ds` of samples on a uniform grid of `[−1, 1]`.
    pub fn coefficients(&self, samples: &[f64]) -> Result<Vec<f64>> {
        let k = samples.len();
        if k < 5 {
            return Err(Error::Resolution(format!("{k} ball samples are too few")));
        }
        let h = 2.0 / (k - 1) as f64;
        let w = linalg::simpson_weights(k, h);
        Ok((1..=self.len())
            .map(|n| {
                (0..k)
                    .map(|i| {
                        let s = -1.0 + i as f64 * h;
                        w[i] * samples[i] * self.eval(n, s.abs())
                    })
                    .sum()
            })
            .collect())
    }
}

/// Ratios `(y⁰_n − y^f_n) / (−α_n)` of ball coefficients.
#[derive(Debug, Clone, Serialize)]
pub struct GammaCertificate {
    pub ratios: Vec<f64>,
    pub spread: f64,
    pub mean_ratio: f64,
    /// The ratios agree within the tolerance.
    pub constant: bool,
    /// Instantaneous transfer would need constant ratios equal to zero; any other
    /// pattern certifies a positive minimal time.
    pub certifies_positive_time: bool,
}

pub fn gamma_from_coefficients(diff: &[f64], basis: &SlBasis, tol: f64) -> GammaCertificate {
    let ratios: Vec<f64> = diff
        .iter()
        .zip(&basis.alpha)
        .map(|(d, a)| d / (-a))
        .collect();
    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = if ratios.is_empty() { 0.0 } else { hi - lo };
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    let constant = spread <= tol;
    GammaCertificate {
        ratios,
        spread,
        mean_ratio,
        constant,
        certifies_positive_time: !constant || mean_ratio.abs() > tol,
    }
}

/// Certificate from samples of the initial and target states on the ball.
pub fn gamma_certificate(
    y0_ball: &[f64],
    yf0_ball: &[f64],
    basis: &SlBasis,
    tol: f64,
) -> Result<GammaCertificate> {
    if y0_ball.len() != yf0_ball.len() {
        return Err(Error::Dimension("ball samples differ in length".into()));
    }
    let diff: Vec<f64> = y0_ball.iter().zip(yf0_ball).map(|(a, b)| a - b).collect();
    Ok(gamma_from_coefficients(&basis.coefficients(&diff)?, basis, tol))
}

/// Samples of component `comp` on the ball `(c − ρ, c + ρ)` at `x = c + ρ s`,
/// `s` uniform on `[−1, 1]`. The ball must avoid the closure of ω.
pub fn restrict_to_ball(
    state: &SpectralState,
    comp: usize,
    center: f64,
    radius: f64,
    omega: &Interval,
    points: usize,
) -> Result<Vec<f64>> {
    let lo = center - radius;
    let hi = center + radius;
    if !(radius > 0.0 && lo > 0.0 && hi < 1.0) {
        return Err(Error::Configuration(format!("ball ({lo}, {hi}) is not inside (0, 1)")));
    }
    if hi >= omega.a && lo <= omega.b {
        return Err(Error::Configuration(format!(
            "ball ({lo}, {hi}) meets the control region [{}, {}]",
            omega.a, omega.b
        )));
    }
    if comp >= state.components() {
        return Err(Error::Dimension(format!("no component {comp}")));
    }
    let k = points.max(5) | 1;
    Ok((0..k)
        .map(|i| {
            let s = -1.0 + 2.0 * i as f64 / (k - 1) as f64;
            state.eval(center + radius * s)[comp]
        })
        .collect())
}

/// Mass balance for a two-component system where one uncontrolled component
/// only receives from the other and the total mass is conserved without control.
///
/// Along any nonnegative trajectory the receiving component's mass cannot
/// decrease, while at the end it is at most the target's total mass.
#[derive(Debug, Clone, Serialize)]
pub struct MassObstruction {
    /// Index of the receiving component.
    pub component: usize,
    pub horizon: f64,
    /// Initial mass of the receiving component.
    pub lower_bound: f64,
    /// Total mass of the target.
    pub upper_bound: f64,
    /// Mass of the receiving component of the target at the horizon.
    pub target_mass_at_t: f64,
    pub obstructed: bool,
}

impl MassObstruction {
    pub fn describe(&self) -> String {
        if self.obstructed {
            format!(
                "component {} starts with mass {:.6} but the target carries total mass {:.6}; \
                 no nonnegative trajectory reaches it",
                self.component, self.lower_bound, self.upper_bound
            )
        } else {
            format!(
                "mass balance is not violated: component {} starts at {:.6}, target total {:.6}, \
                 target component mass at T = {:.6}",
                self.component, self.lower_bound, self.upper_bound, self.target_mass_at_t
            )
        }
    }
}

/// `None` when the coupling does not have the receiving-component structure.
pub fn mass_obstruction(
    spec: &SystemSpec,
    y0: &SpectralState,
    yf0: &SpectralState,
    t: f64,
) -> Option<MassObstruction> {
    const TOL: f64 = 1e-12;
    if spec.n != 2 || y0.components() != 2 || yf0.components() != 2 {
        return None;
    }
    let diagonal_d = spec.d[(0, 1)].abs() <= TOL && spec.d[(1, 0)].abs() <= TOL;
    if !diagonal_d {
        return None;
    }
    let a = &spec.a;
    let comp = (0..2).find(|&i| {
        let j = 1 - i;
        spec.b.row(i).iter().all(|v| v.abs() <= TOL)
            && a[(i, i)].abs() <= TOL
            && a[(j, i)].abs() <= TOL
            && a[(i, j)] >= -TOL
            && (a[(i, j)] + a[(j, j)]).abs() <= TOL
    })?;
    let lower_bound = y0.means()[comp];
    let upper_bound = yf0.means().iter().sum();
    let target_mass_at_t = free_state_at(spec, yf0, t).means()[comp];
    Some(MassObstruction {
        component: comp,
        horizon: t,
        lower_bound,
        upper_bound,
        target_mass_at_t,
        obstructed: lower_bound > upper_bound + TOL,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Feasible,
    Infeasible,
    Indeterminate,
}

/// Steering `y0` to the free target trajectory from `yf0` with `state ≥ −bound`.
#[derive(Debug, Clone)]
pub struct FeasibilityProblem {
    pub spec: SystemSpec,
    pub y0: SpectralState,
    pub yf0: SpectralState,
    /// `M`; `f64::INFINITY` drops the state constraint.
    pub bound: f64,
    /// Highest controlled and matched mode.
    pub j: usize,
    /// Highest propagated mode; modes above `j` are excited but not steered.
    pub j_state: usize,
    pub knots: usize,
    pub substeps: usize,
    /// Spatial sample intervals per constrained time.
    pub constraint_points: usize,
    /// Refinement of the audit grid over the constraint grid.
    pub audit_factor: usize,
    pub max_iter: usize,
    /// Constraint-generation rounds before giving up.
    pub max_rounds: usize,
}

impl FeasibilityProblem {
    pub fn new(spec: &SystemSpec, y0: &SpectralState, yf0: &SpectralState, bound: f64) -> Self {
        Self {
            spec: spec.clone(),
            y0: y0.clone(),
            yf0: yf0.clone(),
            bound,
            j: 8,
            j_state: 32,
            knots: 10,
            substeps: 4,
            constraint_points: 128,
            audit_factor: 4,
            max_iter: 100_000,
            max_rounds: 25,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityOutcome {
    pub horizon: f64,
    pub verdict: Verdict,
    pub norm: f64,
    pub endpoint_defect: f64,
    /// Smallest state value on the audit grid.
    pub min_state: f64,
    pub iterations: usize,
    pub rounds: usize,
    pub constraints: usize,
    pub reason: String,
    #[serde(skip)]
    pub control: Option<ControlSignal>,
}

/// Linear response of every substep state to the knot coordinates.
struct Response {
    /// `maps[s]`: `(J+1)n × nv`.
    maps: Vec<DMatrix<f64>>,
    free: Vec<SpectralState>,
    map: DMatrix<f64>,
    rank: usize,
}

fn build_response(p: &FeasibilityProblem, t: f64) -> Result<Response> {
    let spec = &p.spec;
    let (n, k, r) = (spec.n, p.knots, p.substeps);
    let ev = Evolver::new(spec, p.j_state, t / (k * r) as f64)?;
    let cb = control_basis(&ev.g, p.j);
    let rank = cb.map.ncols();
    let blk = rank * spec.m;
    let nv = (k + 1) * blk;
    let ns = (p.j_state + 1) * n;
    let inputs: Vec<DMatrix<f64>> = (0..=p.j_state)
        .map(|q| &ev.f[q] * input_block(&cb.coupling, &spec.b, q))
        .collect();
    let mut maps = Vec::with_capacity(k * r + 1);
    let mut free = Vec::with_capacity(k * r + 1);
    let mut cur = DMatrix::zeros(ns, nv);
    let mut state = p.y0.resized(p.j_state + 1);
    maps.push(cur.clone());
    free.push(state.clone());
    for s in 0..k * r {
        let i = s / r;
        let theta = ((s % r) as f64 + 0.5) / r as f64;
        let mut next = DMatrix::zeros(ns, nv);
        for q in 0..=p.j_state {
            let mut rows = next.view_mut((q * n, 0), (n, nv));
            rows.copy_from(&(&ev.e[q] * cur.view((q * n, 0), (n, nv))));
            let mut left = next.view_mut((q * n, i * blk), (n, blk));
            left += &inputs[q] * (1.0 - theta);
            let mut right = next.view_mut((q * n, (i + 1) * blk), (n, blk));
            right += &inputs[q] * theta;
        }
        cur = next;
        state = ev.step(&state, None);
        maps.push(cur.clone());
        free.push(state.clone());
    }
    Ok(Response {
        maps,
        free,
        map: cb.map,
        rank,
    })
}

fn stack(s: &SpectralState) -> DVector<f64> {
    let n = s.components();
    DVector::from_fn(s.modes() * n, |i, _| s.coeffs[(i / n, i % n)])
}

fn unstack(v: &DVector<f64>, n: usize) -> SpectralState {
    SpectralState::from_coeffs(DMatrix::from_fn(v.len() / n, n, |p, c| v[p * n + c]))
}

/// Solves the sampled minimal-norm program at horizon `t` and audits the result.
///
/// Inequalities are imposed at the time knots on `constraint_points + 1` nodes.
/// The solution is then checked at every substep on a grid `audit_factor` times
/// finer; violated audit nodes are added and the program is solved again.
pub fn feasibility(p: &FeasibilityProblem, t: f64) -> Result<FeasibilityOutcome> {
    p.spec.check_dimensions()?;
    if !(t > 0.0 && t.is_finite()) || p.knots == 0 || p.substeps == 0 {
        return Err(Error::Configuration(format!("horizon {t} and time grid must be positive")));
    }
    if p.j > p.j_state {
        return Err(Error::Configuration(format!(
            "matched modes {} exceed propagated modes {}",
            p.j, p.j_state
        )));
    }
    if !(p.bound >= 0.0) {
        return Err(Error::Configuration(format!("state bound {} must be nonnegative", p.bound)));
    }
    let n = p.spec.n;
    let m = p.spec.m;
    let modes = p.j_state + 1;
    let matched = (p.j + 1) * n;
    let resp = build_response(p, t)?;
    let blk = resp.rank * m;
    let nv = (p.knots + 1) * blk;
    let last = p.knots * p.substeps;
    let target = free_state_at(&p.spec, &p.yf0.resized(modes), t);
    let eq = resp.maps[last].rows(0, matched).into_owned();
    let eq_rhs = (stack(&target) - stack(&resp.free[last])).rows(0, matched).into_owned();
    let hk = t / p.knots as f64;
    let mut h = DMatrix::zeros(nv, nv);
    for j in 0..=p.knots {
        let d = if j == 0 || j == p.knots { hk / 3.0 } else { 2.0 * hk / 3.0 };
        for a in 0..blk {
            h[(j * blk + a, j * blk + a)] = d;
            if j < p.knots {
                h[(j * blk + a, (j + 1) * blk + a)] = hk / 6.0;
                h[((j + 1) * blk + a, j * blk + a)] = hk / 6.0;
            }
        }
    }
    let c = DVector::zeros(nv);
    let floor = -p.bound;
    let audit = SampleGrid::new(p.constraint_points * p.audit_factor + 1, modes);
    let outcome = |verdict, x: Option<&DVector<f64>>, min_state, iterations, rounds, constraints, reason: String| {
        let control = x.map(|x| signal(p, &resp, t, x));
        let endpoint_defect = x.map_or(f64::NAN, |x| (&eq * x - &eq_rhs).norm());
        FeasibilityOutcome {
            horizon: t,
            verdict,
            norm: control.as_ref().map_or(f64::NAN, |c| c.norm()),
            endpoint_defect,
            min_state,
            iterations,
            rounds,
            constraints,
            reason,
            control,
        }
    };
    let initial_min = audit.minima(&resp.free[0]).into_iter().fold(f64::INFINITY, f64::min);
    let target_min = audit.minima(&target).into_iter().fold(f64::INFINITY, f64::min);
    if initial_min < floor - CERTIFY_TOL || target_min < floor - CERTIFY_TOL {
        return Ok(outcome(
            Verdict::Infeasible,
            None,
            initial_min.min(target_min),
            0,
            0,
            0,
            "initial or target state lies below the floor".into(),
        ));
    }
    // rows: coefficient combination for (substep, audit node, component)
    let row_for = |s: usize, node: usize, comp: usize| -> (DVector<f64>, f64) {
        let mut row = DVector::zeros(nv);
        let mut offset = 0.0;
        for q in 0..modes {
            let e = audit.table[(node, q)];
            row += resp.maps[s].row(q * n + comp).transpose() * e;
            offset += e * resp.free[s].coeffs[(q, comp)];
        }
        (row, floor - offset)
    };
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    if p.bound.is_finite() {
        for i in 1..=p.knots {
            for l in (0..audit.points()).step_by(p.audit_factor) {
                for comp in 0..n {
                    rows.push(row_for(i * p.substeps, l, comp));
                }
            }
        }
    }
    let mut iterations = 0;
    for round in 0..=p.max_rounds {
        let g = DMatrix::from_fn(rows.len(), nv, |i, j| rows[i].0[j]);
        let gv = DVector::from_fn(rows.len(), |i, _| rows[i].1);
        let res = solve_qp(
            &h,
            &c,
            &eq,
            &eq_rhs,
            &g,
            &gv,
            QpOptions {
                max_iter: p.max_iter,
                ..QpOptions::default()
            },
        );
        iterations += res.iterations;
        match res.status {
            QpStatus::Infeasible => {
                return Ok(outcome(
                    Verdict::Infeasible,
                    None,
                    f64::NAN,
                    iterations,
                    round,
                    rows.len(),
                    "sampled constraints admit no control".into(),
                ))
            }
            QpStatus::IterationLimit => {
                return Ok(outcome(
                    Verdict::Indeterminate,
                    Some(&res.x),
                    f64::NAN,
                    iterations,
                    round,
                    rows.len(),
                    "iteration limit reached".into(),
                ))
            }
            QpStatus::Optimal => {}
        }
        let x = res.x;
        let defect = (&eq * &x - &eq_rhs).norm();
        // audit
        let per_step: Vec<(f64, Vec<(usize, usize, usize)>)> = (0..=last)
            .into_par_iter()
            .map(|s| {
                let coeffs = unstack(&(&resp.maps[s] * &x), n).add(&resp.free[s]);
                let vals = audit.reconstruct(&coeffs);
                let mut worst = Vec::new();
                let mut mn = f64::INFINITY;
                for comp in 0..n {
                    let col = vals.column(comp);
                    let (node, v) = col
                        .iter()
                        .enumerate()
                        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
                    mn = mn.min(v);
                    if v < floor - CERTIFY_TOL {
                        worst.push((s, node, comp));
                    }
                }
                (mn, worst)
            })
            .collect();
        let min_state = per_step.iter().map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        let violations: Vec<(usize, usize, usize)> = per_step.into_iter().flat_map(|(_, w)| w).collect();
        if violations.is_empty() || !p.bound.is_finite() {
            if defect <= STEER_TOL {
                return Ok(outcome(Verdict::Feasible, Some(&x), min_state, iterations, round, rows.len(), String::new()));
            }
            return Ok(outcome(
                Verdict::Indeterminate,
                Some(&x),
                min_state,
                iterations,
                round,
                rows.len(),
                format!("endpoint defect {defect:.3e} exceeds {STEER_TOL:.0e}"),
            ));
        }
        if round == p.max_rounds {
            return Ok(outcome(
                Verdict::Indeterminate,
                Some(&x),
                min_state,
                iterations,
                round,
                rows.len(),
                format!("audit still violated after {round} refinement rounds"),
            ));
        }
        for (s, node, comp) in violations {
            rows.push(row_for(s, node, comp));
        }
    }
    unreachable!()
}

fn signal(p: &FeasibilityProblem, resp: &Response, t: f64, x: &DVector<f64>) -> ControlSignal {
    let m = p.spec.m;
    let blk = resp.rank * m;
    let knots = (0..=p.knots)
        .map(|j| &resp.map * DMatrix::from_row_slice(resp.rank, m, &x.as_slice()[j * blk..(j + 1) * blk]))
        .collect();
    ControlSignal {
        t0: 0.0,
        tau: t,
        omega: p.spec.omega,
        jc: p.j,
        m,
        knots,
        growth: 0.0,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityCall {
    pub horizon: f64,
    pub verdict: Verdict,
    pub norm: f64,
    pub min_state: f64,
}

impl From<&FeasibilityOutcome> for FeasibilityCall {
    fn from(o: &FeasibilityOutcome) -> Self {
        Self {
            horizon: o.horizon,
            verdict: o.verdict,
            norm: o.norm,
            min_state: o.min_state,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BisectionResult {
    /// Largest horizon found infeasible.
    pub lower: f64,
    /// Smallest horizon found feasible; the reported estimate.
    pub upper: f64,
    pub calls: Vec<FeasibilityCall>,
    /// Calls that returned an indeterminate verdict (treated as infeasible).
    pub indeterminate: usize,
}

impl BisectionResult {
    pub fn estimate(&self) -> f64 {
        self.upper
    }
}

/// Bisection on the horizon; every call is logged.
pub fn bisect_minimal_time(
    p: &FeasibilityProblem,
    t_lo: f64,
    t_hi: f64,
    iterations: usize,
) -> Result<BisectionResult> {
    if !(t_lo > 0.0 && t_hi > t_lo) {
        return Err(Error::Setup(format!("bracket [{t_lo}, {t_hi}] is not increasing and positive")));
    }
    let mut calls = Vec::new();
    let mut indeterminate = 0;
    let mut eval = |t: f64, calls: &mut Vec<FeasibilityCall>| -> Result<bool> {
        let o = feasibility(p, t)?;
        calls.push(FeasibilityCall::from(&o));
        if o.verdict == Verdict::Indeterminate {
            indeterminate += 1;
        }
        Ok(o.verdict == Verdict::Feasible)
    };
    if eval(t_lo, &mut calls)? {
        return Err(Error::Setup(format!("lower horizon {t_lo} is already feasible")));
    }
    if !eval(t_hi, &mut calls)? {
        return Err(Error::Setup(format!("upper horizon {t_hi} is not feasible")));
    }
    let (mut lo, mut hi) = (t_lo, t_hi);
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        if eval(mid, &mut calls)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(BisectionResult {
        lower: lo,
        upper: hi,
        calls,
        indeterminate,
    })
}

/// Independent feasibility calls on a list of horizons, in parallel.
pub fn presweep(p: &FeasibilityProblem, horizons: &[f64]) -> Result<Vec<FeasibilityCall>> {
    horizons
        .par_iter()
        .map(|&t| feasibility(p, t).map(|o| FeasibilityCall::from(&o)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::Evolver;

    /// `p'' = −k p` by RK4 from `p(0) = 1, p'(0) = 0`; returns `(p(1), p'(1))`.
    fn shoot(k: f64, steps: usize) -> (f64, f64) {
        let h = 1.0 / steps as f64;
        let (mut y, mut v) = (1.0f64, 0.0f64);
        for _ in 0..steps {
            let f = |y: f64, v: f64| (v, -k * y);
            let (a1, b1) = f(y, v);
            let (a2, b2) = f(y + 0.5 * h * a1, v + 0.5 * h * b1);
            let (a3, b3) = f(y + 0.5 * h * a2, v + 0.5 * h * b2);
            let (a4, b4) = f(y + h * a3, v + h * b3);
            y += h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
            v += h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
        }
        (y, v)
    }

    #[test]
    fn sl_basis_matches_shooting() {
        let a = 1.3;
        let basis = sl_basis(a, 6);
        assert!(basis.identity_residual() < 1e-14);
        for n in 1..=6 {
            // bracket the n-th root of p(1; λ) around the n-th band
            let (mut lo, mut hi) = (((n as f64 - 1.0) * PI).powi(2) - a + 1e-9, ((n as f64) * PI).powi(2) - a - 1e-9);
            let f = |lam: f64| shoot(lam + a, 4000).0;
            let flo = f(lo);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if f(mid).signum() == flo.signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let lam = 0.5 * (lo + hi);
            assert!((lam - basis.lambda[n - 1]).abs() < 1e-7 * lam.abs().max(1.0), "n={n}: {lam}");
            let (_, dp) = shoot(lam + a, 4000);
            assert!((dp - basis.alpha[n - 1]).abs() < 1e-6, "n={n}: {dp}");
            // normalization ω₀∫₀¹p² = 1 by fine Simpson
            let k = 2001;
            let w = linalg::simpson_weights(k, 1.0 / (k - 1) as f64);
            let norm: f64 = (0..k)
                .map(|i| w[i] * basis.eval(n, i as f64 / (k - 1) as f64).powi(2))
                .sum();
            assert!((2.0 * norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_mode_difference_has_spread() {
        let basis = sl_basis(0.0, 8);
        let samples: Vec<f64> = (0..2001).map(|i| basis.eval(1, (-1.0 + i as f64 / 1000.0).abs())).collect();
        let zero = vec![0.0; samples.len()];
        let cert = gamma_certificate(&samples, &zero, &basis, 1e-8).unwrap();
        assert!((cert.ratios[0] - 2.0 / PI).abs() < 1e-9);
        assert!(cert.ratios[1..].iter().all(|r| r.abs() < 1e-9));
        assert!((cert.spread - 2.0 / PI).abs() < 1e-9);
        assert!(cert.certifies_positive_time);
    }

    #[test]
    fn proportional_difference_is_constant() {
        let basis = sl_basis(0.5, 10);
        let diff: Vec<f64> = basis.alpha.iter().map(|a| -0.1 * a).collect();
        let cert = gamma_from_coefficients(&diff, &basis, 1e-12);
        assert!(cert.constant && cert.certifies_positive_time);
        assert!((cert.mean_ratio - 0.1).abs() < 1e-14);
        let same = gamma_from_coefficients(&[0.0; 10], &basis, 1e-12);
        assert!(same.constant && !same.certifies_positive_time);
    }

    #[test]
    fn ball_must_avoid_control_region() {
        let s = SpectralState::constant(&[1.0], 4);
        let omega = Interval::new(0.5, 1.0).unwrap();
        assert!(restrict_to_ball(&s, 0, 0.25, 0.2, &omega, 101).is_ok());
        assert!(restrict_to_ball(&s, 0, 0.4, 0.2, &omega, 101).is_err());
        assert!(restrict_to_ball(&s, 0, 0.1, 0.2, &omega, 101).is_err());
    }

    fn mass_transfer() -> SystemSpec {
        SystemSpec::from_rows(2, 1, &[1.0, 0.0, 0.0, 1.0], &[0.0, 1.0, 0.0, -1.0], &[0.0, 1.0], (0.3, 0.8)).unwrap()
    }

    #[test]
    fn mass_obstruction_examples() {
        let spec = mass_transfer();
        let o = mass_obstruction(&spec, &SpectralState::constant(&[3.0, 1.0], 5), &SpectralState::constant(&[1.0, 1.0], 5), 2.0)
            .unwrap();
        assert_eq!(o.component, 0);
        assert!(o.obstructed);
        assert!((o.lower_bound - 3.0).abs() < 1e-14 && (o.upper_bound - 2.0).abs() < 1e-14);
        // free target: y1 = 2 − e^{−t}
        assert!((o.target_mass_at_t - (2.0 - (-2f64).exp())).abs() < 1e-12);
        let o = mass_obstruction(&spec, &SpectralState::constant(&[1.0, 1.0], 5), &SpectralState::constant(&[2.0, 1.0], 5), 2.0)
            .unwrap();
        assert!(!o.obstructed);
        assert!((o.upper_bound - 3.0).abs() < 1e-14);
        let heat = SystemSpec::from_rows(1, 1, &[1.0], &[0.0], &[1.0], (0.0, 0.5)).unwrap();
        assert!(mass_obstruction(&heat, &SpectralState::constant(&[1.0], 3), &SpectralState::constant(&[1.0], 3), 1.0).is_none());
    }

    fn heat_problem(bound: f64) -> FeasibilityProblem {
        let spec = SystemSpec::from_rows(1, 1, &[1.0], &[0.0], &[1.0], (0.5, 1.0)).unwrap();
        let mut y0 = SpectralState::constant(&[1.0], 9);
        y0.coeffs[(1, 0)] = 1.0;
        let mut yf0 = SpectralState::constant(&[1.0], 9);
        yf0.coeffs[(1, 0)] = -1.0;
        let mut p = FeasibilityProblem::new(&spec, &y0, &yf0, bound);
        p.knots = 10;
        p
    }

    #[test]
    fn unconstrained_program_is_minimal_norm_steering() {
        let p = heat_problem(f64::INFINITY);
        let o = feasibility(&p, 0.5).unwrap();
        assert_eq!(o.verdict, Verdict::Feasible);
        let ev = Evolver::new(&p.spec, p.j_state, 0.5 / (p.knots * p.substeps) as f64).unwrap();
        let rec = ev.controlled(&p.y0.resized(p.j_state + 1), o.control.as_ref().unwrap()).unwrap();
        let target = free_state_at(&p.spec, &p.yf0, 0.5);
        let end = rec.final_state().resized(p.j + 1);
        assert!(end.sub(&target).l2_norm() < 1e-8);
    }

    #[test]
    fn floor_is_certified_on_audit_grid() {
        let p = heat_problem(0.5);
        let o = feasibility(&p, 2.0).unwrap();
        assert_eq!(o.verdict, Verdict::Feasible, "{}", o.reason);
        assert!(o.min_state >= -0.5 - CERTIFY_TOL);
        let ev = Evolver::new(&p.spec, p.j_state, 2.0 / (p.knots * p.substeps) as f64).unwrap();
        let rec = ev.controlled(&p.y0.resized(p.j_state + 1), o.control.as_ref().unwrap()).unwrap();
        let grid = SampleGrid::new(2049, p.j_state + 1);
        let mn = rec.minima(&grid).iter().map(|m| m[0]).fold(f64::INFINITY, f64::min);
        assert!(mn > -0.5 - 1e-4, "{mn}");
    }

    #[test]
    fn short_horizon_is_infeasible() {
        let p = heat_problem(0.5);
        let o = feasibility(&p, 0.01).unwrap();
        assert_eq!(o.verdict, Verdict::Infeasible, "{:?}", o.reason);
    }

    #[test]
    fn bisection_rejects_bad_bracket() {
        let p = heat_problem(0.5);
        assert!(matches!(bisect_minimal_time(&p, 2.0, 3.0, 2), Err(Error::Setup(_))));
    }
}
