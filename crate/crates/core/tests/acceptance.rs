//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdcontrol::evolution::{controlled_evolve, fd_oracle_evolve, free_evolve, monitor_constraint};
use rdcontrol::hum::{cost_sweep, steer, SteerConfig, Steerer};
use rdcontrol::minimal_time::{
    bisect_minimal_time, feasibility, gamma_certificate, mass_obstruction, restrict_to_ball, sl_basis,
    FeasibilityProblem, Verdict,
};
use rdcontrol::spectral::SampleGrid;
use rdcontrol::staircase::{plan_general, plan_identity, run_general, run_identity, FloorMode, StaircaseConfig};
use rdcontrol::system::{kalman_rank, RANK_TOL};
use rdcontrol::{ControlSignal, Envelope, SpectralState, SystemSpec};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mass_transfer(omega: (f64, f64)) -> SystemSpec {
    SystemSpec::from_rows(2, 1, &[1.0, 0.0, 0.0, 1.0], &[0.0, 1.0, 0.0, -1.0], &[0.0, 1.0], omega).unwrap()
}

fn heat(omega: (f64, f64)) -> SystemSpec {
    SystemSpec::from_rows(1, 1, &[1.0], &[0.0], &[1.0], omega).unwrap()
}

fn positivity_preservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let d = DMatrix::from_fn(n, n, |i, j| if i == j { rng.random_range(0.1..2.0) } else { 0.0 });
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { rng.random_range(-2.0..1.0) } else { rng.random_range(0.0..2.0) });
        let b = DMatrix::from_element(n, 1, 1.0);
        let spec = SystemSpec::new(d, a, b, rdcontrol::Interval::new(0.3, 0.8).unwrap()).unwrap();
        let mut s = SpectralState::zeros(33, n);
        for c in 0..n {
            let mut total = 0.0;
            for p in 1..=8 {
                let v = rng.random_range(-1.0..1.0) / p as f64;
                s.coeffs[(p, c)] = v;
                total += v.abs();
            }
            s.coeffs[(0, c)] = 2f64.sqrt() * total + rng.random_range(0.0..0.2);
        }
        let rec = free_evolve(&spec, &s, 2.0, 200).map_err(|e| e.to_string())?;
        let r = monitor_constraint(&rec, 0.0, 512);
        worst = worst.min(r.global_min);
    }
    check(worst >= -1e-6, format!("smallest grid value over 100 systems {worst:.3e}"))
}

/// Rank of an integer matrix by fraction-free elimination.
fn bareiss_rank(mut m: Vec<Vec<i128>>) -> usize {
    let rows = m.len();
    let cols = m.first().map_or(0, |r| r.len());
    let mut rank = 0;
    let mut prev: i128 = 1;
    for col in 0..cols {
        let Some(piv) = (rank..rows).find(|&r| m[r][col] != 0) else { continue };
        m.swap(rank, piv);
        for r in rank + 1..rows {
            for c in col + 1..cols {
                m[r][c] = (m[rank][col] * m[r][c] - m[r][col] * m[rank][c]) / prev;
            }
            m[r][col] = 0;
        }
        prev = m[rank][col];
        rank += 1;
        if rank == rows {
            break;
        }
    }
    rank
}

fn int_kalman(d: &[Vec<i128>], a: &[Vec<i128>], b: &[Vec<i128>], lam: i128) -> Vec<Vec<i128>> {
    let n = a.len();
    let m = b[0].len();
    let mm: Vec<Vec<i128>> = (0..n).map(|i| (0..n).map(|j| a[i][j] - lam * d[i][j]).collect()).collect();
    let mut blocks = vec![b.to_vec()];
    for _ in 1..n {
        let last = blocks.last().unwrap();
        let next = (0..n)
            .map(|i| (0..m).map(|j| (0..n).map(|k| mm[i][k] * last[k][j]).sum()).collect())
            .collect();
        blocks.push(next);
    }
    (0..n).map(|i| blocks.iter().flat_map(|blk| blk[i].clone()).collect()).collect()
}

fn kalman_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = Vec::new();
    for trial in 0..200 {
        let n = rng.random_range(1..=3usize);
        let m = rng.random_range(1..=3usize);
        let mut draw = |r: usize, c: usize| -> Vec<Vec<i128>> {
            (0..r).map(|_| (0..c).map(|_| rng.random_range(-3..=3)).collect()).collect()
        };
        let (d, a, b) = (draw(n, n), draw(n, n), draw(n, m));
        let flat = |x: &Vec<Vec<i128>>| x.iter().flatten().map(|&v| v as f64).collect::<Vec<f64>>();
        let spec = SystemSpec::from_rows(n, m, &flat(&d), &flat(&a), &flat(&b), (0.2, 0.6)).unwrap();
        // λ = 0 is exact; at λ = π², 4π² the minors are integer polynomials in a
        // transcendental argument, so the rank is the generic rank, attained at
        // one of 7 integer points (minor degree ≤ 6 for n ≤ 3).
        let exact0 = bareiss_rank(int_kalman(&d, &a, &b, 0));
        let generic = (1..=7).map(|k| bareiss_rank(int_kalman(&d, &a, &b, 10 * k))).max().unwrap();
        for (lam, exact) in [(0.0, exact0), (PI * PI, generic), (4.0 * PI * PI, generic)] {
            let num = kalman_rank(&spec, lam, RANK_TOL).map_err(|e| e.to_string())?;
            if num != exact {
                mismatches.push(format!("trial {trial} λ={lam:.3}: {num} vs {exact}"));
            }
        }
    }
    check(mismatches.is_empty(), format!("600 rank comparisons, mismatches: {:?}", mismatches))
}

fn gramian_closed_form() -> Outcome {
    let spec = SystemSpec::from_rows(1, 1, &[1.0], &[-1.0], &[1.0], (0.0, 1.0)).unwrap();
    let cfg = SteerConfig { j_ctrl: 0, j_state: 0, intervals: 1000, substeps: 1, envelope: Envelope::None };
    let s = SpectralState::constant(&[1.0], 1);
    let (c, cost) = steer(&spec, &s, &SpectralState::zeros(1, 1), 0.0, 1.0, cfg).map_err(|e| e.to_string())?;
    let exact = 2.0 / (1f64.exp().powi(2) - 1.0);
    let rec = controlled_evolve(&spec, &s, &c, 1.0, 1000).map_err(|e| e.to_string())?;
    let end = rec.final_state().coeffs[(0, 0)].abs();
    let n2 = cost.norm.powi(2);
    check(
        (n2 - exact).abs() <= 1e-6 && end <= 1e-8,
        format!("‖U‖² = {n2:.9} (closed form {exact:.9}), |y(T)| = {end:.2e}"),
    )
}

fn cost_blowup() -> Outcome {
    let spec = mass_transfer((0.3, 0.8));
    let mut s0 = SpectralState::constant(&[1.0, 1.0], 33);
    s0.coeffs[(1, 0)] = 0.3;
    let t0 = SpectralState::constant(&[2.0, 1.0], 33);
    let sw = cost_sweep(&spec, &s0, &t0, &[0.05, 0.1, 0.2, 0.4], SteerConfig::default()).map_err(|e| e.to_string())?;
    check(
        sw.strictly_decreasing && sw.slope > 0.0,
        format!("norms {:?}, slope of log‖U‖ against 1/τ {:.4}", sw.norms, sw.slope),
    )
}

fn identity_staircase() -> Outcome {
    let start = Instant::now();
    let spec = SystemSpec::from_rows(2, 1, &[1.0, 0.0, 0.0, 1.0], &[0.0, 1.0, 0.0, 0.0], &[0.0, 1.0], (0.3, 0.8)).unwrap();
    let cfg = StaircaseConfig::default();
    let mut y0 = SpectralState::constant(&[1.0, 1.0], 33);
    y0.coeffs[(1, 0)] = 0.3;
    y0.coeffs[(2, 1)] = -0.2;
    let mut yf0 = SpectralState::constant(&[2.0, 1.5], 33);
    yf0.coeffs[(1, 1)] = 0.4;
    let plan = plan_identity(&spec, &y0, &yf0, &cfg).map_err(|e| e.to_string())?;
    let r = run_identity(&spec, &plan, &cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        r.summary.terminal_error <= 1e-3 && r.summary.min_state >= -1e-6 && secs < 120.0,
        format!(
            "N = {}, terminal error {:.3e}, min state {:.4e}, {secs:.1} s",
            plan.steps, r.summary.terminal_error, r.summary.min_state
        ),
    )
}

fn general_staircase() -> Outcome {
    let spec = mass_transfer((0.3, 0.8));
    let cfg = StaircaseConfig::default();
    let y0 = SpectralState::constant(&[1.0, 1.0], 33);
    let yf0 = SpectralState::constant(&[2.0, 1.0], 33);
    let plan = plan_general(&spec, &y0, &yf0, FloorMode::Relaxed { epsilon: 0.1 }, &cfg).map_err(|e| e.to_string())?;
    let r = run_general(&spec, &plan, &cfg).map_err(|e| e.to_string())?;
    check(
        r.summary.terminal_error <= 1e-3 && r.summary.min_state >= -0.1 - 1e-6,
        format!(
            "N = {}, terminal error {:.3e}, min state {:.4e}",
            plan.steps, r.summary.terminal_error, r.summary.min_state
        ),
    )
}

fn obstruction_gap() -> Outcome {
    let spec = mass_transfer((0.3, 0.8));
    let cfg = StaircaseConfig::default();
    let y0 = SpectralState::constant(&[3.0, 1.0], 33);
    let yf0 = SpectralState::constant(&[1.0, 1.0], 33);
    let o = mass_obstruction(&spec, &y0, &yf0, 10.0).ok_or("pattern not recognized")?;
    let plan = plan_general(&spec, &y0, &yf0, FloorMode::Relaxed { epsilon: 1.5 }, &cfg).map_err(|e| e.to_string())?;
    let r = run_general(&spec, &plan, &cfg).map_err(|e| e.to_string())?;
    let exact = plan_general(&spec, &y0, &yf0, FloorMode::Exact, &cfg).map_err(|e| e.to_string())?;
    check(
        o.obstructed
            && (o.lower_bound - 3.0).abs() < 1e-12
            && (o.upper_bound - 2.0).abs() < 1e-12
            && r.summary.terminal_error <= 1e-3
            && r.summary.min_state >= -1.5 - 1e-6
            && exact.infeasibility.is_some(),
        format!(
            "obstructed: ∫y₁ ≥ {:.3} > target bound {:.3}; relaxed ε = 1.5 run: error {:.3e}, min {:.3e}; exact floor plan refused",
            o.lower_bound, o.upper_bound, r.summary.terminal_error, r.summary.min_state
        ),
    )
}

fn sl_identity() -> Outcome {
    let worst = [0.0, 1.0, -1.0]
        .iter()
        .map(|&a| sl_basis(a, 50).identity_residual())
        .fold(0.0, f64::max);
    check(worst <= 1e-9, format!("max |identity − 1| = {worst:.2e}"))
}

fn minimal_time_probe() -> Outcome {
    let start = Instant::now();
    let spec = heat((0.5, 1.0));
    let mut y0 = SpectralState::constant(&[1.0], 33);
    y0.coeffs[(1, 0)] = 1.0;
    let mut yf0 = SpectralState::constant(&[1.0], 33);
    yf0.coeffs[(1, 0)] = -1.0;
    let coarse = FeasibilityProblem::new(&spec, &y0, &yf0, 0.5);
    let short = feasibility(&coarse, 0.01).map_err(|e| e.to_string())?;
    let long = feasibility(&coarse, 2.0).map_err(|e| e.to_string())?;
    let a = bisect_minimal_time(&coarse, 0.01, 2.0, 10).map_err(|e| e.to_string())?;
    let mut fine = coarse.clone();
    fine.j *= 2;
    fine.knots *= 2;
    let b = bisect_minimal_time(&fine, 0.01, 2.0, 10).map_err(|e| e.to_string())?;
    let rel = (a.estimate() - b.estimate()).abs() / a.estimate();
    let basis = sl_basis(0.0, 20);
    let yb = restrict_to_ball(&y0, 0, 0.25, 0.2, &spec.omega, 2001).map_err(|e| e.to_string())?;
    let fb = restrict_to_ball(&yf0, 0, 0.25, 0.2, &spec.omega, 2001).map_err(|e| e.to_string())?;
    let cert = gamma_certificate(&yb, &fb, &basis, 1e-9).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        short.verdict == Verdict::Infeasible
            && long.verdict == Verdict::Feasible
            && a.lower > 0.0
            && rel < 0.1
            && cert.spread > 0.0
            && secs < 300.0,
        format!(
            "T=0.01 {:?}, T=2 {:?}; brackets [{:.4}, {:.4}] and [{:.4}, {:.4}] (J, K doubled), change {:.1}%; spread {:.3e}; {secs:.0} s",
            short.verdict, long.verdict, a.lower, a.upper, b.lower, b.upper, 100.0 * rel, cert.spread
        ),
    )
}

fn fd_cross_validation() -> Outcome {
    let points = 257;
    let mut errs = Vec::new();
    // free heat
    let h = heat((0.3, 0.8));
    let mut s = SpectralState::constant(&[1.0], 33);
    s.coeffs[(1, 0)] = 0.5;
    s.coeffs[(3, 0)] = 0.3;
    let grid = SampleGrid::new(points, 33);
    let spec_end = free_evolve(&h, &s, 0.1, 20).map_err(|e| e.to_string())?;
    let fd = fd_oracle_evolve(&h, &grid.reconstruct(&s), None, 0.1, 14_000).map_err(|e| e.to_string())?;
    errs.push(fd.l2_distance(spec_end.final_state()));
    // free mass transfer
    let mt = mass_transfer((0.3, 0.8));
    let mut s = SpectralState::constant(&[1.0, 1.0], 33);
    s.coeffs[(2, 0)] = 0.4;
    s.coeffs[(1, 1)] = 0.3;
    let spec_end = free_evolve(&mt, &s, 0.5, 50).map_err(|e| e.to_string())?;
    let fd = fd_oracle_evolve(&mt, &grid.reconstruct(&s), None, 0.5, 70_000).map_err(|e| e.to_string())?;
    errs.push(fd.l2_distance(spec_end.final_state()));
    // controlled mass transfer
    let st = Steerer::new(&mt, 0.5, SteerConfig::default()).map_err(|e| e.to_string())?;
    let target = SpectralState::constant(&[1.3, 1.0], 33);
    let (out, rec) = st.steer_and_run(&s, &target, 0.0).map_err(|e| e.to_string())?;
    let fd = fd_oracle_evolve(&mt, &grid.reconstruct(&s), Some(&out.control), 0.5, 70_000).map_err(|e| e.to_string())?;
    errs.push(fd.l2_distance(rec.final_state()));

    // self-convergence under step halving
    let spec = mass_transfer((0.2, 0.7));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut control = ControlSignal::zero(0.0, 1.0, spec.omega, 8, 1, 8);
    for k in &mut control.knots {
        for v in k.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
    }
    let mut y0 = SpectralState::constant(&[1.0, 0.5], 9);
    y0.coeffs[(1, 1)] = 0.2;
    let finals: Vec<SpectralState> = [400, 800, 1600, 3200]
        .iter()
        .map(|&k| controlled_evolve(&spec, &y0, &control, 1.0, k).map(|r| r.final_state().clone()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let diffs: Vec<f64> = finals.windows(2).map(|w| w[0].sub(&w[1]).l2_norm()).collect();
    let orders: Vec<f64> = diffs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let min_order = orders.iter().copied().fold(f64::INFINITY, f64::min);
    let max_err = errs.iter().copied().fold(0.0, f64::max);
    check(
        max_err <= 1e-3 && min_order >= 1.9,
        format!(
            "spectral vs finite differences [{}]; step-halving orders [{}]",
            errs.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(", "),
            orders.iter().map(|o| format!("{o:.3}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 positivity preservation", positivity_preservation),
        ("2 Kalman rank vs exact arithmetic", kalman_oracle),
        ("3 single-mode steering closed form", gramian_closed_form),
        ("4 control cost grows as the horizon shrinks", cost_blowup),
        ("5 identity-diffusion staircase", identity_staircase),
        ("6 diagonal-diffusion staircase", general_staircase),
        ("7 mass obstruction and relaxed staircase", obstruction_gap),
        ("8 Sturm-Liouville normalization identity", sl_identity),
        ("9 minimal-time probe", minimal_time_probe),
        ("10 spectral vs finite differences, convergence order", fd_cross_validation),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let out = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match out {
            Ok(d) => println!("PASS  criterion {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL  criterion {name}: {d} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
