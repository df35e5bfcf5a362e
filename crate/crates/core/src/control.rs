//! Time-sampled controls supported in ω, represented in the cosine basis.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::spectral::{coupling_entry, mode};
use crate::system::Interval;

/// Temporal envelope multiplying synthesized controls.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Envelope {
    /// Plain minimal L² norm control.
    #[default]
    None,
    /// Smooth bump vanishing to all orders at both ends, equal to 1 on the middle half.
    Bump,
}

impl Envelope {
    /// Envelope value at relative time `s ∈ [0, 1]`.
    pub fn value(&self, s: f64) -> f64 {
        match self {
            Envelope::None => 1.0,
            Envelope::Bump => {
                if s <= 0.0 || s >= 1.0 {
                    0.0
                } else if s < 0.25 {
                    smooth_step(4.0 * s)
                } else if s > 0.75 {
                    smooth_step(4.0 * (1.0 - s))
                } else {
                    1.0
                }
            }
        }
    }
}

fn smooth_step(x: f64) -> f64 {
    let f = |t: f64| if t <= 0.0 { 0.0 } else { (-1.0 / t).exp() };
    let a = f(x);
    let b = f(1.0 - x);
    if a + b == 0.0 {
        0.0
    } else {
        a / (a + b)
    }
}

/// Piecewise-linear control on `K` uniform intervals of `[t0, t0 + tau]`.
///
/// Knot `j` stores cosine coefficients `u_q` (rows `q = 0..=jc`, one column per channel).
/// The spatial field of channel `c` is `Σ_q u_qc(t) e_q(x) 1_ω(x)`, optionally
/// multiplied by `exp(growth·(t − t0))`.
#[derive(Debug, Clone)]
pub struct ControlSignal {
    pub t0: f64,
    pub tau: f64,
    pub omega: Interval,
    pub jc: usize,
    pub m: usize,
    pub knots: Vec<DMatrix<f64>>,
    pub growth: f64,
}

impl ControlSignal {
    pub fn zero(t0: f64, tau: f64, omega: Interval, jc: usize, m: usize, intervals: usize) -> Self {
        Self {
            t0,
            tau,
            omega,
            jc,
            m,
            knots: vec![DMatrix::zeros(jc + 1, m); intervals + 1],
            growth: 0.0,
        }
    }

    pub fn intervals(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + self.tau
    }

    pub fn knot_time(&self, j: usize) -> f64 {
        self.t0 + self.tau * j as f64 / self.intervals() as f64
    }

    /// Coefficients at interval `i`, fraction `theta ∈ [0,1]` into it.
    pub fn value_in(&self, i: usize, theta: f64) -> DMatrix<f64> {
        let mut u = &self.knots[i] * (1.0 - theta) + &self.knots[i + 1] * theta;
        if self.growth != 0.0 {
            let t = self.tau * (i as f64 + theta) / self.intervals() as f64;
            u *= (self.growth * t).exp();
        }
        u
    }

    /// Coefficients at absolute time `t`; zero outside the window.
    pub fn value_at(&self, t: f64) -> DMatrix<f64> {
        let k = self.intervals();
        let s = (t - self.t0) / self.tau * k as f64;
        if !(0.0..=k as f64).contains(&s) {
            return DMatrix::zeros(self.jc + 1, self.m);
        }
        let i = (s.floor() as usize).min(k - 1);
        self.value_in(i, s - i as f64)
    }

    /// Gram matrix `∫_ω e_p e_q` of the control modes.
    pub fn gram(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.jc + 1, self.jc + 1, |p, q| coupling_entry(p, q, &self.omega))
    }

    /// `‖U‖²` in `L²(ω × (t0, t0+τ))`, exact for P1 knots without growth.
    pub fn norm_squared(&self) -> f64 {
        let g = self.gram();
        let h = self.tau / self.intervals() as f64;
        let ip = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a.transpose() * &g * b).trace();
        if self.growth == 0.0 {
            return self
                .knots
                .windows(2)
                .map(|w| h / 3.0 * (ip(&w[0], &w[0]) + ip(&w[0], &w[1]) + ip(&w[1], &w[1])))
                .sum();
        }
        // five-point Gauss-Legendre per interval
        const NODES: [f64; 5] = [
            0.0,
            -0.538_469_310_105_683,
            0.538_469_310_105_683,
            -0.906_179_845_938_664,
            0.906_179_845_938_664,
        ];
        const WEIGHTS: [f64; 5] = [
            0.568_888_888_888_889,
            0.478_628_670_499_366,
            0.478_628_670_499_366,
            0.236_926_885_056_189,
            0.236_926_885_056_189,
        ];
        let mut total = 0.0;
        for i in 0..self.intervals() {
            for (x, w) in NODES.iter().zip(WEIGHTS) {
                let u = self.value_in(i, 0.5 * (1.0 + x));
                total += 0.5 * h * w * ip(&u, &u);
            }
        }
        total
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().max(0.0).sqrt()
    }

    /// Largest `|U(t,x)|` over knot times and `points` samples of ω.
    pub fn sup_norm(&self, points: usize) -> f64 {
        let xs: Vec<f64> = (0..points)
            .map(|i| self.omega.a + self.omega.len() * (i as f64 + 0.5) / points as f64)
            .collect();
        let table = DMatrix::from_fn(points, self.jc + 1, |i, q| mode(q, xs[i]));
        (0..self.knots.len())
            .map(|j| {
                let scale = (self.growth * (self.knot_time(j) - self.t0)).exp();
                (&table * &self.knots[j]).amax() * scale
            })
            .fold(0.0, f64::max)
    }

    /// Spatial samples `points × m` of the field at time `t`, including the indicator of ω.
    pub fn field_on_grid(&self, t: f64, x: &[f64], weights: &[f64]) -> DMatrix<f64> {
        let u = self.value_at(t);
        DMatrix::from_fn(x.len(), self.m, |i, c| {
            if weights[i] == 0.0 {
                return 0.0;
            }
            let v: f64 = (0..=self.jc).map(|q| u[(q, c)] * mode(q, x[i])).sum();
            v * weights[i]
        })
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for k in &mut out.knots {
            *k *= s;
        }
        out
    }

    /// Rows `time, channel, q, value` for CSV export.
    pub fn csv_rows(&self) -> Vec<(f64, usize, usize, f64)> {
        let mut rows = Vec::new();
        for (j, k) in self.knots.iter().enumerate() {
            let scale = (self.growth * (self.knot_time(j) - self.t0)).exp();
            for c in 0..self.m {
                for q in 0..=self.jc {
                    rows.push((self.knot_time(j), c, q, k[(q, c)] * scale));
                }
            }
        }
        rows
    }
}

/// Consecutive control phases tiling a time interval.
#[derive(Debug, Clone, Default)]
pub struct ControlSchedule {
    pub phases: Vec<ControlSignal>,
}

impl ControlSchedule {
    pub fn push(&mut self, phase: ControlSignal) -> Result<()> {
        if let Some(last) = self.phases.last() {
            let gap = (phase.t0 - last.t_end()).abs();
            if gap > 1e-9 * last.t_end().abs().max(1.0) {
                return Err(Error::Structure(format!(
                    "phase starting at {} does not continue the schedule ending at {}",
                    phase.t0,
                    last.t_end()
                )));
            }
        }
        self.phases.push(phase);
        Ok(())
    }

    pub fn start(&self) -> f64 {
        self.phases.first().map_or(0.0, |p| p.t0)
    }

    pub fn end(&self) -> f64 {
        self.phases.last().map_or(0.0, |p| p.t_end())
    }

    pub fn norm(&self) -> f64 {
        self.phases.iter().map(|p| p.norm_squared()).sum::<f64>().sqrt()
    }

    /// True when consecutive phases share endpoints and have positive length.
    pub fn tiles(&self, t_start: f64, t_end: f64, tol: f64) -> bool {
        if self.phases.is_empty() {
            return (t_end - t_start).abs() <= tol;
        }
        let mut t = t_start;
        for p in &self.phases {
            if (p.t0 - t).abs() > tol || p.tau <= 0.0 {
                return false;
            }
            t = p.t_end();
        }
        (t - t_end).abs() <= tol
    }
}

/// Fraction of each node's dual cell `[x_i − Δx/2, x_i + Δx/2] ∩ [0,1]` lying in ω.
pub fn indicator_weights(x: &[f64], omega: &Interval) -> Vec<f64> {
    let dx = if x.len() > 1 { x[1] - x[0] } else { 1.0 };
    x.iter()
        .map(|&xi| {
            let lo = (xi - 0.5 * dx).max(0.0);
            let hi = (xi + 0.5 * dx).min(1.0);
            let overlap = (hi.min(omega.b) - lo.max(omega.a)).max(0.0);
            if hi > lo {
                overlap / (hi - lo)
            } else {
                0.0
            }
        })
        .collect()
}

/// `Σ_q u_q e_q(x)` for a single channel, used by tests and exports.
pub fn cosine_series(u: &[f64], x: f64) -> f64 {
    u.iter()
        .enumerate()
        .map(|(q, &c)| c * if q == 0 { 1.0 } else { 2f64.sqrt() * (q as f64 * PI * x).cos() })
        .sum()
}
