//! Neumann cosine basis of `−Δ` on `(0, 1)`, projections and ω-restricted Gram matrices.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::system::Interval;

/// Modes `e_0 = 1`, `e_p = √2 cos(pπx)` for `p = 0..=j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeumannBasis {
    pub j: usize,
}

impl NeumannBasis {
    pub fn new(j: usize) -> Self {
        Self { j }
    }

    pub fn mode_count(&self) -> usize {
        self.j + 1
    }

    pub fn eigenvalue(&self, p: usize) -> f64 {
        eigenvalue(p)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        (0..=self.j).map(eigenvalue).collect()
    }

    pub fn eval(&self, p: usize, x: f64) -> f64 {
        mode(p, x)
    }
}

pub fn eigenvalue(p: usize) -> f64 {
    (p as f64 * PI).powi(2)
}

pub fn mode(p: usize, x: f64) -> f64 {
    if p == 0 {
        1.0
    } else {
        SQRT_2 * (p as f64 * PI * x).cos()
    }
}

/// Uniform nodes `x_i = i/(N−1)`.
pub fn uniform_grid(points: usize) -> Vec<f64> {
    let h = 1.0 / (points - 1) as f64;
    (0..points).map(|i| i as f64 * h).collect()
}

/// Points needed to resolve `j` modes at 8 points per wavelength.
pub fn default_grid_points(j: usize) -> usize {
    (4 * j).max(64) + 1
}

/// Per-mode coefficients: row `p` holds the `n` component coefficients of mode `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    pub coeffs: DMatrix<f64>,
}

impl SpectralState {
    pub fn zeros(modes: usize, n: usize) -> Self {
        Self {
            coeffs: DMatrix::zeros(modes, n),
        }
    }

    pub fn from_coeffs(coeffs: DMatrix<f64>) -> Self {
        Self { coeffs }
    }

    /// Spatially constant field with component values `values`.
    pub fn constant(values: &[f64], modes: usize) -> Self {
        let mut s = Self::zeros(modes, values.len());
        for (i, &v) in values.iter().enumerate() {
            s.coeffs[(0, i)] = v;
        }
        s
    }

    pub fn modes(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn components(&self) -> usize {
        self.coeffs.ncols()
    }

    /// Spatial means, equal to the mode-0 coefficients.
    pub fn means(&self) -> Vec<f64> {
        self.coeffs.row(0).iter().copied().collect()
    }

    pub fn mode_vector(&self, p: usize) -> DVector<f64> {
        self.coeffs.row(p).transpose()
    }

    pub fn set_mode_vector(&mut self, p: usize, v: &DVector<f64>) {
        self.coeffs.set_row(p, &v.transpose());
    }

    /// L² norm over `(0,1)` summed across components (Parseval).
    pub fn l2_norm(&self) -> f64 {
        self.coeffs.norm()
    }

    pub fn component_l2_norms(&self) -> Vec<f64> {
        self.coeffs.column_iter().map(|c| c.norm()).collect()
    }

    /// Truncates or zero-pads to `modes` modes.
    pub fn resized(&self, modes: usize) -> Self {
        let n = self.components();
        let mut c = DMatrix::zeros(modes, n);
        let k = modes.min(self.modes());
        c.view_mut((0, 0), (k, n)).copy_from(&self.coeffs.view((0, 0), (k, n)));
        Self { coeffs: c }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            coeffs: &self.coeffs - &other.coeffs,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            coeffs: &self.coeffs + &other.coeffs,
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            coeffs: &self.coeffs * s,
        }
    }

    /// `(1−θ)·self + θ·other`.
    pub fn lerp(&self, other: &Self, theta: f64) -> Self {
        Self {
            coeffs: &self.coeffs * (1.0 - theta) + &other.coeffs * theta,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|v| v.is_finite())
    }

    /// Field values at `x`, one per component.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.components()];
        for p in 0..self.modes() {
            let e = mode(p, x);
            for (i, o) in out.iter_mut().enumerate() {
                *o += self.coeffs[(p, i)] * e;
            }
        }
        out
    }
}

/// Cached cosine table on a uniform grid, for repeated reconstruction.
#[derive(Debug, Clone)]
pub struct SampleGrid {
    pub x: Vec<f64>,
    /// `points × modes`, entry `(i, p) = e_p(x_i)`.
    pub table: DMatrix<f64>,
}

impl SampleGrid {
    pub fn new(points: usize, modes: usize) -> Self {
        let x = uniform_grid(points);
        let table = DMatrix::from_fn(points, modes, |i, p| mode(p, x[i]));
        Self { x, table }
    }

    pub fn points(&self) -> usize {
        self.x.len()
    }

    /// Grid samples (`points × n`) of `state`, using its first `table.ncols()` modes.
    pub fn reconstruct(&self, state: &SpectralState) -> DMatrix<f64> {
        let k = self.table.ncols().min(state.modes());
        self.table.columns(0, k) * state.coeffs.rows(0, k)
    }

    pub fn minima(&self, state: &SpectralState) -> Vec<f64> {
        self.reconstruct(state)
            .column_iter()
            .map(|c| c.min())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Quadrature {
    /// Composite trapezoid, exact on the discrete cosine modes it resolves.
    Trapezoid,
    Simpson,
}

/// Projects grid samples (`points × n`, uniform grid on `[0,1]`) onto `basis`.
pub fn project(
    samples: &DMatrix<f64>,
    basis: &NeumannBasis,
    rule: Quadrature,
) -> Result<SpectralState> {
    let points = samples.nrows();
    if points < 4 * basis.j || points < 3 {
        return Err(Error::Resolution(format!(
            "{points} grid points cannot resolve {} modes (need at least {})",
            basis.mode_count(),
            (4 * basis.j).max(3)
        )));
    }
    let h = 1.0 / (points - 1) as f64;
    let w = match rule {
        Quadrature::Trapezoid => linalg::trapezoid_weights(points, h),
        Quadrature::Simpson => linalg::simpson_weights(points, h),
    };
    let x = uniform_grid(points);
    let weighted = DMatrix::from_fn(basis.mode_count(), points, |p, i| w[i] * mode(p, x[i]));
    Ok(SpectralState::from_coeffs(weighted * samples))
}

/// Samples a closure of `x` on a uniform grid and projects it.
pub fn project_fn<F>(f: F, n: usize, basis: &NeumannBasis, points: usize) -> Result<SpectralState>
where
    F: Fn(f64) -> Vec<f64>,
{
    let x = uniform_grid(points);
    let mut samples = DMatrix::zeros(points, n);
    for (i, &xi) in x.iter().enumerate() {
        let v = f(xi);
        for k in 0..n {
            samples[(i, k)] = v[k];
        }
    }
    project(&samples, basis, Quadrature::Trapezoid)
}

/// Componentwise minima of the reconstruction on a uniform grid.
pub fn min_on_grid(state: &SpectralState, grid_points: usize) -> Vec<f64> {
    let points = grid_points.max(4 * state.modes().saturating_sub(1)).max(2);
    SampleGrid::new(points, state.modes()).minima(state)
}

/// `∫_a^b cos(kπx) dx`.
fn cos_integral(k: usize, iv: &Interval) -> f64 {
    if k == 0 {
        iv.len()
    } else {
        let w = k as f64 * PI;
        ((w * iv.b).sin() - (w * iv.a).sin()) / w
    }
}

/// `G[p][q] = ∫_ω e_p e_q dx` for `p, q = 0..=J`.
#[derive(Debug, Clone)]
pub struct ControlCoupling {
    pub omega: Interval,
    pub g: DMatrix<f64>,
}

impl ControlCoupling {
    /// Columns `0..=jc` of `G` (state modes × control modes).
    pub fn columns(&self, jc: usize) -> DMatrix<f64> {
        self.g.columns(0, jc + 1).into_owned()
    }
}

pub fn coupling_entry(p: usize, q: usize, omega: &Interval) -> f64 {
    let c = |k: usize| if k == 0 { 1.0 } else { SQRT_2 };
    0.5 * c(p) * c(q) * (cos_integral(p.abs_diff(q), omega) + cos_integral(p + q, omega))
}

pub fn coupling_matrix(omega: &Interval, basis: &NeumannBasis) -> Result<ControlCoupling> {
    if omega.is_empty() || omega.a < 0.0 || omega.b > 1.0 {
        return Err(Error::Structure(format!(
            "control window ({}, {}) is empty or outside (0, 1)",
            omega.a, omega.b
        )));
    }
    let k = basis.mode_count();
    let mut g = DMatrix::from_fn(k, k, |p, q| coupling_entry(p, q, omega));
    g = linalg::sym_part(&g);
    let min_eig = linalg::min_sym_eigenvalue(&g);
    if min_eig < -1e-10 {
        return Err(Error::Numerical(format!(
            "coupling matrix lost positive semidefiniteness (min eigenvalue {min_eig:.3e})"
        )));
    }
    Ok(ControlCoupling { omega: *omega, g })
}
