//! Coupled system data: diffusion `D`, coupling `A`, control matrix `B`, control window ω.

use nalgebra::{Complex, DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;

/// Default relative tolerance for numerical rank.
pub const RANK_TOL: f64 = 1e-10;

/// Default number of Neumann modes checked by [`kalman_condition_all_modes`].
pub const DEFAULT_P_MAX: usize = 200;

/// Open subinterval `(a, b)` of `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub a: f64,
    pub b: f64,
}

impl Interval {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) || a < 0.0 || b > 1.0 || a >= b {
            return Err(Error::Structure(format!(
                "control window ({a}, {b}) must satisfy 0 <= a < b <= 1"
            )));
        }
        Ok(Self { a, b })
    }

    pub fn full() -> Self {
        Self { a: 0.0, b: 1.0 }
    }

    pub fn len(&self) -> f64 {
        self.b - self.a
    }

    pub fn is_empty(&self) -> bool {
        self.b <= self.a
    }

    pub fn contains(&self, x: f64) -> bool {
        x > self.a && x < self.b
    }

    /// True when the closure of the window leaves room on at least one side.
    pub fn is_strictly_interior(&self) -> bool {
        self.a > 0.0 || self.b < 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BoundaryCondition {
    Neumann,
    Dirichlet,
}

#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub n: usize,
    pub m: usize,
    pub d: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub omega: Interval,
    pub bc: BoundaryCondition,
}

impl SystemSpec {
    pub fn new(
        d: DMatrix<f64>,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        omega: Interval,
    ) -> Result<Self> {
        let spec = Self {
            n: a.nrows(),
            m: b.ncols(),
            d,
            a,
            b,
            omega,
            bc: BoundaryCondition::Neumann,
        };
        spec.check_dimensions()?;
        Ok(spec)
    }

    /// Builds a spec from row-major slices.
    pub fn from_rows(
        n: usize,
        m: usize,
        d: &[f64],
        a: &[f64],
        b: &[f64],
        omega: (f64, f64),
    ) -> Result<Self> {
        if d.len() != n * n || a.len() != n * n || b.len() != n * m {
            return Err(Error::Structure(format!(
                "expected D and A with {} entries and B with {} entries, got {}, {}, {}",
                n * n,
                n * m,
                d.len(),
                a.len(),
                b.len()
            )));
        }
        Self::new(
            DMatrix::from_row_slice(n, n, d),
            DMatrix::from_row_slice(n, n, a),
            DMatrix::from_row_slice(n, m, b),
            Interval::new(omega.0, omega.1)?,
        )
    }

    pub fn check_dimensions(&self) -> Result<()> {
        let n = self.n;
        if n == 0 || self.m == 0 {
            return Err(Error::Structure("n and m must be at least 1".into()));
        }
        if self.d.shape() != (n, n) || self.a.shape() != (n, n) || self.b.shape() != (n, self.m) {
            return Err(Error::Structure(format!(
                "inconsistent shapes: D {:?}, A {:?}, B {:?} for n = {n}, m = {}",
                self.d.shape(),
                self.a.shape(),
                self.b.shape(),
                self.m
            )));
        }
        let finite = self
            .d
            .iter()
            .chain(self.a.iter())
            .chain(self.b.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Structure("non-finite matrix entry".into()));
        }
        Ok(())
    }

    /// `−λD + A`, the generator of the mode with eigenvalue `λ`.
    pub fn mode_matrix(&self, lambda: f64) -> DMatrix<f64> {
        &self.a - &self.d * lambda
    }

    /// Returns `Some(c)` when `D = c·I` within `tol`.
    pub fn scalar_diffusion(&self, tol: f64) -> Option<f64> {
        let c = self.d[(0, 0)];
        let scale = self.d.amax().max(1.0);
        for i in 0..self.n {
            for j in 0..self.n {
                let expect = if i == j { c } else { 0.0 };
                if (self.d[(i, j)] - expect).abs() > tol * scale {
                    return None;
                }
            }
        }
        Some(c)
    }

    pub fn with_a(&self, a: DMatrix<f64>) -> Self {
        Self { a, ..self.clone() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StructureReport {
    pub is_elliptic: bool,
    /// Smallest eigenvalue of the symmetric part of `D`.
    pub alpha: f64,
    pub is_diagonal_d: bool,
    pub is_quasipositive_a: bool,
    /// Eigenvalues of `A` as `(re, im)` pairs.
    pub a_spectrum: Vec<(f64, f64)>,
    pub eigenvalues_nonneg_real: bool,
    pub scalar_diffusion: Option<f64>,
}

impl StructureReport {
    pub fn summary(&self) -> String {
        format!(
            "elliptic={} (alpha={:.6}), diagonal D={}, quasipositive A={}, Re(spec A)>=0: {}",
            self.is_elliptic,
            self.alpha,
            self.is_diagonal_d,
            self.is_quasipositive_a,
            self.eigenvalues_nonneg_real
        )
    }
}

pub fn validate_structure(spec: &SystemSpec, tol: f64) -> Result<StructureReport> {
    spec.check_dimensions()?;
    let n = spec.n;
    let alpha = linalg::min_sym_eigenvalue(&spec.d);
    let mut is_diagonal_d = true;
    let mut is_quasipositive_a = true;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                if spec.d[(i, j)].abs() > tol {
                    is_diagonal_d = false;
                }
                if spec.a[(i, j)] < -tol {
                    is_quasipositive_a = false;
                }
            }
        }
    }
    let spectrum: Vec<Complex<f64>> = spec.a.complex_eigenvalues().iter().copied().collect();
    let eigenvalues_nonneg_real = spectrum.iter().all(|z| z.re >= -tol);
    Ok(StructureReport {
        is_elliptic: alpha > tol,
        alpha,
        is_diagonal_d,
        is_quasipositive_a,
        a_spectrum: spectrum.iter().map(|z| (z.re, z.im)).collect(),
        eigenvalues_nonneg_real,
        scalar_diffusion: spec.scalar_diffusion(tol),
    })
}

/// `[M^{n−1}B | … | MB | B]` with `M = −λD + A`.
pub fn kalman_matrix(spec: &SystemSpec, lambda: f64) -> DMatrix<f64> {
    let n = spec.n;
    let m = spec.m;
    let mm = spec.mode_matrix(lambda);
    let mut out = DMatrix::zeros(n, n * m);
    let mut block = spec.b.clone();
    for k in (0..n).rev() {
        out.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = &mm * block;
    }
    out
}

/// Dimension of `span{B, MB, …, M^{n−1}B}`, `M = −λD + A`.
///
/// Built by block Krylov steps with two-pass Gram–Schmidt. A new direction counts
/// when its residual exceeds `tol` times the norm of the vector that produced it
/// (`‖B‖` for the first block, `‖M‖` afterwards). The raw Kalman matrix has
/// columns whose scales differ by `λ^{n−1}`, which defeats a relative singular
/// value threshold at high modes; the orthogonalized basis does not.
pub fn kalman_rank(spec: &SystemSpec, lambda: f64, tol: f64) -> Result<usize> {
    spec.check_dimensions()?;
    Ok(krylov_rank(&spec.mode_matrix(lambda), &spec.b, tol))
}

fn krylov_rank(mm: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> usize {
    let n = mm.nrows();
    let mut q: Vec<DVector<f64>> = Vec::with_capacity(n);
    let b_scale = b.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let m_scale = mm.norm();
    let mut block: Vec<DVector<f64>> = b.column_iter().map(|c| c.into_owned()).collect();
    let mut scale = b_scale;
    for _ in 0..n {
        let mut added = Vec::new();
        for v in block {
            let mut w = v;
            for _ in 0..2 {
                for u in &q {
                    let c = u.dot(&w);
                    w.axpy(-c, u, 1.0);
                }
            }
            let r = w.norm();
            if r > tol * scale && r > 0.0 && q.len() < n {
                let u = w / r;
                q.push(u.clone());
                added.push(u);
            }
        }
        if added.is_empty() || q.len() == n {
            break;
        }
        block = added.iter().map(|u| mm * u).collect();
        scale = m_scale;
    }
    q.len()
}

#[derive(Debug, Clone, Serialize)]
pub struct KalmanVerdict {
    pub p_max: usize,
    pub satisfied_up_to_p_max: bool,
    pub failed_at: Option<usize>,
    /// Rank of `[A|B]`-type matrix when `D` is scalar; then the verdict covers every mode.
    pub reduced_rank: Option<usize>,
    pub all_modes_exact: Option<bool>,
}

/// Checks the per-mode rank condition at `λ_p = (pπ)²` for `p = 0..=p_max`.
pub fn kalman_condition_all_modes(
    spec: &SystemSpec,
    p_max: usize,
    tol: f64,
) -> Result<KalmanVerdict> {
    spec.check_dimensions()?;
    let failed_at = (0..=p_max).find(|&p| {
        let lambda = (p as f64 * std::f64::consts::PI).powi(2);
        krylov_rank(&spec.mode_matrix(lambda), &spec.b, tol) < spec.n
    });
    let reduced_rank = spec
        .scalar_diffusion(1e-12)
        .map(|_| krylov_rank(&spec.a, &spec.b, tol));
    Ok(KalmanVerdict {
        p_max,
        satisfied_up_to_p_max: failed_at.is_none(),
        failed_at,
        reduced_rank,
        all_modes_exact: reduced_rank.map(|r| r == spec.n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mass_transfer() -> SystemSpec {
        SystemSpec::from_rows(
            2,
            1,
            &[1.0, 0.0, 0.0, 1.0],
            &[0.0, 1.0, 0.0, -1.0],
            &[0.0, 1.0],
            (0.3, 0.8),
        )
        .unwrap()
    }

    #[test]
    fn mass_transfer_structure() {
        let r = validate_structure(&mass_transfer(), 1e-12).unwrap();
        assert!(r.is_elliptic && r.is_diagonal_d && r.is_quasipositive_a);
        assert!((r.alpha - 1.0).abs() < 1e-14);
        let mut re: Vec<f64> = r.a_spectrum.iter().map(|z| z.0).collect();
        re.sort_by(f64::total_cmp);
        assert!((re[0] + 1.0).abs() < 1e-12 && re[1].abs() < 1e-12);
        assert!(!r.eigenvalues_nonneg_real);
    }

    #[test]
    fn scalar_heat_structure() {
        let s = SystemSpec::from_rows(1, 1, &[1.0], &[0.0], &[1.0], (0.0, 1.0)).unwrap();
        let r = validate_structure(&s, 1e-12).unwrap();
        assert!(r.is_elliptic && r.is_diagonal_d && r.is_quasipositive_a);
        assert!(r.eigenvalues_nonneg_real);
    }

    #[test]
    fn negative_off_diagonal_is_not_quasipositive() {
        let s = mass_transfer().with_a(DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 0.0, 0.0]));
        assert!(!validate_structure(&s, 1e-12).unwrap().is_quasipositive_a);
    }

    #[test]
    fn shape_mismatch_is_structural_error() {
        let mut s = mass_transfer();
        s.b = DMatrix::zeros(3, 1);
        assert!(matches!(validate_structure(&s, 1e-12), Err(Error::Structure(_))));
        assert!(SystemSpec::from_rows(2, 1, &[1.0], &[0.0; 4], &[0.0; 2], (0.0, 1.0)).is_err());
        assert!(Interval::new(0.5, 0.5).is_err());
    }

    #[test]
    fn mass_transfer_kalman() {
        let s = mass_transfer();
        let k = kalman_matrix(&s, 0.0);
        assert_eq!(k.as_slice(), &[1.0, -1.0, 0.0, 1.0]);
        assert_eq!(kalman_rank(&s, 0.0, RANK_TOL).unwrap(), 2);
        let v = kalman_condition_all_modes(&s, 50, RANK_TOL).unwrap();
        assert!(v.satisfied_up_to_p_max);
        assert_eq!(v.reduced_rank, Some(2));
        assert_eq!(v.all_modes_exact, Some(true));
    }

    #[test]
    fn zero_b_has_rank_zero() {
        let mut s = mass_transfer();
        s.b = DMatrix::zeros(2, 1);
        assert_eq!(kalman_rank(&s, 3.0, RANK_TOL).unwrap(), 0);
    }

    #[test]
    fn unequal_diffusion_fails_at_mode_zero() {
        let s = SystemSpec::from_rows(
            2,
            1,
            &[1.0, 0.0, 0.0, 4.0],
            &[0.0; 4],
            &[1.0, 1.0],
            (0.0, 1.0),
        )
        .unwrap();
        let v = kalman_condition_all_modes(&s, 10, RANK_TOL).unwrap();
        assert_eq!(v.failed_at, Some(0));
        assert_eq!(v.reduced_rank, None);
        assert_eq!(kalman_rank(&s, 1.0, RANK_TOL).unwrap(), 2);
    }

    #[test]
    fn high_modes_keep_full_rank() {
        let s = SystemSpec::from_rows(2, 1, &[1.0, 0.0, 0.0, 1.0], &[0.0, 1.0, 0.0, 0.0], &[0.0, 1.0], (0.3, 0.8))
            .unwrap();
        let v = kalman_condition_all_modes(&s, 1000, RANK_TOL).unwrap();
        assert!(v.satisfied_up_to_p_max, "failed at {:?}", v.failed_at);
        let sv = linalg::singular_values(&kalman_matrix(&s, (1000.0 * std::f64::consts::PI).powi(2)));
        assert!(sv[1] / sv[0] < RANK_TOL, "raw matrix is already too ill-conditioned for a relative threshold");
    }

    #[test]
    fn scalar_system_always_satisfied() {
        let s = SystemSpec::from_rows(1, 1, &[2.0], &[0.5], &[1.0], (0.1, 0.2)).unwrap();
        let v = kalman_condition_all_modes(&s, 200, RANK_TOL).unwrap();
        assert!(v.satisfied_up_to_p_max);
    }

    fn expm_series(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        // scaling and squaring around a plain Taylor series
        let n = a.nrows();
        let norm = a.amax() * n as f64 * t;
        let s = (norm.max(1.0).log2().ceil() as i32 + 1).max(0);
        let x = a * (t / 2f64.powi(s));
        let mut term = DMatrix::identity(n, n);
        let mut sum = DMatrix::identity(n, n);
        for k in 1..30 {
            term = &term * &x / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    proptest! {
        #[test]
        fn quasipositive_exponential_is_nonnegative(
            n in 1usize..5,
            entries in proptest::collection::vec(-3.0f64..3.0, 16),
            t in 0.0f64..3.0,
        ) {
            let mut a = DMatrix::from_fn(n, n, |i, j| entries[i * 4 + j]);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        a[(i, j)] = a[(i, j)].abs();
                    }
                }
            }
            let e = linalg::expm(&(&a * t));
            let series = expm_series(&a, t);
            let scale = e.amax().max(1.0);
            prop_assert!((&e - &series).amax() <= 1e-9 * scale);
            prop_assert!(e.iter().all(|&v| v >= -1e-12 * scale));
            prop_assert!(series.iter().all(|&v| v >= -1e-12 * scale));
        }

        #[test]
        fn rank_invariant_under_column_permutation(
            n in 1usize..4,
            m in 1usize..4,
            entries in proptest::collection::vec(-3i32..=3, 9 + 9 + 9),
            lambda in 0.0f64..50.0,
            swap in 0usize..3,
        ) {
            let d = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 + entries[i * 3 + j].abs() as f64 } else { 0.0 });
            let a = DMatrix::from_fn(n, n, |i, j| entries[9 + i * 3 + j] as f64);
            let b = DMatrix::from_fn(n, m, |i, j| entries[18 + i * 3 + j] as f64);
            let s = SystemSpec::new(d, a, b.clone(), Interval::full()).unwrap();
            let mut bp = b.clone();
            bp.swap_columns(0, swap % m);
            if m > 1 {
                bp.swap_columns(m - 1, (swap + 1) % m);
            }
            let sp = SystemSpec { b: bp, ..s.clone() };
            prop_assert_eq!(kalman_rank(&s, lambda, RANK_TOL).unwrap(), kalman_rank(&sp, lambda, RANK_TOL).unwrap());
        }
    }
}
