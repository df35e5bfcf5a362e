//! Dense convex quadratic programs
//!
//! ```text
//! minimize ½ xᵀH x + cᵀx   subject to   E x = e,   G x ≥ g
//! ```
//!
//! with `H` positive definite. The main solver is the dual active-set method of
//! Goldfarb and Idnani, maintaining `J = L⁻ᵀQ` and the triangular factor `R` with
//! Givens rotations. An accelerated projected-gradient method on the dual is
//! provided as an independent cross-check.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct QpResult {
    pub status: QpStatus,
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Indices of active constraints (equalities first, then `meq + i` for row `i` of `G`).
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub max_iter: usize,
    /// Violation threshold on unit-normalized constraint rows.
    pub feas_tol: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            max_iter: 100_000,
            feas_tol: 1e-10,
        }
    }
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let r = a.hypot(b);
    if r == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / r, b / r, r)
    }
}

/// Unit-normalized constraints stored column-wise, one contiguous column each.
struct Constraints {
    cols: DMatrix<f64>,
    rhs: DVector<f64>,
    meq: usize,
}

impl Constraints {
    fn new(e: &DMatrix<f64>, ev: &DVector<f64>, g: &DMatrix<f64>, gv: &DVector<f64>) -> Self {
        let n = e.ncols().max(g.ncols());
        let meq = e.nrows();
        let total = meq + g.nrows();
        let mut cols = DMatrix::zeros(n, total);
        let mut rhs = DVector::zeros(total);
        for i in 0..total {
            let (row, b) = if i < meq {
                (e.row(i), ev[i])
            } else {
                (g.row(i - meq), gv[i - meq])
            };
            let nrm = row.norm();
            let s = if nrm > 0.0 { 1.0 / nrm } else { 1.0 };
            cols.column_mut(i).copy_from(&(row.transpose() * s));
            rhs[i] = b * s;
        }
        Self { cols, rhs, meq }
    }

    fn total(&self) -> usize {
        self.cols.ncols()
    }

    fn value(&self, i: usize, x: &DVector<f64>) -> f64 {
        self.cols.column(i).dot(x) - self.rhs[i]
    }

    /// Most violated inactive inequality, if any exceeds the tolerance.
    fn most_violated(&self, x: &DVector<f64>, active: &[bool], flip: &[f64], tol: f64) -> Option<usize> {
        const CHUNK: usize = 256;
        let total = self.total();
        let starts: Vec<usize> = (self.meq..total).step_by(CHUNK).collect();
        starts
            .par_iter()
            .filter_map(|&lo| {
                let mut best: Option<(usize, f64)> = None;
                for i in lo..(lo + CHUNK).min(total) {
                    if active[i] {
                        continue;
                    }
                    let s = flip[i] * self.value(i, x);
                    if s < -tol * (1.0 + self.rhs[i].abs()) && best.is_none_or(|(_, b)| s < b) {
                        best = Some((i, s));
                    }
                }
                best
            })
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
    }
}

/// Goldfarb–Idnani dual active-set solver.
pub fn solve_qp(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    e: &DMatrix<f64>,
    ev: &DVector<f64>,
    g: &DMatrix<f64>,
    gv: &DVector<f64>,
    opts: QpOptions,
) -> QpResult {
    let n = h.nrows();
    let cons = Constraints::new(e, ev, g, gv);
    let chol = h.clone().cholesky().expect("QP Hessian must be positive definite");
    let l = chol.l();
    // J = L^{-T}
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("triangular solve");
    let mut jm = linv.transpose();
    let mut x = -chol.solve(c);
    let mut r = DMatrix::<f64>::zeros(n, n);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut flip = vec![1.0; cons.total()];
    let mut is_active = vec![false; cons.total()];

    // Equalities are added first, in order.
    let mut next_eq = 0usize;
    loop {
        iterations += 1;
        if iterations > opts.max_iter {
            return finish(QpStatus::IterationLimit, x, h, c, iterations, active);
        }
        // choose constraint p
        let p = if next_eq < cons.meq {
            let i = next_eq;
            next_eq += 1;
            let s = cons.value(i, &x);
            flip[i] = if s > 0.0 { -1.0 } else { 1.0 };
            i
        } else {
            match cons.most_violated(&x, &is_active, &flip, opts.feas_tol) {
                Some(i) => i,
                None => return finish(QpStatus::Optimal, x, h, c, iterations, active),
            }
        };
        let np: DVector<f64> = cons.cols.column(p) * flip[p];
        let mut up = 0.0;
        loop {
            let q = active.len();
            let d = jm.transpose() * &np;
            let d2n: f64 = d.rows(q, n - q).norm_squared();
            let z = jm.columns(q, n - q) * d.rows(q, n - q);
            let rvec = if q > 0 {
                r.view((0, 0), (q, q))
                    .solve_upper_triangular(&d.rows(0, q))
                    .unwrap_or_else(|| DVector::zeros(q))
            } else {
                DVector::zeros(0)
            };
            let s = np.dot(&x) - cons.rhs[p] * flip[p];
            let full = d2n > 1e-14 * d.norm_squared().max(f64::MIN_POSITIVE);
            let t2 = if full { -s / z.dot(&np) } else { f64::INFINITY };
            // dual step limit over active inequalities
            let mut t1 = f64::INFINITY;
            let mut drop_k = None;
            for k in 0..q {
                if active[k] >= cons.meq && rvec[k] > 0.0 {
                    let ratio = u[k] / rvec[k];
                    if ratio < t1 {
                        t1 = ratio;
                        drop_k = Some(k);
                    }
                }
            }
            if !full && t1.is_infinite() {
                if p < cons.meq && s.abs() <= opts.feas_tol * (1.0 + cons.rhs[p].abs()) {
                    // dependent equality already satisfied
                    break;
                }
                return finish(QpStatus::Infeasible, x, h, c, iterations, active);
            }
            let t = t1.min(t2);
            if full {
                x += &z * t;
            }
            for k in 0..q {
                u[k] -= t * rvec[k];
            }
            up += t;
            if t2 <= t1 {
                // add p
                let mut dd = d.clone();
                for k in (q + 1..n).rev() {
                    let (cs, sn, rr) = givens(dd[k - 1], dd[k]);
                    if sn == 0.0 {
                        continue;
                    }
                    dd[k - 1] = rr;
                    dd[k] = 0.0;
                    rotate_columns(&mut jm, k - 1, cs, sn);
                }
                if dd[q] < 0.0 {
                    dd[q] = -dd[q];
                    for row in 0..n {
                        jm[(row, q)] = -jm[(row, q)];
                    }
                }
                for k in 0..=q {
                    r[(k, q)] = dd[k];
                }
                active.push(p);
                is_active[p] = true;
                u.push(up);
                break;
            }
            // drop constraint at position k
            let k = drop_k.expect("partial step without a blocking constraint");
            is_active[active.remove(k)] = false;
            u.remove(k);
            for col in k..q - 1 {
                for row in 0..=col + 1 {
                    r[(row, col)] = r[(row, col + 1)];
                }
            }
            for row in 0..n {
                r[(row, q - 1)] = 0.0;
            }
            for col in k..q - 1 {
                let (cs, sn, rr) = givens(r[(col, col)], r[(col + 1, col)]);
                r[(col, col)] = rr;
                r[(col + 1, col)] = 0.0;
                for cc in col + 1..q - 1 {
                    let a = r[(col, cc)];
                    let b = r[(col + 1, cc)];
                    r[(col, cc)] = cs * a + sn * b;
                    r[(col + 1, cc)] = -sn * a + cs * b;
                }
                rotate_columns(&mut jm, col, cs, sn);
            }
            iterations += 1;
            if iterations > opts.max_iter {
                return finish(QpStatus::IterationLimit, x, h, c, iterations, active);
            }
        }
    }
}

/// Rotates columns `k` and `k + 1` of `m` in place.
fn rotate_columns(m: &mut DMatrix<f64>, k: usize, cs: f64, sn: f64) {
    let n = m.nrows();
    let (left, right) = m.as_mut_slice()[k * n..(k + 2) * n].split_at_mut(n);
    for (a, b) in left.iter_mut().zip(right.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = cs * x + sn * y;
        *b = -sn * x + cs * y;
    }
}

fn finish(
    status: QpStatus,
    x: DVector<f64>,
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    iterations: usize,
    active: Vec<usize>,
) -> QpResult {
    let objective = 0.5 * x.dot(&(h * &x)) + c.dot(&x);
    QpResult {
        status,
        x,
        objective,
        iterations,
        active,
    }
}

/// Accelerated projected gradient on the dual, for cross-checking small problems.
///
/// Returns the primal point recovered from the final multipliers.
pub fn solve_qp_dual_pg(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    e: &DMatrix<f64>,
    ev: &DVector<f64>,
    g: &DMatrix<f64>,
    gv: &DVector<f64>,
    max_iter: usize,
    tol: f64,
) -> QpResult {
    let n = h.nrows();
    let meq = e.nrows();
    let mi = g.nrows();
    let mut a = DMatrix::zeros(meq + mi, n);
    let mut b = DVector::zeros(meq + mi);
    if meq > 0 {
        a.rows_mut(0, meq).copy_from(e);
        b.rows_mut(0, meq).copy_from(ev);
    }
    if mi > 0 {
        a.rows_mut(meq, mi).copy_from(g);
        b.rows_mut(meq, mi).copy_from(gv);
    }
    let chol = h.clone().cholesky().expect("QP Hessian must be positive definite");
    let hinv_at = chol.solve(&a.transpose());
    let hinv_c = chol.solve(c);
    // dual objective: maximize -½ yᵀ A H⁻¹ Aᵀ y + yᵀ(b + A H⁻¹ c)
    let q = &a * &hinv_at;
    let lin = &b + &a * &hinv_c;
    let lip = linalg_max_eig(&q).max(1e-300);
    let step = 1.0 / lip;
    let project = |y: &mut DVector<f64>| {
        for i in meq..meq + mi {
            if y[i] < 0.0 {
                y[i] = 0.0;
            }
        }
    };
    let mut y = DVector::zeros(meq + mi);
    let mut yp = y.clone();
    let mut tk = 1.0f64;
    let mut iterations = 0;
    let mut status = QpStatus::IterationLimit;
    for it in 0..max_iter {
        iterations = it + 1;
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        let mom = &y + (&y - &yp) * ((tk - 1.0) / tn);
        let grad = &lin - &q * &mom;
        let mut yn = &mom + grad * step;
        project(&mut yn);
        yp = std::mem::replace(&mut y, yn);
        tk = tn;
        if it % 50 == 0 {
            let x = &hinv_at * &y - &hinv_c;
            let eq_res = if meq > 0 { (e * &x - ev).amax() } else { 0.0 };
            let in_res = if mi > 0 {
                (g * &x - gv).iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max)
            } else {
                0.0
            };
            let comp = if mi > 0 {
                (0..mi)
                    .map(|i| (y[meq + i] * (g.row(i).dot(&x.transpose()) - gv[i])).abs())
                    .fold(0.0, f64::max)
            } else {
                0.0
            };
            if eq_res.max(in_res).max(comp) < tol {
                status = QpStatus::Optimal;
                break;
            }
        }
    }
    let x = &hinv_at * &y - &hinv_c;
    finish(status, x, h, c, iterations, Vec::new())
}

fn linalg_max_eig(q: &DMatrix<f64>) -> f64 {
    if q.nrows() == 0 {
        return 0.0;
    }
    crate::linalg::max_sym_eigenvalue(q)
}
