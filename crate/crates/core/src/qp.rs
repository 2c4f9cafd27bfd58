//! Dense convex quadratic programming.
//!
//! Problems are stated as `min ½ xᵀPx + qᵀx  s.t.  l ≤ Ax ≤ u` with one
//! multiplier per row of `A` (positive when the upper bound is active).
//! Rows with `l = u` are equalities and are eliminated through a null-space
//! basis; the remaining inequalities are handled by a Mehrotra
//! predictor-corrector interior-point method. Infeasibility is certified by
//! a phase-one linear program whose dual is a Farkas certificate.

use nalgebra::{Cholesky, ColPivQR, DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct QpForm {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpForm {
    pub fn n_vars(&self) -> usize {
        self.q.len()
    }

    pub fn n_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    /// Largest bound violation of `Ax`.
    pub fn primal_residual(&self, x: &DVector<f64>) -> f64 {
        let ax = &self.a * x;
        (0..ax.len()).fold(0.0, |acc, i| acc.max(ax[i] - self.u[i]).max(self.l[i] - ax[i]))
    }

    /// `‖Px + q + Aᵀy‖∞`
    pub fn dual_residual(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        (&self.p * x + &self.q + self.a.tr_mul(y)).amax()
    }

    /// Complementarity: each multiplier times the slack of the bound it acts on.
    pub fn complementarity(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let ax = &self.a * x;
        let mut worst: f64 = 0.0;
        for i in 0..ax.len() {
            if self.l[i] == self.u[i] {
                continue;
            }
            let c = if y[i] > 0.0 {
                y[i] * (self.u[i] - ax[i])
            } else {
                -y[i] * (ax[i] - self.l[i])
            };
            worst = worst.max(c.abs());
        }
        worst
    }

    fn check_shapes(&self) -> bool {
        let n = self.n_vars();
        let m = self.n_rows();
        self.p.nrows() == n
            && self.p.ncols() == n
            && (self.a.ncols() == n || m == 0)
            && self.l.len() == m
            && self.u.len() == m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    /// Contract on the reported KKT residuals of an optimal solution.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings { tol: 1e-6, max_iter: 80 }
    }
}

const INNER_TOL: f64 = 1e-10;
const EQ_TOL: f64 = 1e-12;

/// Inequality-form problem `min ½ wᵀHw + cᵀw  s.t.  Gw ≤ h`.
struct Reduced {
    h_mat: DMatrix<f64>,
    c: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
}

struct IpmResult {
    w: DVector<f64>,
    lambda: DVector<f64>,
    iterations: usize,
    converged: bool,
}

pub fn qp_solve(qp: &QpForm, settings: &QpSettings) -> QpSolution {
    let n = qp.n_vars();
    let m = qp.n_rows();
    let fail = |status: QpStatus, iterations: usize| QpSolution {
        status,
        x: DVector::zeros(n),
        y: DVector::zeros(m),
        objective: f64::NAN,
        iterations,
        primal_residual: f64::INFINITY,
        dual_residual: f64::INFINITY,
        complementarity: f64::INFINITY,
    };
    if !qp.check_shapes() {
        return fail(QpStatus::Infeasible, 0);
    }

    // split rows into equalities and one-sided inequalities
    let mut eq_rows = Vec::new();
    let mut ineq: Vec<(usize, f64)> = Vec::new(); // (row, sign): sign * a_i x <= sign * bound
    for i in 0..m {
        let (l, u) = (qp.l[i], qp.u[i]);
        if l > u + EQ_TOL * (1.0 + l.abs().max(u.abs())) || l.is_nan() || u.is_nan() {
            return fail(QpStatus::Infeasible, 0);
        }
        if l.is_finite() && (u - l).abs() <= EQ_TOL * (1.0 + l.abs()) {
            eq_rows.push(i);
            continue;
        }
        if u.is_finite() {
            ineq.push((i, 1.0));
        }
        if l.is_finite() {
            ineq.push((i, -1.0));
        }
    }

    // null-space elimination x = x_p + Z w
    let (x_p, z, eq_pinv) = if eq_rows.is_empty() {
        (DVector::zeros(n), DMatrix::identity(n, n), None)
    } else {
        let me = eq_rows.len();
        let e = DMatrix::from_fn(me, n, |r, c| qp.a[(eq_rows[r], c)]);
        let b = DVector::from_fn(me, |r, _| 0.5 * (qp.l[eq_rows[r]] + qp.u[eq_rows[r]]));
        match null_space(&e, &b) {
            Some(res) => res,
            None => return fail(QpStatus::Infeasible, 0),
        }
    };
    let nr = z.ncols();

    let mut g = DMatrix::zeros(ineq.len(), nr);
    let mut h = DVector::zeros(ineq.len());
    let mut row_scale = vec![0.0; ineq.len()];
    let a_z = &qp.a * &z;
    let a_xp = &qp.a * &x_p;
    let mut keep = Vec::with_capacity(ineq.len());
    for (k, &(i, sgn)) in ineq.iter().enumerate() {
        let bound = if sgn > 0.0 { qp.u[i] } else { -qp.l[i] };
        let rhs = bound - sgn * a_xp[i];
        let norm = a_z.row(i).norm();
        if norm < 1e-13 {
            // constant row: either always satisfied or infeasible
            if rhs < -1e-9 * (1.0 + bound.abs()) {
                return fail(QpStatus::Infeasible, 0);
            }
            continue;
        }
        let r = keep.len();
        for c in 0..nr {
            g[(r, c)] = sgn * a_z[(i, c)] / norm;
        }
        h[r] = rhs / norm;
        row_scale[r] = norm;
        keep.push(k);
    }
    let mi = keep.len();
    let g = g.rows(0, mi).into_owned();
    let h = h.rows(0, mi).into_owned();

    let red = Reduced {
        h_mat: z.tr_mul(&(&qp.p * &z)),
        c: z.tr_mul(&(&qp.p * &x_p + &qp.q)),
        g,
        h,
    };

    let res = ipm(&red, settings.max_iter, true);
    if !res.converged {
        let status = if phase_one_infeasible(&red, settings.max_iter) {
            QpStatus::Infeasible
        } else {
            QpStatus::MaxIter
        };
        return fail(status, res.iterations);
    }

    let x = &x_p + &z * &res.w;
    // recover per-row multipliers in the original scaling
    let mut y = DVector::zeros(m);
    for (r, &k) in keep.iter().enumerate() {
        let (i, sgn) = ineq[k];
        y[i] += sgn * res.lambda[r] / row_scale[r];
    }
    if let Some(e_t_pinv) = eq_pinv {
        // equality multipliers in the least-squares sense
        let stat = &qp.p * &x + &qp.q + qp.a.tr_mul(&y);
        let nu = -(e_t_pinv * stat);
        for (r, &i) in eq_rows.iter().enumerate() {
            y[i] = nu[r];
        }
    }

    let primal = qp.primal_residual(&x);
    let dual = qp.dual_residual(&x, &y);
    let comp = qp.complementarity(&x, &y);
    let scale = 1.0 + qp.q.amax().max((&qp.p * &x).amax());
    let status = if primal <= settings.tol && dual <= settings.tol * scale && comp <= settings.tol {
        QpStatus::Optimal
    } else {
        QpStatus::MaxIter
    };
    QpSolution {
        status,
        objective: qp.objective(&x),
        x,
        y,
        iterations: res.iterations,
        primal_residual: primal,
        dual_residual: dual,
        complementarity: comp,
    }
}

type NullSpace = (DVector<f64>, DMatrix<f64>, Option<DMatrix<f64>>);

/// Particular solution, null-space basis of `E`, and a pseudo-inverse of
/// `Eᵀ` for multiplier recovery. `None` when `Ex = b` is inconsistent.
fn null_space(e: &DMatrix<f64>, b: &DVector<f64>) -> Option<NullSpace> {
    let (me, n) = e.shape();
    // the Householder reflections of QR(Eᵀ) applied to I give the complete Q
    let qr = ColPivQR::new(e.transpose());
    let mut qt = DMatrix::identity(n, n);
    qr.q_tr_mul(&mut qt);
    let q = qt.transpose();
    let r = qr.r();
    let rmax = r[(0, 0)].abs();
    let rank = (0..n.min(me)).take_while(|&i| r[(i, i)].abs() > 1e-10 * rmax.max(1e-300)).count();
    if !q.iter().all(|v| v.is_finite()) {
        return None;
    }
    let q1 = q.columns(0, rank).into_owned();
    let z = q.columns(rank, n - rank).into_owned();

    // x_p = Q1 a with (E Q1) a = b in the least-squares sense
    let m_mat = e * &q1;
    let mtm = m_mat.tr_mul(&m_mat);
    let ch = Cholesky::new(mtm)?;
    let a = ch.solve(&m_mat.tr_mul(b));
    let x_p = &q1 * &a;
    let resid = (e * &x_p - b).amax();
    if resid > 1e-9 * (1.0 + b.amax()) {
        return None;
    }
    // pinv(Eᵀ) = (E Eᵀ)⁺ E restricted to the row space
    let eet = e * e.transpose();
    let pinv = match Cholesky::new(eet.clone()) {
        Some(c) => c.solve(e),
        None => eet.pseudo_inverse(1e-12).ok()? * e,
    };
    Some((x_p, z, Some(pinv)))
}

fn newton_matrix(h: &DMatrix<f64>, g: &DMatrix<f64>, wdiag: &DVector<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let n = h.nrows();
    let mut gw = g.clone();
    for (r, mut row) in gw.row_iter_mut().enumerate() {
        row *= wdiag[r];
    }
    let base = h + g.tr_mul(&gw);
    if let Some(ch) = Cholesky::new(base.clone()) {
        return Some(ch);
    }
    let scale = base.diagonal().amax().max(1.0);
    let mut delta = 1e-14 * scale;
    while delta < 1e-3 * scale {
        let mut k = base.clone();
        for i in 0..n {
            k[(i, i)] += delta;
        }
        if let Some(ch) = Cholesky::new(k) {
            return Some(ch);
        }
        delta *= 100.0;
    }
    None
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut a: f64 = 1.0;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            a = a.min(-v[i] / dv[i]);
        }
    }
    a
}

/// Mehrotra predictor-corrector on `min ½ wᵀHw + cᵀw  s.t.  Gw ≤ h`.
/// `detect_divergence` stops early once the multipliers blow up, which is
/// how infeasible problems show up for an infeasible-start method.
fn ipm(p: &Reduced, max_iter: usize, detect_divergence: bool) -> IpmResult {
    let n = p.c.len();
    let m = p.h.len();
    if m == 0 {
        // unconstrained: solve H w = -c
        let mut k = p.h_mat.clone();
        let scale = k.diagonal().amax().max(1.0);
        for i in 0..n {
            k[(i, i)] += 1e-13 * scale;
        }
        let w = Cholesky::new(k).map(|ch| ch.solve(&(-&p.c)));
        let converged = w.as_ref().is_some_and(|w| (&p.h_mat * w + &p.c).amax() <= 1e-9 * (1.0 + p.c.amax()));
        return IpmResult { w: w.unwrap_or_else(|| DVector::zeros(n)), lambda: DVector::zeros(0), iterations: 1, converged };
    }

    // initial point: least-squares fit of the constraints, then push slacks positive
    let mut w = match newton_matrix(&p.h_mat, &p.g, &DVector::from_element(m, 1.0)) {
        Some(ch) => ch.solve(&(p.g.tr_mul(&p.h) - &p.c)),
        None => DVector::zeros(n),
    };
    if !w.iter().all(|v| v.is_finite()) {
        w = DVector::zeros(n);
    }
    let mut s = &p.h - &p.g * &w;
    let s_shift = (-1.5 * s.min()).max(0.0);
    s.iter_mut().for_each(|v| *v = (*v + s_shift).max(1e-2));
    let mut lambda = DVector::from_element(m, 1.0);

    let c_norm = 1.0 + p.c.amax();
    let h_norm = 1.0 + p.h.amax();
    for it in 0..max_iter {
        let r_d = &p.h_mat * &w + &p.c + p.g.tr_mul(&lambda);
        let r_p = &p.g * &w + &s - &p.h;
        let mu = s.dot(&lambda) / m as f64;
        let (rd, rp) = (r_d.amax(), r_p.amax());
        let tight = rd <= INNER_TOL * c_norm && rp <= INNER_TOL * h_norm && mu <= INNER_TOL;
        // once complementarity has collapsed the Newton system is too ill-conditioned
        // to reduce the residuals further; accept if they are already small
        let stalled = mu <= 1e-14 && rd <= 1e-7 * c_norm && rp <= 1e-7 * h_norm;
        if tight || stalled {
            return IpmResult { w, lambda, iterations: it, converged: true };
        }
        if detect_divergence && it >= 8 && (lambda.amax() > 1e10 || w.amax() > 1e10) {
            return IpmResult { w, lambda, iterations: it, converged: false };
        }

        let wdiag = DVector::from_fn(m, |i, _| lambda[i] / s[i]);
        let Some(ch) = newton_matrix(&p.h_mat, &p.g, &wdiag) else {
            return IpmResult { w, lambda, iterations: it, converged: false };
        };
        let solve = |r_c: &DVector<f64>| {
            // Δλ = W(GΔw + r_p) - S⁻¹ r_c,  (H + GᵀWG) Δw = -r_d - Gᵀ(W r_p - S⁻¹ r_c)
            let t = DVector::from_fn(m, |i, _| wdiag[i] * r_p[i] - r_c[i] / s[i]);
            let dw = ch.solve(&(-(&r_d) - p.g.tr_mul(&t)));
            let gdw = &p.g * &dw;
            let dl = DVector::from_fn(m, |i, _| wdiag[i] * (gdw[i] + r_p[i]) - r_c[i] / s[i]);
            let ds = -(&r_p) - gdw;
            (dw, dl, ds)
        };

        let rc_aff = s.component_mul(&lambda);
        let (_, dl_a, ds_a) = solve(&rc_aff);
        let a_aff = max_step(&s, &ds_a).min(max_step(&lambda, &dl_a));
        let mu_aff = (&s + a_aff * &ds_a).dot(&(&lambda + a_aff * &dl_a)) / m as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

        let rc = DVector::from_fn(m, |i, _| s[i] * lambda[i] + ds_a[i] * dl_a[i] - sigma * mu);
        let (dw, dl, ds) = solve(&rc);
        let alpha = (0.995 * max_step(&s, &ds).min(max_step(&lambda, &dl))).min(1.0);
        w += alpha * dw;
        s += alpha * ds;
        lambda += alpha * dl;
        if !(w.iter().all(|v| v.is_finite()) && s.iter().all(|v| v.is_finite())) {
            return IpmResult { w, lambda, iterations: it, converged: false };
        }
    }
    IpmResult { w, lambda, iterations: max_iter, converged: false }
}

/// Solves `min t  s.t.  Gw - t ≤ h, t ≥ -1`; the problem is infeasible iff
/// the optimal `t` is positive. Returns `true` on a positive optimum whose
/// dual yields a valid Farkas certificate `λ ≥ 0, Gᵀλ ≈ 0, hᵀλ < 0`.
fn phase_one_infeasible(p: &Reduced, max_iter: usize) -> bool {
    let n = p.c.len();
    let m = p.h.len();
    if m == 0 {
        return false;
    }
    let mut g = DMatrix::zeros(m + 1, n + 1);
    g.view_mut((0, 0), (m, n)).copy_from(&p.g);
    for i in 0..m {
        g[(i, n)] = -1.0;
    }
    g[(m, n)] = -1.0;
    let mut h = DVector::zeros(m + 1);
    h.rows_mut(0, m).copy_from(&p.h);
    h[m] = 1.0;
    let mut c = DVector::zeros(n + 1);
    c[n] = 1.0;
    // small proximal term keeps the Newton system definite in free directions
    let h_mat = DMatrix::identity(n + 1, n + 1) * 1e-10;
    let res = ipm(&Reduced { h_mat, c, g, h }, max_iter.max(60), false);
    let t = res.w[n];
    if t <= 1e-7 {
        return false;
    }
    let lam = res.lambda.rows(0, m).into_owned();
    let l1 = lam.sum().max(1e-300);
    let gt_l = p.g.tr_mul(&lam).amax() / l1;
    let h_l = p.h.dot(&lam) / l1;
    gt_l < 1e-6 && h_l < 0.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(p: f64, q: f64, l: f64, u: f64) -> QpForm {
        QpForm {
            p: DMatrix::from_element(1, 1, p),
            q: DVector::from_element(1, q),
            a: DMatrix::from_element(1, 1, 1.0),
            l: DVector::from_element(1, l),
            u: DVector::from_element(1, u),
        }
    }

    #[test]
    fn scalar_lower_bound() {
        let s = qp_solve(&one_d(2.0, 0.0, 1.0, f64::INFINITY), &QpSettings::default());
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-8);
        // multiplier on an active lower bound is negative
        assert!((s.y[0] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn crossed_bounds_are_infeasible() {
        let s = qp_solve(&one_d(2.0, 0.0, 1.0, 0.0), &QpSettings::default());
        assert_eq!(s.status, QpStatus::Infeasible);
        // same contradiction spread over two rows
        let qp = QpForm {
            p: DMatrix::identity(1, 1),
            q: DVector::zeros(1),
            a: DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            l: DVector::from_vec(vec![1.0, f64::NEG_INFINITY]),
            u: DVector::from_vec(vec![f64::INFINITY, 0.0]),
        };
        assert_eq!(qp_solve(&qp, &QpSettings::default()).status, QpStatus::Infeasible);
    }

    #[test]
    fn equality_constrained() {
        // min x² + y² s.t. x + y = 1, x ≤ 0.2
        let qp = QpForm {
            p: DMatrix::identity(2, 2) * 2.0,
            q: DVector::zeros(2),
            a: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]),
            l: DVector::from_vec(vec![1.0, f64::NEG_INFINITY]),
            u: DVector::from_vec(vec![1.0, 0.2]),
        };
        let s = qp_solve(&qp, &QpSettings::default());
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 0.2).abs() < 1e-8 && (s.x[1] - 0.8).abs() < 1e-8);
        assert!(s.dual_residual < 1e-6 && s.complementarity < 1e-6);

        let bad = QpForm {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]),
            l: DVector::from_vec(vec![1.0, 3.0]),
            u: DVector::from_vec(vec![1.0, 3.0]),
            ..qp
        };
        assert_eq!(qp_solve(&bad, &QpSettings::default()).status, QpStatus::Infeasible);
    }

    #[test]
    fn linear_program() {
        // min -x - y on the unit box plus x + y ≤ 1.5
        let qp = QpForm {
            p: DMatrix::zeros(2, 2),
            q: DVector::from_vec(vec![-1.0, -1.0]),
            a: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
            l: DVector::from_vec(vec![0.0, 0.0, f64::NEG_INFINITY]),
            u: DVector::from_vec(vec![1.0, 1.0, 1.5]),
        };
        let s = qp_solve(&qp, &QpSettings::default());
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.objective + 1.5).abs() < 1e-7);
    }

    #[test]
    fn polytope_infeasibility() {
        // triangle x ≥ 0, y ≥ 0, x + y ≤ 1 intersected with x + y ≥ 1.2
        let qp = QpForm {
            p: DMatrix::identity(2, 2),
            q: DVector::zeros(2),
            a: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
            l: DVector::from_vec(vec![0.0, 0.0, 1.2]),
            u: DVector::from_vec(vec![f64::INFINITY, f64::INFINITY, f64::INFINITY]),
        };
        let mut tri = qp.clone();
        tri.a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        tri.l = DVector::from_vec(vec![0.0, 0.0, f64::NEG_INFINITY, 1.2]);
        tri.u = DVector::from_vec(vec![f64::INFINITY, f64::INFINITY, 1.0, f64::INFINITY]);
        assert_eq!(qp_solve(&qp, &QpSettings::default()).status, QpStatus::Optimal);
        assert_eq!(qp_solve(&tri, &QpSettings::default()).status, QpStatus::Infeasible);
    }
}
