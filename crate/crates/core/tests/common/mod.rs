//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

pub mod qp_oracle {
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    use hpl::qp::QpForm;

    /// Random strictly convex QP with a known feasible point. Roughly a fifth
    /// of the rows are equalities and some bounds are one-sided.
    pub fn random_feasible_qp<R: Rng>(rng: &mut R, n: usize) -> QpForm {
        let k = n + 2;
        let m_mat = DMatrix::from_fn(k, n, |_, _| rng.gen_range(-1.0..1.0));
        let p = m_mat.tr_mul(&m_mat) + DMatrix::identity(n, n) * 0.05;
        let q = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
        let rows = rng.gen_range(1..=(2 * n).max(2));
        let a = DMatrix::from_fn(rows, n, |_, _| rng.gen_range(-1.0..1.0));
        let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let ax0 = &a * &x0;
        let n_eq_max = n / 2;
        let mut n_eq = 0;
        let mut l = DVector::zeros(rows);
        let mut u = DVector::zeros(rows);
        for i in 0..rows {
            let kind = rng.gen_range(0..10);
            if kind < 2 && n_eq < n_eq_max {
                n_eq += 1;
                l[i] = ax0[i];
                u[i] = ax0[i];
            } else {
                l[i] = if kind == 2 { f64::NEG_INFINITY } else { ax0[i] - rng.gen_range(0.0..0.5) };
                u[i] = if kind == 3 { f64::INFINITY } else { ax0[i] + rng.gen_range(0.0..0.5) };
            }
        }
        QpForm { p, q, a, l, u }
    }

    /// Minimum objective over all KKT points obtained by enumerating which
    /// bound of each row is active. Exact for strictly convex problems.
    pub fn enumerate_active_sets(qp: &QpForm) -> Option<f64> {
        let n = qp.n_vars();
        let m = qp.n_rows();
        let mut best: Option<f64> = None;
        let total = 3usize.pow(m as u32);
        for code in 0..total {
            // state per row: 0 inactive, 1 lower active, 2 upper active
            let mut c = code;
            let mut active = Vec::new();
            let mut ok = true;
            for i in 0..m {
                let st = c % 3;
                c /= 3;
                let is_eq = qp.l[i] == qp.u[i];
                match st {
                    0 if is_eq => ok = false,
                    1 if !qp.l[i].is_finite() => ok = false,
                    2 if !qp.u[i].is_finite() || is_eq => ok = false,
                    0 => {}
                    _ => active.push((i, st)),
                }
            }
            if !ok {
                continue;
            }
            let k = active.len();
            let mut kkt = DMatrix::zeros(n + k, n + k);
            let mut rhs = DVector::zeros(n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&qp.p);
            for i in 0..n {
                rhs[i] = -qp.q[i];
            }
            for (r, &(row, st)) in active.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + r, j)] = qp.a[(row, j)];
                    kkt[(j, n + r)] = qp.a[(row, j)];
                }
                rhs[n + r] = if st == 1 { qp.l[row] } else { qp.u[row] };
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            if !sol.iter().all(|v| v.is_finite()) {
                continue;
            }
            let x = sol.rows(0, n).into_owned();
            // multipliers: Px + q + Aᵀy = 0 with y = sol tail
            let mut dual_ok = true;
            for (r, &(row, st)) in active.iter().enumerate() {
                let y = sol[n + r];
                let is_eq = qp.l[row] == qp.u[row];
                if !is_eq && ((st == 2 && y < -1e-9) || (st == 1 && y > 1e-9)) {
                    dual_ok = false;
                }
            }
            if !dual_ok || qp.primal_residual(&x) > 1e-9 {
                continue;
            }
            let f = qp.objective(&x);
            if best.is_none_or(|b| f < b) {
                best = Some(f);
            }
        }
        best
    }
}
