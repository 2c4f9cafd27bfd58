//! Full-preview demonstrator that produces the stored executions.
//!
//! A receding-horizon planner on a coarse time grid (inputs held for
//! `substeps` model steps) maximizes progress at the end of its horizon.
//! Every coarse chord is kept inside one segment rectangle, shrunk by the
//! largest deviation of the fine trajectory from the chord, so the fine
//! trajectory stays in the tube.

use nalgebra::{DMatrix, DVector, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{inscribed_polygon, Input, LinearModel, State, SystemLimits, INPUT_POLYGON_FACETS};
use crate::environment::TubeEnvironment;
use crate::execution::{Execution, ExecutionError};
use crate::mpc::TubeRegion;
use crate::qp::{qp_solve, QpForm, QpSettings, QpStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DemoError {
    #[error("planner found no feasible plan at step {0}")]
    Infeasible(usize),
    #[error("no completion within {0} steps")]
    Timeout(usize),
    #[error("demonstration failed validation: {0}")]
    Invalid(#[from] ExecutionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    /// Model steps per coarse step.
    pub substeps: usize,
    /// Coarse steps in the planning horizon.
    pub horizon: usize,
    /// Speed bound at the end of the horizon.
    pub terminal_speed: f64,
    /// Input regularization weight.
    pub input_weight: f64,
    /// Re-linearization passes per plan.
    pub passes: usize,
    pub max_steps: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            substeps: 10,
            horizon: 20,
            terminal_speed: 1.5,
            input_weight: 1e-3,
            passes: 3,
            max_steps: 20_000,
        }
    }
}

/// Coarse model: `x⁺ = A_c x + B_c u` over `substeps` held steps, and the
/// worst deviation of the intermediate positions from the chord per unit input.
fn coarse_model(model: &LinearModel, substeps: usize) -> (Matrix4<f64>, Matrix4x2<f64>, f64) {
    let a = model.a();
    let b = model.b();
    let mut ac = Matrix4::identity();
    let mut bc = Matrix4x2::zeros();
    for _ in 0..substeps {
        bc = a * bc + b;
        ac = a * ac;
    }
    // the chord deviation is linear in u for zero initial state deviation
    let mut dev: f64 = 0.0;
    for axis in 0..2 {
        let mut u = Vector2::zeros();
        u[axis] = 1.0;
        let end = bc * u;
        let mut x = Vector4::zeros();
        for m in 1..substeps {
            x = a * x + b * u;
            let frac = m as f64 / substeps as f64;
            let (px, py) = (x[0] - frac * end[0], x[2] - frac * end[2]);
            dev = dev.max(px.hypot(py));
        }
    }
    (ac, bc, dev)
}

struct Condensed {
    /// `x_k = phi[k] x0 + Σ_m gamma[k][m] u_m`, `k = 1..=H`.
    phi: Vec<Matrix4<f64>>,
    gamma: Vec<Vec<Matrix4x2<f64>>>,
}

fn condense(ac: &Matrix4<f64>, bc: &Matrix4x2<f64>, h: usize) -> Condensed {
    let mut pow = vec![Matrix4::identity()];
    for k in 1..=h {
        pow.push(ac * pow[k - 1]);
    }
    let phi = (1..=h).map(|k| pow[k]).collect();
    let gamma = (1..=h).map(|k| (0..k).map(|m| pow[k - 1 - m] * bc).collect()).collect();
    Condensed { phi, gamma }
}

/// Planning rectangle of segment `i`. The last one extends past the tube
/// end: executions stop at the goal line, one width before the end, so the
/// planner need not brake for the end wall.
fn region(env: &TubeEnvironment, i: usize) -> TubeRegion {
    let mut r = TubeRegion::new(env, i);
    if i + 1 == env.num_segments() {
        r.frame.length += END_EXTENSION;
    }
    r
}

const END_EXTENSION: f64 = 100.0;

/// Highest-index segment whose rectangle holds `p` (shrunk by `margin`).
fn rect_segment(env: &TubeEnvironment, p: [f64; 2], margin: f64) -> Option<usize> {
    (0..env.num_segments()).rev().find(|&i| {
        let r = region(env, i);
        let t = r.t_of(p);
        let h = r.frame.h_of(p);
        t >= margin && t <= r.frame.length - margin && h.abs() <= r.half_width - margin
    })
}

struct Planner<'a> {
    env: &'a TubeEnvironment,
    limits: SystemLimits,
    cfg: DemoConfig,
    cond: Condensed,
    margin: f64,
}

impl Planner<'_> {
    /// Chord `k` (from coarse point `k-1` to `k`) is assigned the segment of
    /// its later endpoint, so progress across a joint is never blocked by
    /// the reference lagging behind.
    fn assignments(&self, x0: &State, refs: &[State]) -> Vec<usize> {
        let mut out = Vec::with_capacity(refs.len());
        let start = x0.position();
        let mut prev = rect_segment(self.env, start, 0.0)
            .or_else(|| self.env.project_detailed(start).ok().map(|p| p.segment))
            .unwrap_or(0);
        for (k, r) in refs.iter().enumerate() {
            let seg = rect_segment(self.env, r.position(), self.margin)
                .or_else(|| self.env.project_detailed(r.position()).ok().map(|p| p.segment))
                .unwrap_or(prev);
            // never skip a segment between consecutive chords
            let mut seg = seg.clamp(prev.saturating_sub(1), prev + 1);
            // the fixed start point must lie in the first chord's rectangle
            if k == 0 && !region(self.env, seg).contains(start, 0.0) {
                seg = prev;
            }
            out.push(seg);
            prev = seg;
        }
        out
    }

    fn solve(&self, x0: &State, assign: &[usize]) -> Option<Vec<Input>> {
        let h = assign.len();
        let nv = 2 * h;
        let inf = f64::INFINITY;
        let x0v = x0.to_vector();
        let mut rows: Vec<(DVector<f64>, f64, f64)> = Vec::new();
        // coefficient row of component `c` of x_k (k ≥ 1) and its constant part
        let lin = |k: usize, w: &Vector4<f64>| -> (DVector<f64>, f64) {
            let mut row = DVector::zeros(nv);
            for m in 0..k {
                let g = w.transpose() * self.cond.gamma[k - 1][m];
                row[2 * m] = g[0];
                row[2 * m + 1] = g[1];
            }
            (row, (w.transpose() * self.cond.phi[k - 1] * x0v)[0])
        };
        let poly = inscribed_polygon(INPUT_POLYGON_FACETS, self.limits.input_norm_max * (1.0 - 1e-6));
        for m in 0..h {
            for (n, b) in &poly {
                let mut row = DVector::zeros(nv);
                row[2 * m] = n[0];
                row[2 * m + 1] = n[1];
                rows.push((row, -inf, *b));
            }
        }
        let region_rows = |rows: &mut Vec<(DVector<f64>, f64, f64)>, k: usize, seg: usize| {
            let r = region(self.env, seg);
            let f = r.frame;
            let o_t = f.tangent[0] * f.origin[0] + f.tangent[1] * f.origin[1];
            let o_n = f.normal[0] * f.origin[0] + f.normal[1] * f.origin[1];
            let wt = Vector4::new(f.tangent[0], 0.0, f.tangent[1], 0.0);
            let wn = Vector4::new(f.normal[0], 0.0, f.normal[1], 0.0);
            if k == 0 {
                return;
            }
            let (row, c) = lin(k, &wt);
            rows.push((row, o_t + self.margin - c, o_t + f.length - self.margin - c));
            let (row, c) = lin(k, &wn);
            rows.push((row, o_n - r.half_width + self.margin - c, o_n + r.half_width - self.margin - c));
        };
        for k in 1..=h {
            // both endpoints of chord k lie in its rectangle
            region_rows(&mut rows, k, assign[k - 1]);
            region_rows(&mut rows, k - 1, assign[k - 1]);
            for (comp, lo, hi) in [(1, self.limits.v_min[0], self.limits.v_max[0]), (3, self.limits.v_min[1], self.limits.v_max[1])] {
                let mut w = Vector4::zeros();
                w[comp] = 1.0;
                let (row, c) = lin(k, &w);
                rows.push((row, lo - c, hi - c));
            }
        }
        let vpoly = inscribed_polygon(INPUT_POLYGON_FACETS, self.cfg.terminal_speed);
        for (n, b) in &vpoly {
            let (row, c) = lin(h, &Vector4::new(0.0, n[0], 0.0, n[1]));
            rows.push((row, -inf, b - c));
        }

        // maximize progress of the final point; near a segment end the
        // direction blends in the next segment's tangent
        let seg = assign[h - 1];
        let mut dir = self.env.tangent(seg);
        if seg + 1 < self.env.num_segments() {
            let t2 = self.env.tangent(seg + 1);
            dir = [dir[0] + t2[0], dir[1] + t2[1]];
        }
        let (grad, _) = lin(h, &Vector4::new(dir[0], 0.0, dir[1], 0.0));
        let mut p = DMatrix::zeros(nv, nv);
        for i in 0..nv {
            p[(i, i)] = 2.0 * self.cfg.input_weight;
        }
        let m = rows.len();
        let mut a = DMatrix::zeros(m, nv);
        let mut l = DVector::zeros(m);
        let mut u = DVector::zeros(m);
        for (i, (row, lo, hi)) in rows.into_iter().enumerate() {
            a.row_mut(i).copy_from(&row.transpose());
            l[i] = lo;
            u[i] = hi;
        }
        let sol = qp_solve(&QpForm { p, q: -grad, a, l, u }, &QpSettings { tol: 1e-6, max_iter: 100 });
        if sol.status != QpStatus::Optimal {
            return None;
        }
        Some((0..h).map(|m| Input::new(sol.x[2 * m], sol.x[2 * m + 1]).clipped(self.limits.input_norm_max)).collect())
    }

    fn coarse_rollout(&self, x0: &State, inputs: &[Input], model: &LinearModel) -> Vec<State> {
        let mut out = Vec::with_capacity(inputs.len());
        let mut x = *x0;
        for u in inputs {
            for _ in 0..self.cfg.substeps {
                x = model.step(&x, u).unwrap_or(x);
            }
            out.push(x);
        }
        out
    }
}

/// Runs the demonstrator on `env` from rest at the tube start.
pub fn generate_demonstration(
    env: &TubeEnvironment,
    model: &LinearModel,
    limits: &SystemLimits,
    cfg: &DemoConfig,
) -> Result<Execution, DemoError> {
    let (ac, bc, dev) = coarse_model(model, cfg.substeps);
    let planner = Planner {
        env,
        limits: *limits,
        cfg: *cfg,
        cond: condense(&ac, &bc, cfg.horizon),
        margin: dev * limits.input_norm_max + 1e-4,
    };
    let mut states = vec![State::ZERO];
    let mut inputs = Vec::new();
    let mut plan: Vec<Input> = Vec::new();
    let mut x = State::ZERO;
    while !env.in_target_region(&x) {
        if inputs.len() >= cfg.max_steps {
            return Err(DemoError::Timeout(cfg.max_steps));
        }
        // reference: previous plan shifted by one coarse step, held input at the end
        let mut guess: Vec<Input> = plan.iter().skip(1).copied().collect();
        while guess.len() < cfg.horizon {
            guess.push(guess.last().copied().unwrap_or(Input::ZERO));
        }
        let mut refs = planner.coarse_rollout(&x, &guess, model);
        let mut best: Option<Vec<Input>> = None;
        let mut last_assign = Vec::new();
        for _ in 0..cfg.passes.max(1) {
            let assign = planner.assignments(&x, &refs);
            if assign == last_assign {
                break;
            }
            match planner.solve(&x, &assign) {
                Some(sol) => {
                    refs = planner.coarse_rollout(&x, &sol, model);
                    best = Some(sol);
                }
                None => break,
            }
            last_assign = assign;
        }
        plan = match best {
            Some(p) => p,
            // keep following the previous plan; it stays feasible under an exact model
            None if plan.len() > 1 => plan[1..].to_vec(),
            None => return Err(DemoError::Infeasible(inputs.len())),
        };
        for _ in 0..cfg.substeps {
            let u = plan[0];
            x = model.step(&x, &u).map_err(|_| DemoError::Infeasible(inputs.len()))?;
            inputs.push(u);
            states.push(x);
            if env.in_target_region(&x) {
                break;
            }
        }
    }
    let ex = Execution::new(states, inputs)?;
    ex.validate(env, model, limits, true)?;
    Ok(ex)
}
