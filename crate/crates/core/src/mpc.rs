//! Shifting-horizon MPC that steers toward the target sets in the list.
//!
//! The tube is non-convex, so each predicted step is confined to the
//! rectangle `[0, len] × [-w/2, w/2]` of one centerline segment (expressed in
//! that segment's frame). Those rectangles lie inside the tube, and segment
//! assignments come from a reference trajectory that is refined once.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{inscribed_polygon, Input, LinearModel, State, SystemLimits, INPUT_POLYGON_FACETS};
use crate::environment::{SegmentFrame, TubeEnvironment};
use crate::qp::{qp_solve, QpForm, QpSettings, QpStatus};
use crate::safety::SafeSetSpec;
use crate::strategy::{HyperRect, TargetSet, TargetSetList};

/// Distance kept from every linearized bound so that the solver tolerance
/// cannot push a state across the exact constraint.
pub const CONSTRAINT_MARGIN: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("reference state {0} cannot be assigned to a tube segment")]
    Projection(usize),
    #[error("malformed problem: {0}")]
    Problem(String),
}

/// Convex piece of the tube used for one predicted step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeRegion {
    pub frame: SegmentFrame,
    pub half_width: f64,
}

impl TubeRegion {
    pub fn new(env: &TubeEnvironment, segment: usize) -> Self {
        TubeRegion { frame: env.frame(segment), half_width: env.half_width() }
    }

    pub fn segment(&self) -> usize {
        self.frame.segment
    }

    /// Along-segment coordinate measured from the segment start.
    pub fn t_of(&self, p: [f64; 2]) -> f64 {
        self.frame.s_of(p) - self.frame.s0
    }

    pub fn contains(&self, p: [f64; 2], tol: f64) -> bool {
        let t = self.t_of(p);
        let h = self.frame.h_of(p);
        -tol <= t && t <= self.frame.length + tol && h.abs() <= self.half_width + tol
    }

    /// The pair of halfspaces `-w/2 ≤ n·(p - o) ≤ w/2` as `(n, lo, hi)` in
    /// world coordinates.
    pub fn halfspaces(&self) -> ([f64; 2], f64, f64) {
        let n = self.frame.normal;
        let c = n[0] * self.frame.origin[0] + n[1] * self.frame.origin[1];
        (n, c - self.half_width, c + self.half_width)
    }
}

/// Assigns a segment to every reference state: the highest-index segment
/// whose rectangle holds it, else the segment it projects onto, else the
/// previous step's segment.
pub fn linearize_tube(env: &TubeEnvironment, reference: &[State]) -> Result<Vec<TubeRegion>, MpcError> {
    let mut out: Vec<TubeRegion> = Vec::with_capacity(reference.len());
    for (j, st) in reference.iter().enumerate() {
        let p = st.position();
        let hit = (0..env.num_segments()).rev().find(|&i| TubeRegion::new(env, i).contains(p, CONSTRAINT_MARGIN));
        let seg = match hit {
            Some(i) => i,
            None => match env.project_detailed(p) {
                Ok(pr) => pr.segment,
                Err(_) => out.last().map(TubeRegion::segment).ok_or(MpcError::Projection(j))?,
            },
        };
        out.push(TubeRegion::new(env, seg));
    }
    Ok(out)
}

/// Terminal constraint: an `(s, h)` box, the safe set's bounds and its
/// speed/heading limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalSet {
    pub rect: HyperRect,
    pub safe: SafeSetSpec,
}

impl TerminalSet {
    pub fn from_target(t: &TargetSet) -> Option<TerminalSet> {
        match t {
            TargetSet::Empty => None,
            TargetSet::Rect { rect, safe, .. } => Some(TerminalSet { rect: rect.clone(), safe: *safe }),
        }
    }

    pub fn contains(&self, st: &State, env: &TubeEnvironment) -> bool {
        let Ok(f) = env.project(st.position()) else { return false };
        self.rect.contains(&[f.s, f.h]) && self.safe.contains(st, env)
    }

    /// `(t, h)` bounds in the frame of `seg` that imply exact membership of
    /// the position part, or `None` if the segment cannot host the set.
    pub fn frame_bounds(&self, env: &TubeEnvironment, seg: usize) -> Option<([f64; 2], [f64; 2])> {
        let m = CONSTRAINT_MARGIN;
        let h_lo = self.rect.lo[1].max(-self.safe.h_max) + m;
        let h_hi = self.rect.hi[1].min(self.safe.h_max) - m;
        if h_lo > h_hi {
            return None;
        }
        let h_bound = h_lo.abs().max(h_hi.abs()) + m;
        let (c_lo, c_hi) = env.segment_core(seg, h_bound)?;
        let s0 = env.breakpoints()[seg];
        let s_lo = self.rect.lo[0].max(c_lo).max(0.0) + m;
        let s_hi = self.rect.hi[0].min(c_hi).min(self.safe.s_max(env)) - m;
        (s_lo <= s_hi).then_some(([s_lo - s0, s_hi - s0], [h_lo, h_hi]))
    }

    /// Segment that hosts the terminal state: the reference's own segment
    /// when possible, otherwise the usable segment closest in arc length.
    pub fn choose_segment(&self, env: &TubeEnvironment, reference: &State) -> Option<usize> {
        let pr = env.project_detailed(reference.position()).ok();
        if let Some(pr) = pr {
            if self.frame_bounds(env, pr.segment).is_some() {
                return Some(pr.segment);
            }
        }
        let s_ref = pr.map_or(0.0, |p| p.coord.s);
        let s0 = env.breakpoints();
        (0..env.num_segments())
            .filter_map(|i| {
                let (t, _) = self.frame_bounds(env, i)?;
                let (a, b) = (s0[i] + t[0], s0[i] + t[1]);
                Some((i, (a - s_ref).max(s_ref - b).max(0.0)))
            })
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .map(|(i, _)| i)
    }
}

/// One instance of the low-level optimal control problem.
#[derive(Debug, Clone)]
pub struct MpcProblem<'a> {
    pub env: &'a TubeEnvironment,
    pub model: LinearModel,
    pub limits: SystemLimits,
    pub x0: State,
    pub horizon: usize,
    /// Tube piece for steps `1..=N` (index `j - 1`); the last entry must be
    /// the terminal segment.
    pub regions: Vec<TubeRegion>,
    /// Intermediate targets for steps `1..N` (index `j - 1`); the entry for
    /// step `N` is ignored.
    pub targets: Vec<Option<HyperRect>>,
    pub terminal: TerminalSet,
    /// Optional box on input `u_j` (index `j`).
    pub input_rects: Vec<Option<HyperRect>>,
}

/// Variable layout of the transcription.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub horizon: usize,
    /// `(step, first slack index)` for each intermediate target.
    pub slacks: Vec<(usize, usize)>,
    pub n_vars: usize,
}

impl Layout {
    pub fn state(&self, j: usize) -> usize {
        debug_assert!(j >= 1 && j <= self.horizon);
        4 * (j - 1)
    }

    pub fn input(&self, j: usize) -> usize {
        4 * self.horizon + 2 * j
    }
}

/// Sparse row `lo ≤ Σ c_i w_i ≤ hi`.
type Row = (Vec<(usize, f64)>, f64, f64);

struct RowBuilder {
    rows: Vec<Row>,
}

impl RowBuilder {
    fn push(&mut self, coefs: Vec<(usize, f64)>, lo: f64, hi: f64) {
        self.rows.push((coefs, lo, hi));
    }

    fn finish(self, n: usize) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let m = self.rows.len();
        let mut a = DMatrix::zeros(m, n);
        let mut l = DVector::zeros(m);
        let mut u = DVector::zeros(m);
        for (r, (coefs, lo, hi)) in self.rows.into_iter().enumerate() {
            for (c, v) in coefs {
                a[(r, c)] += v;
            }
            l[r] = lo;
            u[r] = hi;
        }
        (a, l, u)
    }
}

/// Builds the QP. Position `(x, y)` of step `j` sits at state offsets 0 and 2.
pub fn transcribe(p: &MpcProblem) -> Result<(QpForm, Layout), MpcError> {
    let n = p.horizon;
    if n == 0 || p.regions.len() != n {
        return Err(MpcError::Problem(format!("horizon {n} with {} regions", p.regions.len())));
    }
    let mut slacks = Vec::new();
    let mut n_vars = 6 * n;
    for j in 1..n {
        if p.targets.get(j - 1).is_some_and(Option::is_some) {
            slacks.push((j, n_vars));
            n_vars += 2;
        }
    }
    let lay = Layout { horizon: n, slacks, n_vars };
    let inf = f64::INFINITY;
    let mut rb = RowBuilder { rows: Vec::new() };

    // dynamics x_{j+1} = A x_j + B u_j
    let a = p.model.a();
    let b = p.model.b();
    let x0 = p.x0.to_vector();
    for j in 0..n {
        for r in 0..4 {
            let mut coefs = vec![(lay.state(j + 1) + r, 1.0)];
            for c in 0..2 {
                coefs.push((lay.input(j) + c, -b[(r, c)]));
            }
            let rhs = if j == 0 {
                (0..4).map(|c| a[(r, c)] * x0[c]).sum()
            } else {
                for c in 0..4 {
                    coefs.push((lay.state(j) + c, -a[(r, c)]));
                }
                0.0
            };
            rb.push(coefs, rhs, rhs);
        }
    }

    let poly = inscribed_polygon(INPUT_POLYGON_FACETS, p.limits.input_norm_max * (1.0 - 1e-6));
    for j in 0..n {
        let iu = lay.input(j);
        for (nv, bound) in &poly {
            rb.push(vec![(iu, nv[0]), (iu + 1, nv[1])], -inf, *bound);
        }
        if let Some(Some(ur)) = p.input_rects.get(j) {
            rb.push(vec![(iu, 1.0)], ur.lo[0], ur.hi[0]);
            rb.push(vec![(iu + 1, 1.0)], ur.lo[1], ur.hi[1]);
        }
    }

    let m = CONSTRAINT_MARGIN;
    for j in 1..=n {
        let ix = lay.state(j);
        rb.push(vec![(ix + 1, 1.0)], p.limits.v_min[0], p.limits.v_max[0]);
        rb.push(vec![(ix + 3, 1.0)], p.limits.v_min[1], p.limits.v_max[1]);
        let reg = &p.regions[j - 1];
        let f = &reg.frame;
        let o_t = f.tangent[0] * f.origin[0] + f.tangent[1] * f.origin[1];
        let o_n = f.normal[0] * f.origin[0] + f.normal[1] * f.origin[1];
        let tcoef = vec![(ix, f.tangent[0]), (ix + 2, f.tangent[1])];
        let ncoef = vec![(ix, f.normal[0]), (ix + 2, f.normal[1])];
        // the tube start is a round cap, so t = 0 itself (rest at the start) stays allowed
        let t_lo = if f.segment == 0 { o_t - m } else { o_t + m };
        rb.push(tcoef.clone(), t_lo, o_t + f.length - m);
        rb.push(ncoef.clone(), o_n - reg.half_width + m, o_n + reg.half_width - m);

        if let Some(&(_, is)) = lay.slacks.iter().find(|(s, _)| *s == j) {
            let r = p.targets[j - 1].as_ref().expect("slack implies target");
            // s = s0 + t·p - t·o, h = n·p - n·o
            let off = [f.s0 - o_t, -o_n];
            for (d, coef) in [tcoef.clone(), ncoef.clone()].into_iter().enumerate() {
                let e = is + d;
                rb.push(vec![(e, 1.0)], 0.0, inf);
                let mut lo_row = coef.clone();
                lo_row.push((e, 1.0));
                rb.push(lo_row, r.lo[d] - off[d], inf);
                let mut hi_row: Vec<(usize, f64)> = coef.iter().map(|&(c, v)| (c, -v)).collect();
                hi_row.push((e, 1.0));
                rb.push(hi_row, off[d] - r.hi[d], inf);
            }
        }

        if j == n {
            let (tb, hb) = p
                .terminal
                .frame_bounds(p.env, reg.segment())
                .ok_or_else(|| MpcError::Problem("terminal set does not fit its segment".into()))?;
            rb.push(tcoef, o_t + tb[0], o_t + tb[1]);
            rb.push(ncoef, o_n + hb[0], o_n + hb[1]);
            // the bound shrinks towards the next corner, so its value at the
            // far end of the window holds for the whole window
            let safe = &p.terminal.safe;
            let v_top = safe.speed_bound(p.env, f.s0 + tb[1] + m);
            let vpoly = inscribed_polygon(INPUT_POLYGON_FACETS, (v_top - m).max(0.0));
            for (nv, bound) in &vpoly {
                rb.push(vec![(ix + 1, nv[0]), (ix + 3, nv[1])], -inf, *bound);
            }
            if safe.v_lat_max.is_finite() {
                let b = (safe.v_lat_max - m).max(0.0);
                rb.push(vec![(ix + 1, f.normal[0]), (ix + 3, f.normal[1])], -b, b);
            }
            // heading cone |v·n| ≤ tan(α) v·t, exact for α < 90°
            let c = p.terminal.safe.heading_cos_min;
            let (t, nn) = (f.tangent, f.normal);
            if c > 0.0 {
                let tan_a = (1.0 - c * c).sqrt() / c;
                for sgn in [1.0, -1.0] {
                    rb.push(
                        vec![(ix + 1, sgn * nn[0] - tan_a * t[0]), (ix + 3, sgn * nn[1] - tan_a * t[1])],
                        -inf,
                        0.0,
                    );
                }
            } else {
                rb.push(vec![(ix + 1, t[0]), (ix + 3, t[1])], 0.0, inf);
            }
        }
    }

    let mut pm = DMatrix::zeros(n_vars, n_vars);
    for &(_, is) in &lay.slacks {
        pm[(is, is)] = 2.0;
        pm[(is + 1, is + 1)] = 2.0;
    }
    let (am, l, u) = rb.finish(n_vars);
    Ok((QpForm { p: pm, q: DVector::zeros(n_vars), a: am, l, u }, lay))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    /// `x_{0|k} .. x_{N|k}`, obtained by simulating `inputs` from `x0`.
    pub states: Vec<State>,
    pub inputs: Vec<Input>,
    pub objective: f64,
    pub solver_status: QpStatus,
    pub iterations: usize,
}

impl MpcSolution {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    /// The plan one step later: drops the first input and state.
    pub fn shifted(&self) -> Option<MpcSolution> {
        if self.inputs.len() < 2 {
            return None;
        }
        Some(MpcSolution {
            states: self.states[1..].to_vec(),
            inputs: self.inputs[1..].to_vec(),
            objective: self.objective,
            solver_status: self.solver_status,
            iterations: 0,
        })
    }
}

/// Simulates `inputs` from `x0` with the exact model.
pub fn rollout(model: &LinearModel, x0: &State, inputs: &[Input]) -> Option<Vec<State>> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(*x0);
    for u in inputs {
        states.push(model.step(states.last()?, u).ok()?);
    }
    Some(states)
}

/// Exact feasibility of a plan: tube, velocity and input bounds on every
/// step, terminal membership at the end.
pub fn plan_is_feasible(
    sol: &MpcSolution,
    env: &TubeEnvironment,
    limits: &SystemLimits,
    terminal: &TerminalSet,
) -> bool {
    sol.inputs.iter().all(|u| limits.input_ok(u))
        && sol.states[1..].iter().all(|x| env.contains(x) && limits.state_ok(x))
        && sol.states.last().is_some_and(|x| terminal.contains(x, env))
}

/// Transcribes, solves and re-simulates. Returns `None` unless the solver
/// reports an optimum and the simulated plan passes the exact checks.
pub fn solve_problem(p: &MpcProblem, qp: &QpSettings) -> Option<MpcSolution> {
    let (form, lay) = transcribe(p).ok()?;
    let sol = qp_solve(&form, qp);
    if sol.status != QpStatus::Optimal {
        return None;
    }
    let inputs: Vec<Input> = (0..p.horizon)
        .map(|j| Input::new(sol.x[lay.input(j)], sol.x[lay.input(j) + 1]).clipped(p.limits.input_norm_max))
        .collect();
    let states = rollout(&p.model, &p.x0, &inputs)?;
    let plan = MpcSolution {
        states,
        inputs,
        objective: sol.objective.max(0.0),
        solver_status: sol.status,
        iterations: sol.iterations,
    };
    plan_is_feasible(&plan, p.env, &p.limits, &p.terminal).then_some(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    /// Constrain inputs with the strategy input boxes when available.
    pub use_input_rects: bool,
    /// Re-solve every non-empty slot to check the horizon rule.
    pub exhaustive: bool,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig { use_input_rects: true, exhaustive: false, qp_tol: 1e-6, qp_max_iter: 80 }
    }
}

impl MpcConfig {
    fn qp(&self) -> QpSettings {
        QpSettings { tol: self.qp_tol, max_iter: self.qp_max_iter }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum HorizonOutcome {
    Mpc {
        n_k: usize,
        solution: MpcSolution,
        /// Whether the strategy input boxes were enforced.
        input_rects: bool,
        /// The previous plan, shifted, was reused.
        shifted: bool,
    },
    Safety,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub outcome: HorizonOutcome,
    /// Slots marked empty during this call.
    pub demoted: Vec<usize>,
    pub solves: usize,
    /// Test mode only: feasibility of every slot that was non-empty on entry.
    pub exhaustive: Vec<(usize, bool)>,
}

impl HorizonReport {
    pub fn n_k(&self) -> usize {
        match &self.outcome {
            HorizonOutcome::Mpc { n_k, .. } => *n_k,
            HorizonOutcome::Safety => 0,
        }
    }
}

/// Shared context of one control step.
pub struct StepContext<'a> {
    pub env: &'a TubeEnvironment,
    pub model: &'a LinearModel,
    pub limits: &'a SystemLimits,
    pub cfg: &'a MpcConfig,
}

/// Reference for steps `1..=n`: the previous plan shifted, extended with
/// zero input.
fn reference(ctx: &StepContext, x0: &State, prev: Option<&MpcSolution>, n: usize) -> Vec<State> {
    let mut refs: Vec<State> = prev.map(|p| p.states.iter().skip(2).copied().take(n).collect()).unwrap_or_default();
    if let Some(p) = prev {
        // the first shifted state is the current one; only use plans that start here
        if p.states.get(1) != Some(x0) {
            refs.clear();
        }
    }
    let mut last = refs.last().copied().unwrap_or(*x0);
    while refs.len() < n {
        last = ctx.model.step(&last, &Input::ZERO).unwrap_or(last);
        refs.push(last);
    }
    refs
}

fn build_problem<'a>(
    ctx: &StepContext<'a>,
    list: &TargetSetList,
    x0: &State,
    s: usize,
    refs: &[State],
    with_urects: bool,
) -> Option<MpcProblem<'a>> {
    let terminal = TerminalSet::from_target(list.get(s))?;
    let mut regions = linearize_tube(ctx.env, refs).ok()?;
    let seg = terminal.choose_segment(ctx.env, &refs[s - 1])?;
    regions[s - 1] = TubeRegion::new(ctx.env, seg);
    let targets = (1..=s).map(|j| if j < s { list.get(j).rect().cloned() } else { None }).collect();
    // input u_j is guided by the strategy input predicted for the slot one step later
    let input_rects = (0..s)
        .map(|j| if with_urects { list.get(j + 1).urect().cloned() } else { None })
        .collect();
    Some(MpcProblem {
        env: ctx.env,
        model: ctx.model.clone(),
        limits: *ctx.limits,
        x0: *x0,
        horizon: s,
        regions,
        targets,
        terminal,
        input_rects,
    })
}

/// Two-pass solve for terminal slot `s`. Returns the plan and whether the
/// input boxes were enforced.
fn solve_slot(
    ctx: &StepContext,
    list: &TargetSetList,
    x0: &State,
    s: usize,
    prev: Option<&MpcSolution>,
    solves: &mut usize,
) -> Option<(MpcSolution, bool)> {
    let refs = reference(ctx, x0, prev, s);
    let has_urects = ctx.cfg.use_input_rects && (1..=s).any(|j| list.get(j).urect().is_some());
    let modes: &[bool] = if has_urects { &[true, false] } else { &[false] };
    for &with_u in modes {
        let Some(p1) = build_problem(ctx, list, x0, s, &refs, with_u) else { continue };
        *solves += 1;
        let Some(first) = solve_problem(&p1, &ctx.cfg.qp()) else { continue };
        let Some(p2) = build_problem(ctx, list, x0, s, &first.states[1..], with_u) else {
            return Some((first, with_u));
        };
        if p2.regions == p1.regions {
            return Some((first, with_u));
        }
        *solves += 1;
        return Some((solve_problem(&p2, &ctx.cfg.qp()).unwrap_or(first), with_u));
    }
    None
}

/// Horizon rule: the largest non-empty slot whose problem is feasible.
/// Slots that fail are marked empty. When nothing works the previous plan,
/// shifted, is reused if it still reaches its (aged) terminal set exactly.
pub fn select_horizon_and_solve(
    list: &mut TargetSetList,
    x0: &State,
    ctx: &StepContext,
    prev: Option<&MpcSolution>,
) -> HorizonReport {
    let candidates: Vec<usize> = list.non_empty().into_iter().rev().collect();
    let mut report = HorizonReport { outcome: HorizonOutcome::Safety, demoted: Vec::new(), solves: 0, exhaustive: Vec::new() };
    if ctx.cfg.exhaustive {
        let snapshot = list.clone();
        for &s in &candidates {
            let ok = solve_slot(ctx, &snapshot, x0, s, prev, &mut 0).is_some();
            report.exhaustive.push((s, ok));
        }
    }
    let shifted = prev.and_then(MpcSolution::shifted).filter(|p| p.states.first() == Some(x0));
    for s in candidates {
        if let Some((solution, input_rects)) = solve_slot(ctx, list, x0, s, prev, &mut report.solves) {
            report.outcome = HorizonOutcome::Mpc { n_k: s, solution, input_rects, shifted: false };
            return report;
        }
        if let Some(sh) = shifted.as_ref().filter(|sh| sh.horizon() == s) {
            let term = TerminalSet::from_target(list.get(s)).expect("candidate is non-empty");
            if plan_is_feasible(sh, ctx.env, ctx.limits, &term) {
                report.outcome = HorizonOutcome::Mpc { n_k: s, solution: sh.clone(), input_rects: false, shifted: true };
                return report;
            }
        }
        list.mark_empty(s);
        report.demoted.push(s);
    }
    report
}
