//! Safety layer: the centerline-tracking controller `π_e` and the safe set
//! it keeps invariant.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{inscribed_polygon, Input, LinearModel, State, SystemLimits, INPUT_POLYGON_FACETS};
use crate::environment::TubeEnvironment;
use crate::qp::{qp_solve, QpForm, QpSettings, QpStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SafetyError {
    #[error("invalid safe-set spec: {0}")]
    Spec(String),
    #[error("no safe spec found within {0} verification runs")]
    BudgetExhausted(usize),
}

/// Safe set `𝒳_E` as a Frenet box with a speed bound and a heading cone.
///
/// The speed bound is `v_max_safe` at corners and at the end of the box and
/// grows with the distance `d` still available for braking before them:
/// `min(v_max_fast, sqrt(v_max_safe² + 2·approach_decel·d))`.
/// `approach_decel = 0` gives the plain constant bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafeSetSpec {
    /// Bound on `|h|`.
    pub h_max: f64,
    /// Speed bound where no braking distance is left.
    pub v_max_safe: f64,
    /// Minimum cosine between velocity and centerline tangent.
    pub heading_cos_min: f64,
    /// Heading is only constrained above this speed.
    pub v_eps: f64,
    /// The box ends this far before the end of the centerline.
    pub end_margin: f64,
    /// Deceleration credited to `π_e` when approaching a corner.
    pub approach_decel: f64,
    /// Absolute speed cap.
    pub v_max_fast: f64,
    /// Bound on the velocity component normal to the centerline.
    #[serde(with = "crate::serde_ext::float")]
    pub v_lat_max: f64,
}

impl Default for SafeSetSpec {
    fn default() -> Self {
        SafeSetSpec::for_width(1.0)
    }
}

impl SafeSetSpec {
    /// Default for a tube of `width` with the default tracker, checked by
    /// sampled forward simulation on generated unit-width tubes. Corner
    /// tracking starts to fail at about 1.0 m/s, and approach speeds credited
    /// with 0.5 m/s² (the tracker's nominal braking) are too optimistic.
    pub fn for_width(width: f64) -> Self {
        SafeSetSpec {
            h_max: 0.5 * width - 0.1 * width,
            v_max_safe: 0.8,
            heading_cos_min: 0.9,
            v_eps: 0.05,
            end_margin: 0.75 * width,
            approach_decel: 0.3,
            v_max_fast: 2.5,
            v_lat_max: 0.35,
        }
    }

    /// Constant bound `v_max_safe` everywhere.
    pub fn constant_speed(h_max: f64, v_max_safe: f64, heading_cos_min: f64, v_eps: f64, end_margin: f64) -> Self {
        SafeSetSpec {
            h_max,
            v_max_safe,
            heading_cos_min,
            v_eps,
            end_margin,
            approach_decel: 0.0,
            v_max_fast: v_max_safe,
            v_lat_max: f64::INFINITY,
        }
    }

    /// Arc length of the first corner after `s`, or `s_max` if none is left.
    pub fn next_stop(&self, env: &TubeEnvironment, s: f64) -> f64 {
        let s_max = self.s_max(env);
        let bp = env.breakpoints();
        bp[1..bp.len() - 1].iter().copied().find(|&b| b >= s).map_or(s_max, |b| b.min(s_max))
    }

    /// Speed bound at arc length `s`.
    pub fn speed_bound(&self, env: &TubeEnvironment, s: f64) -> f64 {
        if self.approach_decel <= 0.0 {
            return self.v_max_safe;
        }
        let d = (self.next_stop(env, s) - s).max(0.0);
        (self.v_max_safe * self.v_max_safe + 2.0 * self.approach_decel * d).sqrt().min(self.v_max_fast).max(self.v_max_safe)
    }

    pub fn validate(&self, width: f64, limits: &SystemLimits) -> Result<(), SafetyError> {
        if !(self.h_max >= 0.0 && self.h_max <= 0.5 * width) {
            return Err(SafetyError::Spec(format!("h_max {} outside [0, {}]", self.h_max, 0.5 * width)));
        }
        let v_sys = limits.v_max[0].min(limits.v_max[1]).min(-limits.v_min[0]).min(-limits.v_min[1]);
        if !(self.v_max_safe >= 0.0 && self.v_max_safe <= v_sys) {
            return Err(SafetyError::Spec(format!("v_max_safe {} outside [0, {v_sys}]", self.v_max_safe)));
        }
        if !(-1.0..=1.0).contains(&self.heading_cos_min) {
            return Err(SafetyError::Spec("heading_cos_min outside [-1, 1]".into()));
        }
        if !(self.v_eps >= 0.0 && self.end_margin >= 0.0) {
            return Err(SafetyError::Spec("v_eps and end_margin must be non-negative".into()));
        }
        if !(self.approach_decel >= 0.0 && self.approach_decel.is_finite()) {
            return Err(SafetyError::Spec("approach_decel must be finite and non-negative".into()));
        }
        if self.approach_decel > 0.0 && !(self.v_max_fast >= self.v_max_safe && self.v_max_fast <= v_sys) {
            return Err(SafetyError::Spec(format!("v_max_fast {} outside [v_max_safe, {v_sys}]", self.v_max_fast)));
        }
        if !(self.v_lat_max >= 0.0) {
            return Err(SafetyError::Spec("v_lat_max must be non-negative".into()));
        }
        Ok(())
    }

    /// Largest arc length inside the box.
    pub fn s_max(&self, env: &TubeEnvironment) -> f64 {
        (env.total_length() - self.end_margin).max(0.0)
    }

    /// Exact membership predicate.
    pub fn contains(&self, state: &State, env: &TubeEnvironment) -> bool {
        let Ok(pr) = env.project_detailed(state.position()) else {
            return false;
        };
        if pr.distance > self.h_max || pr.coord.s > self.s_max(env) {
            return false;
        }
        let speed = state.speed();
        if speed > self.speed_bound(env, pr.coord.s) {
            return false;
        }
        let n = env.normal(pr.segment);
        if (state.vx * n[0] + state.vy * n[1]).abs() > self.v_lat_max {
            return false;
        }
        if speed > self.v_eps {
            let t = env.tangent(pr.segment);
            let cos = (state.vx * t[0] + state.vy * t[1]) / speed;
            if cos < self.heading_cos_min {
                return false;
            }
        }
        true
    }

    /// `self ⊆ other` as parameter regions.
    pub fn is_within(&self, other: &SafeSetSpec) -> bool {
        self.h_max <= other.h_max
            && self.v_max_safe <= other.v_max_safe
            && self.heading_cos_min >= other.heading_cos_min
            && self.end_margin >= other.end_margin
            && self.approach_decel <= other.approach_decel
            && self.v_max_fast.max(self.v_max_safe) <= other.v_max_fast.max(other.v_max_safe)
            && self.v_lat_max <= other.v_lat_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyControllerCfg {
    /// Cruise speed along the centerline.
    pub v_ref: f64,
    /// Prediction horizon in steps; inputs are held over two equal blocks.
    pub horizon: usize,
    /// Lateral velocity commanded per metre of offset.
    pub lateral_gain: f64,
    /// Cap on the commanded lateral speed.
    pub lateral_speed_max: f64,
    /// Deceleration used for the speed profile.
    pub brake: f64,
    pub w_vel: f64,
    pub w_input: f64,
}

impl Default for SafetyControllerCfg {
    fn default() -> Self {
        SafetyControllerCfg {
            v_ref: 0.5,
            horizon: 10,
            lateral_gain: 2.0,
            lateral_speed_max: 0.3,
            brake: 0.5,
            w_vel: 1.0,
            w_input: 1e-3,
        }
    }
}

/// The centerline tracker. Holds the pieces that do not change between calls.
#[derive(Debug, Clone)]
pub struct SafetyController {
    pub cfg: SafetyControllerCfg,
    pub model: LinearModel,
    pub limits: SystemLimits,
}

impl SafetyController {
    pub fn new(cfg: SafetyControllerCfg, model: LinearModel, limits: SystemLimits) -> Self {
        SafetyController { cfg, model, limits }
    }

    /// Arc length at which the tracker comes to rest.
    pub fn stop_s(env: &TubeEnvironment) -> f64 {
        env.total_length() - 0.5 * env.width()
    }

    /// `π_e(x, θ)`: always returns an input inside the norm bound.
    pub fn input(&self, state: &State, env: &TubeEnvironment) -> Input {
        self.solve(state, env).unwrap_or_else(|| self.braking(state))
    }

    /// Reserve law: cancel the velocity as fast as the input bound allows.
    pub fn braking(&self, state: &State) -> Input {
        let dt = self.model.dt();
        Input::new(-state.vx / dt, -state.vy / dt).clipped(self.limits.input_norm_max)
    }

    fn solve(&self, state: &State, env: &TubeEnvironment) -> Option<Input> {
        let pr = env.project_detailed(state.position()).ok()?;
        let t = env.tangent(pr.segment);
        let nrm = env.normal(pr.segment);
        let remaining = (Self::stop_s(env) - pr.coord.s).max(0.0);
        let cruise = self.cfg.v_ref.min((2.0 * self.cfg.brake * remaining).sqrt());
        let lat =
            (-self.cfg.lateral_gain * pr.coord.h).clamp(-self.cfg.lateral_speed_max, self.cfg.lateral_speed_max);
        let v0 = state.velocity();
        let v_tan = v0[0] * t[0] + v0[1] * t[1];

        let dt = self.model.dt();
        let hz = self.cfg.horizon.max(2);
        let block = hz / 2;
        // variables [ua_x, ua_y, ub_x, ub_y]; v_j = v0 + dt (na_j ua + nb_j ub)
        let mut p = DMatrix::zeros(4, 4);
        let mut q = DVector::zeros(4);
        for j in 1..=hz {
            let na = j.min(block) as f64 * dt;
            let nb = j.saturating_sub(block) as f64 * dt;
            // speed reference ramps toward the cruise speed at the braking rate
            let step = self.cfg.brake * j as f64 * dt;
            let v_t = v_tan + (cruise - v_tan).clamp(-step, step);
            let vd = [v_t * t[0] + lat * nrm[0], v_t * t[1] + lat * nrm[1]];
            for ax in 0..2 {
                let coef = [na, nb];
                let r = v0[ax] - vd[ax];
                for (bi, ci) in coef.iter().enumerate() {
                    for (bj, cj) in coef.iter().enumerate() {
                        p[(2 * bi + ax, 2 * bj + ax)] += 2.0 * self.cfg.w_vel * ci * cj;
                    }
                    q[2 * bi + ax] += 2.0 * self.cfg.w_vel * ci * r;
                }
            }
        }
        for i in 0..4 {
            p[(i, i)] += 2.0 * self.cfg.w_input;
        }

        let poly = inscribed_polygon(INPUT_POLYGON_FACETS, self.limits.input_norm_max * (1.0 - 1e-6));
        let rows = 2 * poly.len() + 8;
        let mut a = DMatrix::zeros(rows, 4);
        let mut l = DVector::from_element(rows, f64::NEG_INFINITY);
        let mut u = DVector::zeros(rows);
        let mut r = 0;
        for b in 0..2 {
            for (n, bound) in &poly {
                a[(r, 2 * b)] = n[0];
                a[(r, 2 * b + 1)] = n[1];
                u[r] = *bound;
                r += 1;
            }
        }
        // velocity box at the end of each block
        for j in [block, hz] {
            let na = j.min(block) as f64 * dt;
            let nb = j.saturating_sub(block) as f64 * dt;
            for ax in 0..2 {
                a[(r, ax)] = na;
                a[(r, 2 + ax)] = nb;
                l[r] = self.limits.v_min[ax] - v0[ax];
                u[r] = self.limits.v_max[ax] - v0[ax];
                r += 1;
            }
        }
        let sol = qp_solve(&QpForm { p, q, a, l, u }, &QpSettings::default());
        if sol.status != QpStatus::Optimal {
            return None;
        }
        let inp = Input::new(sol.x[0], sol.x[1]).clipped(self.limits.input_norm_max);
        inp.is_finite().then_some(inp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub samples: usize,
    pub steps: usize,
    /// Rollouts that left the tube or broke a system limit.
    pub violations: usize,
    /// Rollouts that left the spec's box at some step (informational).
    pub box_exits: usize,
    pub max_h_seen: f64,
    pub max_v_seen: f64,
}

/// Uniform sample from the spec's region on `env`; `None` if the drawn state
/// is not a member (possible near inner corners).
pub fn sample_safe_state<R: Rng>(spec: &SafeSetSpec, env: &TubeEnvironment, rng: &mut R) -> Option<State> {
    let s = rng.gen_range(0.0..=spec.s_max(env));
    let h = if spec.h_max > 0.0 { rng.gen_range(-spec.h_max..=spec.h_max) } else { 0.0 };
    let v_top = spec.speed_bound(env, s);
    let speed = if v_top > 0.0 { rng.gen_range(0.0..=v_top) } else { 0.0 };
    let half_cone = spec.heading_cos_min.clamp(-1.0, 1.0).acos();
    let ang = if half_cone > 0.0 { rng.gen_range(-half_cone..=half_cone) } else { 0.0 };
    let p = env.frenet_to_point(s, h);
    let seg = env.segment_at(s.min(env.total_length())).ok()?;
    let t = env.tangent(seg);
    let (c, sn) = (ang.cos(), ang.sin());
    let dir = [c * t[0] - sn * t[1], sn * t[0] + c * t[1]];
    let st = State::new(p[0], speed * dir[0], p[1], speed * dir[1]);
    spec.contains(&st, env).then_some(st)
}

/// Monte-Carlo forward reachability check: roll sampled safe states forward
/// under `π_e` and count trajectories that leave the tube or break a limit.
pub fn verify_safe_set(
    spec: &SafeSetSpec,
    envs: &[TubeEnvironment],
    ctrl: &SafetyController,
    n_samples: usize,
    n_steps: usize,
    seed: u64,
) -> VerificationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = VerificationReport {
        samples: 0,
        steps: n_steps,
        violations: 0,
        box_exits: 0,
        max_h_seen: 0.0,
        max_v_seen: 0.0,
    };
    if envs.is_empty() {
        return rep;
    }
    let mut attempts = 0;
    while rep.samples < n_samples && attempts < 100 * n_samples.max(1) {
        attempts += 1;
        let env = &envs[rep.samples % envs.len()];
        let Some(mut x) = sample_safe_state(spec, env, &mut rng) else { continue };
        rep.samples += 1;
        let mut violated = false;
        let mut left_box = false;
        for _ in 0..n_steps {
            let u = ctrl.input(&x, env);
            if !ctrl.limits.input_ok(&u) {
                violated = true;
                break;
            }
            x = match ctrl.model.step(&x, &u) {
                Ok(nx) => nx,
                Err(_) => {
                    violated = true;
                    break;
                }
            };
            match env.project_detailed(x.position()) {
                Ok(pr) => rep.max_h_seen = rep.max_h_seen.max(pr.distance),
                Err(_) => rep.max_h_seen = f64::INFINITY,
            }
            rep.max_v_seen = rep.max_v_seen.max(x.speed());
            if !env.contains(&x) || !ctrl.limits.state_ok(&x) {
                violated = true;
                break;
            }
            left_box |= !spec.contains(&x, env);
        }
        rep.violations += violated as usize;
        rep.box_exits += left_box as usize;
    }
    rep
}

/// Fraction of the remaining distance to the conservative extreme that
/// `shrink_to_safe` gives up per confirmation attempt after bisecting.
pub const SHRINK_BACKOFF: f64 = 0.2;

/// Shrinks `spec0` until verification passes, adjusting `h_max`, then
/// `v_max_safe`, then `heading_cos_min`. Each stage first checks whether the
/// parameter's most conservative value suffices and, if so, bisects between
/// that value and the current one. The bisected value is then moved towards
/// the extreme until it also passes on `seed + 1`. `approach_decel` is the
/// last stage.
pub fn shrink_to_safe(
    spec0: &SafeSetSpec,
    envs: &[TubeEnvironment],
    ctrl: &SafetyController,
    n_samples: usize,
    n_steps: usize,
    seed: u64,
    budget: usize,
) -> Result<SafeSetSpec, SafetyError> {
    let mut calls = 0;
    let run = |s: &SafeSetSpec, calls: &mut usize, seed: u64| {
        *calls += 1;
        verify_safe_set(s, envs, ctrl, n_samples, n_steps, seed).violations == 0
    };
    let passes = |s: &SafeSetSpec, calls: &mut usize| run(s, calls, seed);
    if passes(spec0, &mut calls) {
        return Ok(*spec0);
    }
    let width = envs.first().map_or(1.0, |e| e.width());
    type Getter = fn(&SafeSetSpec) -> f64;
    type Setter = fn(&mut SafeSetSpec, f64);
    let stages: [(f64, Getter, Setter); 4] = [
        (0.05 * width, |s| s.h_max, |s, v| s.h_max = v),
        (ctrl.cfg.v_ref, |s| s.v_max_safe, |s, v| s.v_max_safe = v),
        (0.99, |s| s.heading_cos_min, |s, v| s.heading_cos_min = v),
        (0.0, |s| s.approach_decel, |s, v| s.approach_decel = v),
    ];
    let mut current = *spec0;
    for (extreme, get, set) in stages {
        if calls >= budget {
            break;
        }
        let start = get(&current);
        let mut trial = current;
        set(&mut trial, extreme);
        if !passes(&trial, &mut calls) {
            current = trial;
            continue;
        }
        // bisect between the passing extreme and the failing start value
        let (mut good, mut bad) = (extreme, start);
        while calls < budget && (good - bad).abs() > 1e-3 * (1.0 + start.abs()) {
            let mid = 0.5 * (good + bad);
            let mut t = current;
            set(&mut t, mid);
            if passes(&t, &mut calls) {
                good = mid;
            } else {
                bad = mid;
            }
        }
        // the bisection stops on the boundary of what the samples can
        // detect; step back towards the extreme until a second seed agrees
        while calls < budget {
            good += SHRINK_BACKOFF * (extreme - good);
            set(&mut current, good);
            if run(&current, &mut calls, seed.wrapping_add(1)) {
                return Ok(current);
            }
        }
        break;
    }
    Err(SafetyError::BudgetExhausted(calls))
}
