//! Strategy sets from GP posteriors, their lift into full-state target sets,
//! and the rolling target-set list.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::State;
use crate::environment::TubeEnvironment;
use crate::gp::{GpError, StrategyModels, N_OUTPUTS};
use crate::safety::SafeSetSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrategyError {
    #[error("invalid strategy config: {0}")]
    Config(String),
    #[error("rectangle bounds {lo:?} / {hi:?} are inconsistent")]
    Rect { lo: Vec<f64>, hi: Vec<f64> },
    #[error(transparent)]
    Gp(#[from] GpError),
}

/// Axis-aligned box `lo ≤ x ≤ hi`. The empty box stores `+∞` / `-∞`
/// bounds, which no valid box can have.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperRect {
    #[serde(with = "crate::serde_ext::floats")]
    pub lo: Vec<f64>,
    #[serde(with = "crate::serde_ext::floats")]
    pub hi: Vec<f64>,
}

impl HyperRect {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, StrategyError> {
        let ok = lo.len() == hi.len()
            && lo.iter().zip(&hi).all(|(l, h)| l.is_finite() && h.is_finite() && l <= h);
        if !ok {
            return Err(StrategyError::Rect { lo, hi });
        }
        Ok(HyperRect { lo, hi })
    }

    pub fn empty(dim: usize) -> Self {
        HyperRect { lo: vec![f64::INFINITY; dim], hi: vec![f64::NEG_INFINITY; dim] }
    }

    /// `[c - r, c + r]` per dimension; `r` must be non-negative.
    pub fn centered(center: &[f64], radius: &[f64]) -> Result<Self, StrategyError> {
        let lo = center.iter().zip(radius).map(|(c, r)| c - r).collect();
        let hi = center.iter().zip(radius).map(|(c, r)| c + r).collect();
        HyperRect::new(lo, hi)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.iter().zip(&self.hi).any(|(l, h)| !(l <= h))
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim() && p.iter().zip(self.lo.iter().zip(&self.hi)).all(|(x, (l, h))| l <= x && x <= h)
    }

    /// `self ⊆ other`; the empty box is a subset of everything.
    pub fn is_subset_of(&self, other: &HyperRect) -> bool {
        if self.is_empty() {
            return true;
        }
        self.dim() == other.dim()
            && self.lo.iter().zip(&other.lo).all(|(a, b)| a >= b)
            && self.hi.iter().zip(&other.hi).all(|(a, b)| a <= b)
    }

    pub fn intersect(&self, other: &HyperRect) -> HyperRect {
        if self.dim() != other.dim() {
            return HyperRect::empty(self.dim());
        }
        let lo: Vec<f64> = self.lo.iter().zip(&other.lo).map(|(a, b)| a.max(*b)).collect();
        let hi: Vec<f64> = self.hi.iter().zip(&other.hi).map(|(a, b)| a.min(*b)).collect();
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h)) {
            return HyperRect::empty(self.dim());
        }
        HyperRect { lo, hi }
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    /// Euclidean distance from `p` to the box.
    pub fn distance(&self, p: &[f64]) -> f64 {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(x, (l, h))| (l - x).max(x - h).max(0.0).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub eta: f64,
    /// Per-output thresholds on the posterior std, in `(s, h, ax, ay)` order.
    pub d_thresh: [f64; N_OUTPUTS],
    /// Strategy horizon `T`.
    pub t: usize,
    /// Forecast horizon `N`.
    pub n: usize,
    /// Add the fitted noise level to the posterior std before building sets.
    pub include_noise: bool,
}

impl StrategyConfig {
    /// Defaults with thresholds at twice the models' residual std.
    pub fn for_models(models: &StrategyModels) -> Self {
        let r = models.residual_stds();
        StrategyConfig { eta: 2.0, d_thresh: r.map(|v: f64| 2.0 * v), t: 5, n: models.n, include_noise: false }
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(StrategyError::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.d_thresh.iter().any(|d| !(*d >= 0.0)) {
            return Err(StrategyError::Config("d_thresh entries must be non-negative".into()));
        }
        if self.t == 0 || self.n == 0 {
            return Err(StrategyError::Config("T and N must be at least 1".into()));
        }
        Ok(())
    }
}

/// Posterior standard deviations `𝒞_k`, one per output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyMeasure {
    pub sigmas: [f64; N_OUTPUTS],
}

/// Strategy sets for `(s, h)` and `(ax, ay)` from per-output `(μ, σ)`.
pub fn strategy_sets_from_posterior(
    post: &[(f64, f64); N_OUTPUTS],
    eta: f64,
) -> Result<(HyperRect, HyperRect, UncertaintyMeasure), StrategyError> {
    let sig = post.map(|(_, s)| s);
    let xrect = HyperRect::centered(&[post[0].0, post[1].0], &[eta * sig[0], eta * sig[1]])?;
    let urect = HyperRect::centered(&[post[2].0, post[3].0], &[eta * sig[2], eta * sig[3]])?;
    Ok((xrect, urect, UncertaintyMeasure { sigmas: sig }))
}

pub fn build_strategy_sets(
    models: &StrategyModels,
    z: &[f64],
    cfg: &StrategyConfig,
) -> Result<(HyperRect, HyperRect, UncertaintyMeasure), StrategyError> {
    let mut post = models.posterior(z)?;
    if cfg.include_noise {
        for (p, m) in post.iter_mut().zip(&models.models) {
            p.1 = p.1.hypot(m.params().sigma_n);
        }
    }
    strategy_sets_from_posterior(&post, cfg.eta)
}

/// Accept iff every σ is at most its threshold.
pub fn gate(c: &UncertaintyMeasure, cfg: &StrategyConfig) -> bool {
    c.sigmas.iter().zip(&cfg.d_thresh).all(|(s, d)| s <= d)
}

/// A lifted strategy set, or the empty marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSet {
    Empty,
    Rect {
        /// `(s, h)` box, already clipped to the safe set's Frenet bounds.
        rect: HyperRect,
        /// Strategy input box for `(ax, ay)`.
        urect: Option<HyperRect>,
        safe: SafeSetSpec,
    },
}

impl TargetSet {
    pub fn is_empty(&self) -> bool {
        matches!(self, TargetSet::Empty)
    }

    pub fn rect(&self) -> Option<&HyperRect> {
        match self {
            TargetSet::Empty => None,
            TargetSet::Rect { rect, .. } => Some(rect),
        }
    }

    pub fn urect(&self) -> Option<&HyperRect> {
        match self {
            TargetSet::Empty => None,
            TargetSet::Rect { urect, .. } => urect.as_ref(),
        }
    }

    pub fn contains(&self, state: &State, env: &TubeEnvironment) -> bool {
        match self {
            TargetSet::Empty => false,
            TargetSet::Rect { rect, safe, .. } => {
                let Ok(f) = env.project(state.position()) else { return false };
                rect.contains(&[f.s, f.h]) && safe.contains(state, env)
            }
        }
    }
}

/// Lifts an `(s, h)` strategy set into the safe set. The box is clipped to
/// `|h| ≤ h_max` and `0 ≤ s ≤ s_max` first; an empty clip gives `Empty`.
pub fn lift(xrect: &HyperRect, env: &TubeEnvironment, safe: &SafeSetSpec) -> TargetSet {
    lift_with_input(xrect, None, env, safe)
}

pub fn lift_with_input(
    xrect: &HyperRect,
    urect: Option<HyperRect>,
    env: &TubeEnvironment,
    safe: &SafeSetSpec,
) -> TargetSet {
    if xrect.dim() != 2 || xrect.is_empty() {
        return TargetSet::Empty;
    }
    let bounds = HyperRect { lo: vec![0.0, -safe.h_max], hi: vec![safe.s_max(env), safe.h_max] };
    let rect = widen(xrect).intersect(&bounds);
    let urect = urect.map(|u| widen(&u));
    if rect.is_empty() {
        return TargetSet::Empty;
    }
    TargetSet::Rect { rect, urect, safe: *safe }
}

/// Half-width below which lifted rectangles are widened about their centre.
/// Near-zero posterior spread (outputs that were constant in training) would
/// otherwise leave a box thinner than the MPC's constraint back-off, which no
/// plan can reach.
pub const MIN_TARGET_HALF_WIDTH: f64 = 1e-3;

fn widen(r: &HyperRect) -> HyperRect {
    let mut out = r.clone();
    for (lo, hi) in out.lo.iter_mut().zip(out.hi.iter_mut()) {
        if *hi - *lo < 2.0 * MIN_TARGET_HALF_WIDTH {
            let c = 0.5 * (*lo + *hi);
            *lo = c - MIN_TARGET_HALF_WIDTH;
            *hi = c + MIN_TARGET_HALF_WIDTH;
        }
    }
    out
}

/// The last `T` target sets; slot `i` (0-based) is the set for step `k + i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSetList {
    slots: Vec<TargetSet>,
}

impl TargetSetList {
    pub fn new(t: usize) -> Self {
        TargetSetList { slots: vec![TargetSet::Empty; t] }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[TargetSet] {
        &self.slots
    }

    /// Slot for lookahead `j ∈ 1..=T`.
    pub fn get(&self, j: usize) -> &TargetSet {
        &self.slots[j - 1]
    }

    /// Drops the oldest slot and appends `newest` at lookahead `T`.
    pub fn advance(&mut self, newest: TargetSet) {
        if self.slots.is_empty() {
            return;
        }
        self.slots.remove(0);
        self.slots.push(newest);
    }

    pub fn mark_empty(&mut self, j: usize) {
        self.slots[j - 1] = TargetSet::Empty;
    }

    /// Lookaheads with a non-empty set, ascending.
    pub fn non_empty(&self) -> Vec<usize> {
        (1..=self.slots.len()).filter(|&j| !self.slots[j - 1].is_empty()).collect()
    }

    pub fn all_empty(&self) -> bool {
        self.slots.iter().all(TargetSet::is_empty)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{generate_tube, TubeGenConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rect(s: (f64, f64), h: (f64, f64)) -> HyperRect {
        HyperRect::new(vec![s.0, h.0], vec![s.1, h.1]).unwrap()
    }

    fn cfg(d: f64) -> StrategyConfig {
        StrategyConfig { eta: 2.0, d_thresh: [d; 4], t: 5, n: 10, include_noise: false }
    }

    #[test]
    fn empty_marker_is_distinct() {
        let e = HyperRect::empty(2);
        assert!(e.is_empty());
        assert!(HyperRect::new(e.lo.clone(), e.hi.clone()).is_err());
        assert!(!rect((0.0, 0.0), (0.0, 0.0)).is_empty());
        assert!(!e.contains(&[0.0, 0.0]));
    }

    #[test]
    fn rect_sizes_follow_eta() {
        let post = [(1.0, 0.1), (0.2, 0.05), (0.3, 0.2), (-0.1, 0.0)];
        let (x0, u0, c) = strategy_sets_from_posterior(&post, 0.0).unwrap();
        assert_eq!(x0.lo, x0.hi);
        assert_eq!(u0.lo, vec![0.3, -0.1]);
        assert_eq!(c.sigmas, [0.1, 0.05, 0.2, 0.0]);
        let (x1, _, _) = strategy_sets_from_posterior(&post, 1.5).unwrap();
        let (x2, _, _) = strategy_sets_from_posterior(&post, 3.0).unwrap();
        for d in 0..2 {
            let (w1, w2) = (x1.hi[d] - x1.lo[d], x2.hi[d] - x2.lo[d]);
            assert!((w2 - 2.0 * w1).abs() <= 1e-12, "{w1} {w2}");
        }
    }

    #[test]
    fn gate_is_closed() {
        let c = UncertaintyMeasure { sigmas: [0.0; 4] };
        assert!(gate(&c, &cfg(0.0)));
        let c = UncertaintyMeasure { sigmas: [0.1, 0.2, 0.1, 0.1] };
        assert!(!gate(&c, &cfg(0.15)));
        assert!(gate(&c, &cfg(0.2)));
    }

    #[test]
    fn lift_clips_to_safe_bounds() {
        let env = generate_tube(2, &TubeGenConfig::default()).unwrap();
        let safe = SafeSetSpec::for_width(1.0);
        let w = env.width();
        assert!(lift(&rect((1.0, 2.0), (w / 2.0 + 0.1, w / 2.0 + 0.2)), &env, &safe).is_empty());
        let t = lift(&rect((1.0, 2.0), (-1.0, 0.1)), &env, &safe);
        assert_eq!(t.rect().unwrap().lo, vec![1.0, -safe.h_max]);
        assert!(lift(&rect((env.total_length(), env.total_length() + 1.0), (0.0, 0.0)), &env, &safe).is_empty());
    }

    #[test]
    fn covering_rect_matches_safe_membership() {
        let env = generate_tube(4, &TubeGenConfig::default()).unwrap();
        let safe = SafeSetSpec::for_width(1.0);
        let t = lift(&rect((-1.0, 100.0), (-1.0, 1.0)), &env, &safe);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let p = env.frenet_to_point(rng.gen_range(0.0..env.total_length()), rng.gen_range(-0.5..0.5));
            let st = State::new(p[0], rng.gen_range(-1.0..1.0), p[1], rng.gen_range(-1.0..1.0));
            assert_eq!(t.contains(&st, &env), safe.contains(&st, &env));
        }
    }

    /// Membership recomputed from scratch: Frenet coordinates by brute-force
    /// search over the vertices, then each bound checked separately.
    fn brute_member(st: &State, env: &TubeEnvironment, r: &HyperRect, safe: &SafeSetSpec) -> bool {
        let v = env.vertices();
        let p = st.position();
        let mut best = (f64::INFINITY, 0.0, 0.0, 0usize);
        let mut s0 = 0.0;
        for i in 0..v.len() - 1 {
            let d = [v[i + 1][0] - v[i][0], v[i + 1][1] - v[i][1]];
            let len = d[0].hypot(d[1]);
            let t = (((p[0] - v[i][0]) * d[0] + (p[1] - v[i][1]) * d[1]) / (len * len)).clamp(0.0, 1.0);
            let q = [v[i][0] + t * d[0], v[i][1] + t * d[1]];
            let dist = (p[0] - q[0]).hypot(p[1] - q[1]);
            if dist <= best.0 {
                let cross = d[0] * (p[1] - v[i][1]) - d[1] * (p[0] - v[i][0]);
                best = (dist, s0 + t * len, dist.copysign(cross), i);
            }
            s0 += len;
        }
        let (dist, s, h, seg) = best;
        if dist > env.half_width() {
            return false;
        }
        let speed = st.vx.hypot(st.vy);
        let tan = env.tangent(seg);
        let heading_ok = speed <= safe.v_eps || (st.vx * tan[0] + st.vy * tan[1]) / speed >= safe.heading_cos_min;
        let lateral_ok = (st.vy * tan[0] - st.vx * tan[1]).abs() <= safe.v_lat_max;
        // braking room to the next interior vertex (or the end of the box)
        let s_end = env.total_length() - safe.end_margin;
        let mut corner = s_end;
        let mut acc = 0.0;
        for i in 0..v.len() - 2 {
            acc += (v[i + 1][0] - v[i][0]).hypot(v[i + 1][1] - v[i][1]);
            if acc >= s {
                corner = acc.min(s_end);
                break;
            }
        }
        let room = (corner - s).max(0.0);
        let v_top = (safe.v_max_safe.powi(2) + 2.0 * safe.approach_decel * room).sqrt().clamp(safe.v_max_safe, safe.v_max_fast.max(safe.v_max_safe));
        r.lo[0] <= s
            && s <= r.hi[0]
            && r.lo[1] <= h
            && h <= r.hi[1]
            && dist <= safe.h_max
            && s <= env.total_length() - safe.end_margin
            && speed <= v_top
            && heading_ok
            && lateral_ok
    }

    #[test]
    fn membership_matches_brute_force() {
        let env = generate_tube(6, &TubeGenConfig::default()).unwrap();
        let safe = SafeSetSpec::for_width(1.0);
        let t = lift(&rect((1.0, 3.5), (-0.2, 0.3)), &env, &safe);
        let r = t.rect().unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut hits = 0;
        for _ in 0..5000 {
            let p = env.frenet_to_point(rng.gen_range(0.5..4.0), rng.gen_range(-0.45..0.45));
            let st = State::new(p[0], rng.gen_range(-1.5..1.5), p[1], rng.gen_range(-0.7..0.7));
            let m = t.contains(&st, &env);
            assert_eq!(m, brute_member(&st, &env, &r, &safe), "{st:?}");
            hits += m as usize;
        }
        assert!(hits > 100);
    }

    #[test]
    fn members_lie_in_the_safe_set() {
        let env = generate_tube(7, &TubeGenConfig::default()).unwrap();
        let safe = SafeSetSpec::for_width(1.0);
        let t = lift(&rect((0.5, 4.0), (-0.5, 0.5)), &env, &safe);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut found = 0;
        while found < 10_000 {
            let p = env.frenet_to_point(rng.gen_range(0.0..5.0), rng.gen_range(-0.5..0.5));
            let st = State::new(p[0], rng.gen_range(-1.0..1.0), p[1], rng.gen_range(-1.0..1.0));
            if t.contains(&st, &env) {
                assert!(safe.contains(&st, &env));
                found += 1;
            }
        }
    }

    #[test]
    fn list_advances_in_order() {
        let mut l = TargetSetList::new(5);
        l.advance(TargetSet::Empty);
        assert!(l.all_empty());
        let env = generate_tube(1, &TubeGenConfig::default()).unwrap();
        let safe = SafeSetSpec::for_width(1.0);
        for i in 0..5 {
            l.advance(lift(&rect((i as f64, i as f64 + 0.5), (0.0, 0.1)), &env, &safe));
        }
        for j in 1..=5 {
            assert_eq!(l.get(j).rect().unwrap().lo[0], (j - 1) as f64);
        }
        l.mark_empty(3);
        l.advance(TargetSet::Empty);
        assert_eq!(l.non_empty(), vec![1, 3, 4]);
        assert_eq!(l.get(1).rect().unwrap().lo[0], 1.0);
        assert_eq!(l.get(3).rect().unwrap().lo[0], 3.0);
        assert!(l.get(2).is_empty());
    }

    proptest! {
        #[test]
        fn rect_is_monotone_in_eta(
            mus in prop::array::uniform4(-5.0..5.0f64),
            sig in prop::array::uniform4(0.0..2.0f64),
            e1 in 0.0..4.0f64,
            de in 0.0..4.0f64,
        ) {
            let post = [(mus[0], sig[0]), (mus[1], sig[1]), (mus[2], sig[2]), (mus[3], sig[3])];
            let (x1, u1, _) = strategy_sets_from_posterior(&post, e1).unwrap();
            let (x2, u2, _) = strategy_sets_from_posterior(&post, e1 + de).unwrap();
            prop_assert!(x1.is_subset_of(&x2));
            prop_assert!(u1.is_subset_of(&u2));
        }

        #[test]
        fn list_length_is_constant(t in 1usize..8, ops in prop::collection::vec((0u8..3, 1usize..8), 0..40)) {
            let env = generate_tube(1, &TubeGenConfig::default()).unwrap();
            let safe = SafeSetSpec::for_width(1.0);
            let mut l = TargetSetList::new(t);
            for (op, j) in ops {
                match op {
                    0 => l.advance(TargetSet::Empty),
                    1 => l.advance(lift(&rect((1.0, 2.0), (0.0, 0.1)), &env, &safe)),
                    _ => l.mark_empty(1 + (j - 1) % t),
                }
                prop_assert_eq!(l.len(), t);
            }
        }

        #[test]
        fn rect_round_trips_through_center_and_radius(
            c in prop::array::uniform2(-10.0..10.0f64),
            r in prop::array::uniform2(0.0..3.0f64),
        ) {
            let b = HyperRect::centered(&c, &r).unwrap();
            prop_assert!(b.contains(&c));
            prop_assert_eq!(b.distance(&c), 0.0);
            let back = b.center();
            for d in 0..2 {
                prop_assert!((back[d] - c[d]).abs() <= 1e-12 * (1.0 + c[d].abs()));
            }
        }
    }
}
