//! Tube task environments.
//!
//! A tube is a polyline centerline starting at the origin and running in the
//! positive x direction, built from segments of constant slope, swept by a disk
//! of diameter `width`. Positions are mapped to Frenet coordinates `(s, h)`:
//! arc length of the closest centerline point and signed distance to it,
//! positive to the left of the direction of travel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::State;

/// Largest admissible |slope| of a segment.
pub const SLOPE_MAX: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("point ({0:.4}, {1:.4}) is outside the projection domain of the tube")]
    OutOfDomain(f64, f64),
    #[error("arc length {s} outside [0, {total}]")]
    ArcLengthOutOfRange { s: f64, total: f64 },
    #[error("invalid tube configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeSegment {
    pub length: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrenetCoord {
    pub s: f64,
    pub h: f64,
}

/// Slopes sampled at `N + 1` arc-length offsets ahead of the current position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvForecast {
    pub theta: Vec<f64>,
}

/// The task is complete once an in-tube state reaches `s >= s_goal`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskTargetRegion {
    pub s_goal: f64,
}

/// Result of a closest-point query against the centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub coord: FrenetCoord,
    pub segment: usize,
    /// Euclidean distance to the closest centerline point (`|h|`).
    pub distance: f64,
}

/// Local Cartesian frame of one centerline segment. Coordinates expressed in
/// it are affine in position, which is what the MPC constraints use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentFrame {
    pub segment: usize,
    pub origin: [f64; 2],
    pub tangent: [f64; 2],
    pub normal: [f64; 2],
    /// Arc length at `origin`.
    pub s0: f64,
    pub length: f64,
}

impl SegmentFrame {
    /// Arc length of `p` measured along the segment's line.
    pub fn s_of(&self, p: [f64; 2]) -> f64 {
        self.s0 + dot(self.tangent, sub(p, self.origin))
    }

    /// Signed offset of `p` from the segment's line.
    pub fn h_of(&self, p: [f64; 2]) -> f64 {
        dot(self.normal, sub(p, self.origin))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TubeDocument", into = "TubeDocument")]
pub struct TubeEnvironment {
    segments: Vec<TubeSegment>,
    width: f64,
    seed: Option<u64>,
    vertices: Vec<[f64; 2]>,
    cum_s: Vec<f64>,
    tangents: Vec<[f64; 2]>,
}

/// On-disk form of a tube.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TubeDocument {
    width: f64,
    segments: Vec<TubeSegment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

impl TryFrom<TubeDocument> for TubeEnvironment {
    type Error = EnvError;

    fn try_from(doc: TubeDocument) -> Result<Self, Self::Error> {
        let mut env = TubeEnvironment::new(doc.segments, doc.width)?;
        env.seed = doc.seed;
        Ok(env)
    }
}

impl From<TubeEnvironment> for TubeDocument {
    fn from(env: TubeEnvironment) -> Self {
        TubeDocument { width: env.width, segments: env.segments, seed: env.seed }
    }
}

#[inline]
fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

impl TubeEnvironment {
    pub fn new(segments: Vec<TubeSegment>, width: f64) -> Result<Self, EnvError> {
        if segments.is_empty() {
            return Err(EnvError::Config("a tube needs at least one segment".into()));
        }
        if !(width > 0.0 && width.is_finite()) {
            return Err(EnvError::Config(format!("width must be positive, got {width}")));
        }
        for (i, seg) in segments.iter().enumerate() {
            if !(seg.length > 0.0 && seg.length.is_finite()) {
                return Err(EnvError::Config(format!("segment {i}: length must be positive")));
            }
            if !(seg.slope.abs() <= SLOPE_MAX) {
                return Err(EnvError::Config(format!(
                    "segment {i}: |slope| {} exceeds {SLOPE_MAX}",
                    seg.slope
                )));
            }
        }
        let mut vertices = Vec::with_capacity(segments.len() + 1);
        let mut cum_s = Vec::with_capacity(segments.len() + 1);
        let mut tangents = Vec::with_capacity(segments.len());
        let mut p = [0.0, 0.0];
        let mut s = 0.0;
        vertices.push(p);
        cum_s.push(s);
        for seg in &segments {
            let norm = (1.0 + seg.slope * seg.slope).sqrt();
            let t = [1.0 / norm, seg.slope / norm];
            p = [p[0] + seg.length * t[0], p[1] + seg.length * t[1]];
            s += seg.length;
            tangents.push(t);
            vertices.push(p);
            cum_s.push(s);
        }
        Ok(TubeEnvironment { segments, width, seed: None, vertices, cum_s, tangents })
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn segments(&self) -> &[TubeSegment] {
        &self.segments
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn half_width(&self) -> f64 {
        0.5 * self.width
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn total_length(&self) -> f64 {
        *self.cum_s.last().expect("non-empty")
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    /// Arc length at the start of each segment, plus the total length.
    pub fn breakpoints(&self) -> &[f64] {
        &self.cum_s
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn tangent(&self, segment: usize) -> [f64; 2] {
        self.tangents[segment]
    }

    pub fn normal(&self, segment: usize) -> [f64; 2] {
        let t = self.tangents[segment];
        [-t[1], t[0]]
    }

    pub fn frame(&self, segment: usize) -> SegmentFrame {
        SegmentFrame {
            segment,
            origin: self.vertices[segment],
            tangent: self.tangent(segment),
            normal: self.normal(segment),
            s0: self.cum_s[segment],
            length: self.segments[segment].length,
        }
    }

    /// Centerline point at arc length `s` (clamped to the tube extent).
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let s = s.clamp(0.0, self.total_length());
        let i = self.segment_at_clamped(s);
        let t = self.tangents[i];
        let d = s - self.cum_s[i];
        let v = self.vertices[i];
        [v[0] + d * t[0], v[1] + d * t[1]]
    }

    /// Position with Frenet coordinates `(s, h)` relative to the segment containing `s`.
    pub fn frenet_to_point(&self, s: f64, h: f64) -> [f64; 2] {
        let c = self.point_at(s);
        let n = self.normal(self.segment_at_clamped(s.clamp(0.0, self.total_length())));
        [c[0] + h * n[0], c[1] + h * n[1]]
    }

    fn segment_at_clamped(&self, s: f64) -> usize {
        // right-continuous: a joint belongs to the following segment
        let n = self.segments.len();
        match self.cum_s[1..n].partition_point(|&b| b <= s) {
            i if i >= n => n - 1,
            i => i,
        }
    }

    /// Index of the segment containing arc length `s`.
    pub fn segment_at(&self, s: f64) -> Result<usize, EnvError> {
        let total = self.total_length();
        if !(0.0..=total).contains(&s) {
            return Err(EnvError::ArcLengthOutOfRange { s, total });
        }
        Ok(self.segment_at_clamped(s))
    }

    /// Environment descriptor: slope of the segment containing `s`.
    pub fn descriptor(&self, s: f64) -> Result<f64, EnvError> {
        Ok(self.segments[self.segment_at(s)?].slope)
    }

    pub fn project(&self, p: [f64; 2]) -> Result<FrenetCoord, EnvError> {
        self.project_detailed(p).map(|pr| pr.coord)
    }

    /// Closest point on the whole polyline. Points farther than one full
    /// width from the centerline are outside the projection domain.
    pub fn project_detailed(&self, p: [f64; 2]) -> Result<Projection, EnvError> {
        if !(p[0].is_finite() && p[1].is_finite()) {
            return Err(EnvError::OutOfDomain(p[0], p[1]));
        }
        let mut best: Option<(f64, usize, f64)> = None;
        for (i, seg) in self.segments.iter().enumerate() {
            let t = self.tangents[i];
            let rel = sub(p, self.vertices[i]);
            let tau = dot(rel, t).clamp(0.0, seg.length);
            let q = [self.vertices[i][0] + tau * t[0], self.vertices[i][1] + tau * t[1]];
            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
            // ties go to the later segment, matching the right-continuous descriptor
            if best.is_none_or(|(bd, _, _)| d <= bd) {
                best = Some((d, i, tau));
            }
        }
        let (dist, seg, tau) = best.expect("non-empty");
        if dist > self.width {
            return Err(EnvError::OutOfDomain(p[0], p[1]));
        }
        let t = self.tangents[seg];
        let q = [self.vertices[seg][0] + tau * t[0], self.vertices[seg][1] + tau * t[1]];
        let side = cross(t, sub(p, q));
        let h = if side >= 0.0 { dist } else { -dist };
        let s = self.cum_s[seg] + tau;
        let seg = if tau >= self.segments[seg].length { self.segment_at_clamped(s) } else { seg };
        Ok(Projection { coord: FrenetCoord { s, h }, segment: seg, distance: dist })
    }

    /// Slopes at `N + 1` arc-length samples spaced `ds` ahead of the state's
    /// projection; samples past the tube end take the last slope.
    pub fn forecast(&self, state: &State, n: usize, ds: f64) -> Result<EnvForecast, EnvError> {
        let s0 = self.project(state.position())?.s;
        let total = self.total_length();
        let theta = (0..=n)
            .map(|i| self.descriptor((s0 + i as f64 * ds).clamp(0.0, total)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EnvForecast { theta })
    }

    /// Environment constraint: the position lies within half a width of the centerline.
    pub fn contains(&self, state: &State) -> bool {
        self.contains_point(state.position())
    }

    pub fn contains_point(&self, p: [f64; 2]) -> bool {
        match self.project_detailed(p) {
            Ok(pr) => pr.distance <= self.half_width(),
            Err(_) => false,
        }
    }

    pub fn target_region(&self) -> TaskTargetRegion {
        let total = self.total_length();
        let s_goal = if total - self.width > 0.0 { total - self.width } else { total };
        TaskTargetRegion { s_goal }
    }

    pub fn in_target_region(&self, state: &State) -> bool {
        let goal = self.target_region();
        match self.project_detailed(state.position()) {
            Ok(pr) => pr.distance <= self.half_width() && pr.coord.s >= goal.s_goal,
            Err(_) => false,
        }
    }

    /// Absolute turning angle at the joint between segments `i` and `i + 1`.
    pub fn turn_angle(&self, i: usize) -> f64 {
        if i + 1 >= self.segments.len() {
            return 0.0;
        }
        let a = self.tangents[i];
        let b = self.tangents[i + 1];
        cross(a, b).atan2(dot(a, b)).abs()
    }

    /// Arc-length interval of segment `seg` on which every point with
    /// `|h| <= h_bound` (measured from the segment's line) projects onto that
    /// segment, so that its segment-frame coordinates are its exact Frenet
    /// coordinates. `None` when the margins at the two joints overlap.
    pub fn segment_core(&self, seg: usize, h_bound: f64) -> Option<(f64, f64)> {
        let start_margin = if seg == 0 { 0.0 } else { h_bound * (0.5 * self.turn_angle(seg - 1)).tan() };
        let end_margin = h_bound * (0.5 * self.turn_angle(seg)).tan();
        let lo = self.cum_s[seg] + start_margin;
        let hi = self.cum_s[seg + 1] - end_margin;
        (lo < hi).then_some((lo, hi))
    }

    /// Mirror image traversed in the opposite direction.
    pub fn reversed(&self) -> TubeEnvironment {
        let segments = self
            .segments
            .iter()
            .rev()
            .map(|s| TubeSegment { length: s.length, slope: -s.slope })
            .collect();
        TubeEnvironment::new(segments, self.width)
            .expect("reversal preserves validity")
            .with_seed(self.seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tube serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        serde_json::from_str(text).map_err(|e| EnvError::Config(e.to_string()))
    }
}

/// Parameters of the random tube generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TubeGenConfig {
    pub n_segments: usize,
    pub slope_range: (f64, f64),
    pub seg_length_range: (f64, f64),
    pub width: f64,
    /// Minimum |Δslope| between consecutive segments.
    pub min_slope_change: f64,
}

impl Default for TubeGenConfig {
    fn default() -> Self {
        TubeGenConfig {
            n_segments: 4,
            slope_range: (-0.6, 0.6),
            seg_length_range: (1.2, 2.0),
            width: 1.0,
            min_slope_change: 0.15,
        }
    }
}

impl TubeGenConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let (slo, shi) = self.slope_range;
        let (llo, lhi) = self.seg_length_range;
        if self.n_segments == 0 {
            return Err(EnvError::Config("n_segments must be at least 1".into()));
        }
        if !(slo <= shi) || slo < -SLOPE_MAX || shi > SLOPE_MAX {
            return Err(EnvError::Config(format!("bad slope range ({slo}, {shi})")));
        }
        if !(llo <= lhi) || !(llo > 0.0) {
            return Err(EnvError::Config(format!("bad segment length range ({llo}, {lhi})")));
        }
        if !(self.width > 0.0) {
            return Err(EnvError::Config("width must be positive".into()));
        }
        if self.n_segments > 1 && self.min_slope_change > shi - slo {
            return Err(EnvError::Config("min_slope_change exceeds the slope range".into()));
        }
        Ok(())
    }
}

/// Deterministic random tube for `seed`.
pub fn generate_tube(seed: u64, cfg: &TubeGenConfig) -> Result<TubeEnvironment, EnvError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (slo, shi) = cfg.slope_range;
    let (llo, lhi) = cfg.seg_length_range;
    let mut segments: Vec<TubeSegment> = Vec::with_capacity(cfg.n_segments);
    for _ in 0..cfg.n_segments {
        let length = if llo < lhi { rng.gen_range(llo..=lhi) } else { llo };
        let mut slope = if slo < shi { rng.gen_range(slo..=shi) } else { slo };
        if let Some(prev) = segments.last() {
            let min_change = cfg.min_slope_change.max(1e-9);
            let mut tries = 0;
            while (slope - prev.slope).abs() < min_change {
                slope = rng.gen_range(slo..=shi);
                tries += 1;
                if tries > 10_000 {
                    return Err(EnvError::Config("could not draw distinct consecutive slopes".into()));
                }
            }
        }
        segments.push(TubeSegment { length, slope });
    }
    Ok(TubeEnvironment::new(segments, cfg.width)?.with_seed(Some(seed)))
}
