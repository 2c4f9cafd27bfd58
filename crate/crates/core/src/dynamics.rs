//! Planar end-effector model: two decoupled double integrators.

use nalgebra::{Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid limits: {0}")]
    InvalidLimits(String),
}

/// Full state `[x, vx, y, vy]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub vx: f64,
    pub y: f64,
    pub vy: f64,
}

/// Accelerations `[ax, ay]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Input {
    pub ax: f64,
    pub ay: f64,
}

impl State {
    pub const ZERO: State = State { x: 0.0, vx: 0.0, y: 0.0, vy: 0.0 };

    pub fn new(x: f64, vx: f64, y: f64, vy: f64) -> Self {
        State { x, vx, y, vy }
    }

    pub fn at_rest(x: f64, y: f64) -> Self {
        State { x, vx: 0.0, y, vy: 0.0 }
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        State { x: v[0], vx: v[1], y: v[2], vy: v[3] }
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.x, self.vx, self.y, self.vy)
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn velocity(&self) -> [f64; 2] {
        [self.vx, self.vy]
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.vx.is_finite() && self.y.is_finite() && self.vy.is_finite()
    }
}

impl Input {
    pub const ZERO: Input = Input { ax: 0.0, ay: 0.0 };

    pub fn new(ax: f64, ay: f64) -> Self {
        Input { ax, ay }
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Input { ax: v[0], ay: v[1] }
    }

    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.ax, self.ay)
    }

    pub fn norm(&self) -> f64 {
        self.ax.hypot(self.ay)
    }

    pub fn is_finite(&self) -> bool {
        self.ax.is_finite() && self.ay.is_finite()
    }

    /// Radially scales the input back onto the ball of radius `max_norm` if it lies outside.
    pub fn clipped(&self, max_norm: f64) -> Input {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            let k = max_norm / n;
            // Rounding can leave k*n a hair above the bound.
            let out = Input { ax: self.ax * k, ay: self.ay * k };
            if out.norm() > max_norm {
                let k2 = k * (1.0 - 4.0 * f64::EPSILON);
                return Input { ax: self.ax * k2, ay: self.ay * k2 };
            }
            out
        } else {
            *self
        }
    }
}

/// Discrete linear model `x⁺ = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    a: Matrix4<f64>,
    b: Matrix4x2<f64>,
    dt: f64,
}

impl LinearModel {
    pub fn new(a: Matrix4<f64>, b: Matrix4x2<f64>, dt: f64) -> Result<Self, DynamicsError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(DynamicsError::InvalidModel(format!("dt must be positive, got {dt}")));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(DynamicsError::InvalidModel("non-finite matrix entry".into()));
        }
        Ok(LinearModel { a, b, dt })
    }

    /// Double integrators in x and y with sampling time `dt`.
    pub fn double_integrator(dt: f64) -> Result<Self, DynamicsError> {
        #[rustfmt::skip]
        let a = Matrix4::new(
            1.0, dt,  0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, dt,
            0.0, 0.0, 0.0, 1.0,
        );
        #[rustfmt::skip]
        let b = Matrix4x2::new(
            0.0, 0.0,
            dt,  0.0,
            0.0, 0.0,
            0.0, dt,
        );
        Self::new(a, b, dt)
    }

    pub fn a(&self) -> &Matrix4<f64> {
        &self.a
    }

    pub fn b(&self) -> &Matrix4x2<f64> {
        &self.b
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn step(&self, s: &State, u: &Input) -> Result<State, DynamicsError> {
        let next = self.a * s.to_vector() + self.b * u.to_vector();
        let out = State::from_vector(&next);
        if !out.is_finite() {
            return Err(DynamicsError::InvalidModel(format!(
                "non-finite successor of {s:?} under {u:?}"
            )));
        }
        Ok(out)
    }
}

impl Default for LinearModel {
    fn default() -> Self {
        LinearModel::double_integrator(0.01).expect("default dt is valid")
    }
}

/// Velocity box and input-norm bound, both closed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemLimits {
    pub v_min: [f64; 2],
    pub v_max: [f64; 2],
    pub input_norm_max: f64,
}

impl SystemLimits {
    pub fn new(v_min: [f64; 2], v_max: [f64; 2], input_norm_max: f64) -> Result<Self, DynamicsError> {
        let lim = SystemLimits { v_min, v_max, input_norm_max };
        lim.validate()?;
        Ok(lim)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        for i in 0..2 {
            if !(self.v_min[i] < self.v_max[i]) {
                return Err(DynamicsError::InvalidLimits(format!(
                    "v_min[{i}]={} must be below v_max[{i}]={}",
                    self.v_min[i], self.v_max[i]
                )));
            }
        }
        if !(self.input_norm_max > 0.0) {
            return Err(DynamicsError::InvalidLimits("input_norm_max must be positive".into()));
        }
        Ok(())
    }

    pub fn state_ok(&self, s: &State) -> bool {
        self.v_min[0] <= s.vx && s.vx <= self.v_max[0] && self.v_min[1] <= s.vy && s.vy <= self.v_max[1]
    }

    pub fn input_ok(&self, u: &Input) -> bool {
        u.norm() <= self.input_norm_max
    }
}

impl Default for SystemLimits {
    fn default() -> Self {
        SystemLimits { v_min: [-3.0, -3.0], v_max: [3.0, 3.0], input_norm_max: 1.0 }
    }
}

/// Number of facets of the polygon that replaces the input-norm ball in QPs.
pub const INPUT_POLYGON_FACETS: usize = 16;

/// Halfplanes `n·u ≤ b` of a regular polygon inscribed in the disk of
/// `radius`, with a vertex on the positive x axis.
pub fn inscribed_polygon(facets: usize, radius: f64) -> Vec<([f64; 2], f64)> {
    let half = std::f64::consts::PI / facets as f64;
    (0..facets)
        .map(|k| {
            let ang = (2 * k + 1) as f64 * half;
            ([ang.cos(), ang.sin()], radius * half.cos())
        })
        .collect()
}

pub fn check_system_limits(s: &State, u: &Input, lim: &SystemLimits) -> bool {
    lim.state_ok(s) && lim.input_ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_is_fixed_point() {
        let m = LinearModel::default();
        assert_eq!(m.step(&State::ZERO, &Input::ZERO).unwrap(), State::ZERO);
    }

    #[test]
    fn single_step_matches_structure() {
        let m = LinearModel::double_integrator(0.01).unwrap();
        let s = m.step(&State::new(0.0, 1.0, 0.0, 0.0), &Input::new(1.0, 0.0)).unwrap();
        assert!((s.x - 0.01).abs() < 1e-15);
        assert!((s.vx - 1.01).abs() < 1e-15);
        assert_eq!(s.y, 0.0);
        assert_eq!(s.vy, 0.0);
    }

    #[test]
    fn coasting_matches_closed_form() {
        let m = LinearModel::double_integrator(0.01).unwrap();
        let mut s = State::new(0.0, 1.0, 0.0, 0.0);
        for k in 1..=100 {
            s = m.step(&s, &Input::ZERO).unwrap();
            let expected = k as f64 * 0.01 * 1.0;
            assert!((s.x - expected).abs() < 1e-12, "k={k}: {} vs {expected}", s.x);
        }
        assert!((s.x - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_dt_and_overflow() {
        assert!(LinearModel::double_integrator(0.0).is_err());
        assert!(LinearModel::double_integrator(f64::NAN).is_err());
        let m = LinearModel::default();
        let s = State::new(f64::MAX, f64::MAX, 0.0, 0.0);
        assert!(m.step(&s, &Input::ZERO).is_err());
    }

    #[test]
    fn limits_are_closed_sets() {
        let lim = SystemLimits::default();
        assert!(check_system_limits(&State::ZERO, &Input::ZERO, &lim));
        assert!(check_system_limits(&State::new(0.0, 3.0, 0.0, -3.0), &Input::new(1.0, 0.0), &lim));
        assert!(!check_system_limits(&State::new(0.0, 3.0001, 0.0, 0.0), &Input::ZERO, &lim));
        // sqrt(0.64 + 0.64) = 1.1314 > 1
        assert!(!check_system_limits(&State::ZERO, &Input::new(0.8, 0.8), &lim));
        assert!(SystemLimits::new([1.0, -3.0], [1.0, 3.0], 1.0).is_err());
        assert!(SystemLimits::new([-3.0, -3.0], [3.0, 3.0], 0.0).is_err());
    }

    #[test]
    fn clipping_lands_inside_ball() {
        let u = Input::new(0.8, 0.8).clipped(1.0);
        assert!(u.norm() <= 1.0);
        assert!((u.norm() - 1.0).abs() < 1e-12);
        assert_eq!(Input::new(0.1, 0.2).clipped(1.0), Input::new(0.1, 0.2));
    }

    #[test]
    fn polygon_is_inscribed() {
        let poly = inscribed_polygon(16, 1.0);
        assert_eq!(poly.len(), 16);
        // vertices lie on the unit circle and satisfy every facet
        for k in 0..16 {
            let ang = k as f64 * std::f64::consts::PI / 8.0;
            let v = [ang.cos(), ang.sin()];
            for (n, b) in &poly {
                assert!(n[0] * v[0] + n[1] * v[1] <= b + 1e-12);
            }
        }
        // a point just outside the unit circle violates some facet
        assert!(poly.iter().any(|(n, b)| n[0] * 1.0001 > *b));
    }

    fn finite() -> impl Strategy<Value = f64> {
        -10.0..10.0f64
    }

    proptest! {
        #[test]
        fn step_is_linear(
            s1 in prop::array::uniform4(finite()), s2 in prop::array::uniform4(finite()),
            u1 in prop::array::uniform2(finite()), u2 in prop::array::uniform2(finite()),
            a in finite(), b in finite(),
        ) {
            let m = LinearModel::default();
            let st = |v: [f64; 4]| State::new(v[0], v[1], v[2], v[3]);
            let inp = |v: [f64; 2]| Input::new(v[0], v[1]);
            let lhs_s = st([0, 1, 2, 3].map(|i| a * s1[i] + b * s2[i]));
            let lhs_u = inp([0, 1].map(|i| a * u1[i] + b * u2[i]));
            let lhs = m.step(&lhs_s, &lhs_u).unwrap().to_vector();
            let rhs = a * m.step(&st(s1), &inp(u1)).unwrap().to_vector()
                + b * m.step(&st(s2), &inp(u2)).unwrap().to_vector();
            let scale = 1.0 + lhs.amax().max(rhs.amax());
            prop_assert!((lhs - rhs).amax() <= 1e-12 * scale);
        }
    }
}
