//! Stored state/input trajectories and their feasibility check.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{Input, LinearModel, State, SystemLimits};
use crate::environment::TubeEnvironment;

/// Dynamics residual tolerated between consecutive stored states.
pub const DYNAMICS_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecutionError {
    #[error("expected {expected} states for {inputs} inputs, got {got}")]
    Length { expected: usize, inputs: usize, got: usize },
    #[error("state {0} leaves the tube")]
    OutsideTube(usize),
    #[error("state {0} violates the velocity limits")]
    Velocity(usize),
    #[error("input {0} violates the input bound")]
    InputBound(usize),
    #[error("transition {step} deviates from the model by {defect:e}")]
    Dynamics { step: usize, defect: f64 },
    #[error("final state does not reach the task target region")]
    Incomplete,
}

/// A trajectory `x_0 .. x_D` driven by `u_0 .. u_{D-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub states: Vec<State>,
    pub inputs: Vec<Input>,
}

impl Execution {
    pub fn new(states: Vec<State>, inputs: Vec<Input>) -> Result<Self, ExecutionError> {
        if states.len() != inputs.len() + 1 {
            return Err(ExecutionError::Length {
                expected: inputs.len() + 1,
                inputs: inputs.len(),
                got: states.len(),
            });
        }
        Ok(Execution { states, inputs })
    }

    /// Number of applied inputs `D`.
    pub fn duration(&self) -> usize {
        self.inputs.len()
    }

    /// Checks every constraint along the trajectory; `require_complete` also
    /// demands that the final state lies in the task target region.
    pub fn validate(
        &self,
        env: &TubeEnvironment,
        model: &LinearModel,
        limits: &SystemLimits,
        require_complete: bool,
    ) -> Result<(), ExecutionError> {
        if self.states.len() != self.inputs.len() + 1 {
            return Err(ExecutionError::Length {
                expected: self.inputs.len() + 1,
                inputs: self.inputs.len(),
                got: self.states.len(),
            });
        }
        for (k, st) in self.states.iter().enumerate() {
            if !env.contains(st) {
                return Err(ExecutionError::OutsideTube(k));
            }
            if !limits.state_ok(st) {
                return Err(ExecutionError::Velocity(k));
            }
        }
        for (k, u) in self.inputs.iter().enumerate() {
            if !limits.input_ok(u) {
                return Err(ExecutionError::InputBound(k));
            }
            let next = model
                .step(&self.states[k], u)
                .map_err(|_| ExecutionError::Dynamics { step: k, defect: f64::INFINITY })?;
            let defect = (next.to_vector() - self.states[k + 1].to_vector()).amax();
            if defect > DYNAMICS_TOL {
                return Err(ExecutionError::Dynamics { step: k, defect });
            }
        }
        if require_complete && !env.in_target_region(self.states.last().expect("non-empty")) {
            return Err(ExecutionError::Incomplete);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::TubeSegment;

    fn tube() -> TubeEnvironment {
        TubeEnvironment::new(vec![TubeSegment { length: 1.5, slope: 0.0 }], 1.0).unwrap()
    }

    fn rollout(n: usize, u: Input) -> Execution {
        let m = LinearModel::default();
        let mut states = vec![State::ZERO];
        for _ in 0..n {
            let next = m.step(states.last().unwrap(), &u).unwrap();
            states.push(next);
        }
        Execution::new(states, vec![u; n]).unwrap()
    }

    #[test]
    fn accepts_a_feasible_rollout() {
        // accelerating at 1 m/s^2 for 1.2 s covers 0.72 m; the goal region starts at 0.5
        let ex = rollout(120, Input::new(1.0, 0.0));
        let r = ex.validate(&tube(), &LinearModel::default(), &SystemLimits::default(), true);
        assert_eq!(r, Ok(()));
        assert_eq!(ex.duration(), 120);
    }

    #[test]
    fn flags_each_violation() {
        let m = LinearModel::default();
        let lim = SystemLimits::default();
        let short = rollout(10, Input::new(1.0, 0.0));
        assert_eq!(short.validate(&tube(), &m, &lim, true), Err(ExecutionError::Incomplete));

        let mut bad = rollout(10, Input::new(1.0, 0.0));
        bad.states[5].x += 1e-6;
        assert!(matches!(bad.validate(&tube(), &m, &lim, false), Err(ExecutionError::Dynamics { step: 4, .. })));

        let big = rollout(10, Input::new(1.0, 0.1));
        assert_eq!(big.validate(&tube(), &m, &lim, false), Err(ExecutionError::InputBound(0)));

        // 0.6 m/s sideways for 100 steps drifts past the wall
        let m2 = LinearModel::default();
        let mut states = vec![State::new(0.0, 0.0, 0.0, 0.6)];
        for _ in 0..100 {
            states.push(m2.step(states.last().unwrap(), &Input::ZERO).unwrap());
        }
        let drift = Execution::new(states, vec![Input::ZERO; 100]).unwrap();
        assert_eq!(drift.validate(&tube(), &m, &lim, false), Err(ExecutionError::OutsideTube(84)));

        assert!(Execution::new(vec![State::ZERO], vec![Input::ZERO]).is_err());
    }
}
