//! Closed-loop HPL episodes, the safety-controller baseline, task and
//! demonstration generation, metrics, and the trained-model bundle.

use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demo::{generate_demonstration, DemoConfig};
use crate::dynamics::{Input, LinearModel, State, SystemLimits};
use crate::environment::{generate_tube, EnvError, TubeEnvironment, TubeGenConfig};
use crate::execution::Execution;
use crate::gp::{build_dataset_in, FitConfig, GPModel, GpError, GpModelDoc, QueryFrame, StrategyModels, N_OUTPUTS};
use crate::mpc::{select_horizon_and_solve, HorizonOutcome, MpcConfig, MpcSolution, StepContext};
use crate::safety::{SafeSetSpec, SafetyController, SafetyControllerCfg};
use crate::strategy::{build_strategy_sets, gate, lift_with_input, HyperRect, StrategyConfig, TargetSet, TargetSetList};

pub const BUNDLE_VERSION: &str = "hpl-bundle/1";

/// Floor for the default gate thresholds. An output that is constant in the
/// training data has a zero residual, and a zero threshold would reject it
/// at every query however confident the model is.
pub const D_THRESH_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("step {step}: {what}")]
    Violation { step: usize, what: String },
    #[error("initial state is outside the safe set")]
    InitialState,
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("model bundle: {0}")]
    Bundle(String),
    #[error("no demonstrable tube found after {0} draws")]
    Tasks(usize),
}

/// Parameters of one HPL episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub t: usize,
    pub n: usize,
    pub eta: f64,
    /// Per-output gate thresholds; `None` uses twice the training residual
    /// std, floored at [`D_THRESH_FLOOR`].
    pub d_thresh: Option<[f64; N_OUTPUTS]>,
    pub ds: f64,
    pub frame: QueryFrame,
    /// `None` gives four times the nominal safety-controller duration.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub include_noise: bool,
    pub safe: SafeSetSpec,
    pub limits: SystemLimits,
    pub mpc: MpcConfig,
    pub safety: SafetyControllerCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            t: 5,
            n: 10,
            eta: 2.0,
            d_thresh: None,
            ds: 1.0 * 0.01 * 5.0 / 10.0,
            frame: QueryFrame::Frenet,
            max_steps: None,
            seed: 0,
            include_noise: false,
            safe: SafeSetSpec::for_width(1.0),
            limits: SystemLimits::default(),
            mpc: MpcConfig::default(),
            safety: SafetyControllerCfg::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self, env: &TubeEnvironment) -> Result<(), HarnessError> {
        if self.t == 0 || self.n == 0 {
            return Err(HarnessError::Config("T and N must be at least 1".into()));
        }
        if self.max_steps == Some(0) {
            return Err(HarnessError::Config("max_steps must be positive".into()));
        }
        if !(self.ds > 0.0) {
            return Err(HarnessError::Config("ds must be positive".into()));
        }
        self.limits.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.safe.validate(env.width(), &self.limits).map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.safety.v_ref > self.safe.v_max_safe {
            return Err(HarnessError::Config("safety v_ref exceeds the safe-set speed bound".into()));
        }
        Ok(())
    }

    pub fn max_steps_for(&self, env: &TubeEnvironment, dt: f64) -> usize {
        self.max_steps.unwrap_or_else(|| (4.0 * env.total_length() / (0.5 * dt)).ceil() as usize)
    }

    pub fn strategy(&self, models: &StrategyModels) -> StrategyConfig {
        let d = self.d_thresh.unwrap_or_else(|| models.residual_stds().map(|r: f64| (2.0 * r).max(D_THRESH_FLOOR)));
        StrategyConfig { eta: self.eta, d_thresh: d, t: self.t, n: self.n, include_noise: self.include_noise }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Mpc,
    Safety,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub state: State,
    pub input: Input,
    pub mode: Mode,
    pub n_k: usize,
    pub sigmas: [f64; N_OUTPUTS],
    pub accepted: bool,
    /// Newest strategy state rectangle (before lifting).
    pub strategy_rect: HyperRect,
    /// Target-set rectangles of slots `1..=T` after horizon selection.
    pub slots: Vec<Option<HyperRect>>,
    pub demoted: Vec<usize>,
    pub solves: usize,
    pub objective: Option<f64>,
    pub input_rects: bool,
    pub shifted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub records: Vec<StepRecord>,
}

impl EpisodeLog {
    pub fn safety_steps(&self) -> usize {
        self.records.iter().filter(|r| r.mode == Mode::Safety).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub execution: Execution,
    pub log: EpisodeLog,
    pub completed: bool,
    pub wall_time: f64,
}

fn check_step(
    k: usize,
    u: &Input,
    next: &State,
    env: &TubeEnvironment,
    limits: &SystemLimits,
) -> Result<(), HarnessError> {
    if !limits.input_ok(u) {
        return Err(HarnessError::Violation { step: k, what: format!("input {u:?} exceeds the norm bound") });
    }
    if !limits.state_ok(next) {
        return Err(HarnessError::Violation { step: k, what: format!("velocity of {next:?} out of bounds") });
    }
    if !env.contains(next) {
        return Err(HarnessError::Violation { step: k, what: format!("{next:?} leaves the tube") });
    }
    Ok(())
}

/// Runs the HPL policy on `env` from rest at the tube start.
pub fn run_hpl(
    env: &TubeEnvironment,
    models: &StrategyModels,
    model: &LinearModel,
    cfg: &RunConfig,
) -> Result<Episode, HarnessError> {
    cfg.validate(env)?;
    if models.n != cfg.n || models.frame != cfg.frame || (models.ds - cfg.ds).abs() > 1e-12 {
        return Err(HarnessError::Config("models were trained with a different forecast layout".into()));
    }
    let started = Instant::now();
    let scfg = cfg.strategy(models);
    let ctrl = SafetyController::new(cfg.safety, model.clone(), cfg.limits);
    let ctx = StepContext { env, model, limits: &cfg.limits, cfg: &cfg.mpc };
    let x0 = State::ZERO;
    if !cfg.safe.contains(&x0, env) {
        return Err(HarnessError::InitialState);
    }
    let max_steps = cfg.max_steps_for(env, model.dt());
    let mut list = TargetSetList::new(cfg.t);
    let mut states = vec![x0];
    let mut inputs = Vec::new();
    let mut log = EpisodeLog::default();
    let mut prev: Option<MpcSolution> = None;
    let mut mode = Mode::Safety;
    let mut x = x0;
    let mut k = 0;
    while !env.in_target_region(&x) && k < max_steps {
        let z = models.query(env, &x)?;
        let (xrect, urect, c) = build_strategy_sets(models, &z, &scfg).map_err(|e| match e {
            crate::strategy::StrategyError::Gp(g) => HarnessError::Gp(g),
            other => HarnessError::Config(other.to_string()),
        })?;
        let accepted = gate(&c, &scfg);
        let newest = if accepted {
            let ur = cfg.mpc.use_input_rects.then(|| urect.clone());
            lift_with_input(&xrect, ur, env, &cfg.safe)
        } else {
            TargetSet::Empty
        };
        list.advance(newest);
        let report = select_horizon_and_solve(&mut list, &x, &ctx, prev.as_ref());
        let (u, new_mode, objective, input_rects, shifted) = match &report.outcome {
            HorizonOutcome::Mpc { solution, input_rects, shifted, .. } => {
                prev = Some(solution.clone());
                (solution.inputs[0], Mode::Mpc, Some(solution.objective), *input_rects, *shifted)
            }
            HorizonOutcome::Safety => {
                // entering safety mode is only allowed from inside the safe set
                if mode == Mode::Mpc && !cfg.safe.contains(&x, env) {
                    return Err(HarnessError::Violation {
                        step: k,
                        what: format!("safety mode entered outside the safe set at {x:?}"),
                    });
                }
                prev = None;
                (ctrl.input(&x, env), Mode::Safety, None, false, false)
            }
        };
        mode = new_mode;
        let next = model.step(&x, &u).map_err(|e| HarnessError::Violation { step: k, what: e.to_string() })?;
        check_step(k, &u, &next, env, &cfg.limits)?;
        log.records.push(StepRecord {
            k,
            state: x,
            input: u,
            mode,
            n_k: report.n_k(),
            sigmas: c.sigmas,
            accepted,
            strategy_rect: xrect,
            slots: list.slots().iter().map(|s| s.rect().cloned()).collect(),
            demoted: report.demoted.clone(),
            solves: report.solves,
            objective,
            input_rects,
            shifted,
        });
        inputs.push(u);
        states.push(next);
        x = next;
        k += 1;
    }
    let completed = env.in_target_region(&x);
    let execution = Execution::new(states, inputs).map_err(|e| HarnessError::Config(e.to_string()))?;
    execution
        .validate(env, model, &cfg.limits, completed)
        .map_err(|e| HarnessError::Violation { step: execution.duration(), what: e.to_string() })?;
    Ok(Episode { execution, log, completed, wall_time: started.elapsed().as_secs_f64() })
}

/// The centerline tracker alone, from rest at the tube start.
pub fn run_safety_baseline(
    env: &TubeEnvironment,
    ctrl: &SafetyController,
    max_steps: usize,
) -> Result<Episode, HarnessError> {
    let started = Instant::now();
    let mut states = vec![State::ZERO];
    let mut inputs = Vec::new();
    let mut log = EpisodeLog::default();
    let mut x = State::ZERO;
    while !env.in_target_region(&x) && inputs.len() < max_steps {
        let k = inputs.len();
        let u = ctrl.input(&x, env);
        let next = ctrl.model.step(&x, &u).map_err(|e| HarnessError::Violation { step: k, what: e.to_string() })?;
        check_step(k, &u, &next, env, &ctrl.limits)?;
        log.records.push(StepRecord {
            k,
            state: x,
            input: u,
            mode: Mode::Safety,
            n_k: 0,
            sigmas: [0.0; N_OUTPUTS],
            accepted: false,
            strategy_rect: HyperRect::empty(2),
            slots: Vec::new(),
            demoted: Vec::new(),
            solves: 0,
            objective: None,
            input_rects: false,
            shifted: false,
        });
        inputs.push(u);
        states.push(next);
        x = next;
    }
    let completed = env.in_target_region(&x);
    let execution = Execution::new(states, inputs).map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(Episode { execution, log, completed, wall_time: started.elapsed().as_secs_f64() })
}

/// `n` tubes from consecutive seeds starting at `seed`.
pub fn generate_tasks(n: usize, seed: u64, cfg: &TubeGenConfig) -> Result<Vec<TubeEnvironment>, HarnessError> {
    (0..n).map(|i| Ok(generate_tube(seed.wrapping_add(i as u64), cfg)?)).collect()
}

/// Demonstrations for `n` tubes. Tubes the demonstrator cannot solve are
/// discarded and replaced by the next seed.
pub fn collect_demonstrations(
    n: usize,
    seed: u64,
    tube_cfg: &TubeGenConfig,
    model: &LinearModel,
    limits: &SystemLimits,
    demo: &DemoConfig,
) -> Result<Vec<(TubeEnvironment, Execution)>, HarnessError> {
    let mut out = Vec::with_capacity(n);
    let mut s = seed;
    let budget = 10 * n + 10;
    let mut draws = 0;
    while out.len() < n {
        if draws >= budget {
            return Err(HarnessError::Tasks(draws));
        }
        draws += 1;
        let env = generate_tube(s, tube_cfg)?;
        s = s.wrapping_add(1);
        match generate_demonstration(&env, model, limits, demo) {
            Ok(ex) => {
                info!("demonstration on tube seed {}: {} steps", s - 1, ex.duration());
                out.push((env, ex));
            }
            Err(e) => warn!("tube seed {} discarded: {e}", s - 1),
        }
    }
    Ok(out)
}

/// Fits the four strategy GPs on stored executions.
pub fn train_models(
    demos: &[(TubeEnvironment, Execution)],
    cfg: &RunConfig,
    fit: &FitConfig,
) -> Result<StrategyModels, HarnessError> {
    let envs: Vec<TubeEnvironment> = demos.iter().map(|d| d.0.clone()).collect();
    let execs: Vec<Execution> = demos.iter().map(|d| d.1.clone()).collect();
    let data = build_dataset_in(cfg.frame, &execs, &envs, cfg.n, cfg.t, cfg.ds)?;
    info!("training on {} rows", data.len());
    Ok(StrategyModels::fit(&data, cfg.n, cfg.ds, fit)?)
}

/// Per-episode numbers used for comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub task_id: String,
    pub duration_steps: usize,
    pub completed: bool,
    pub wall_time: f64,
    pub safety_steps: usize,
    /// `min_k (w/2 - |h_k|)`; negative means the tube was left.
    pub min_tube_margin: f64,
}

impl EpisodeSummary {
    pub fn new(task_id: impl Into<String>, ep: &Episode, env: &TubeEnvironment) -> Self {
        let min_tube_margin = ep
            .execution
            .states
            .iter()
            .map(|s| env.project_detailed(s.position()).map_or(f64::NEG_INFINITY, |p| env.half_width() - p.distance))
            .fold(f64::INFINITY, f64::min);
        EpisodeSummary {
            task_id: task_id.into(),
            duration_steps: ep.execution.duration(),
            completed: ep.completed,
            wall_time: ep.wall_time,
            safety_steps: ep.log.safety_steps(),
            min_tube_margin,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub completions: usize,
    pub mean_duration_steps: f64,
    pub wall_time: f64,
    pub safety_mode_fraction: f64,
    pub min_tube_margin: f64,
}

pub fn evaluate(summaries: &[EpisodeSummary]) -> Metrics {
    if summaries.is_empty() {
        return Metrics::default();
    }
    let n = summaries.len() as f64;
    let steps: usize = summaries.iter().map(|s| s.duration_steps).sum();
    let safety: usize = summaries.iter().map(|s| s.safety_steps).sum();
    Metrics {
        episodes: summaries.len(),
        completions: summaries.iter().filter(|s| s.completed).count(),
        mean_duration_steps: steps as f64 / n,
        wall_time: summaries.iter().map(|s| s.wall_time).sum(),
        safety_mode_fraction: if steps > 0 { safety as f64 / steps as f64 } else { 0.0 },
        min_tube_margin: summaries.iter().map(|s| s.min_tube_margin).fold(f64::INFINITY, f64::min),
    }
}

/// Trained models plus everything needed to run them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBundle {
    pub version: String,
    pub n: usize,
    pub t: usize,
    pub ds: f64,
    pub frame: QueryFrame,
    pub safe: SafeSetSpec,
    pub models: Vec<GpModelDoc>,
}

impl ModelBundle {
    pub fn new(models: &StrategyModels, t: usize, safe: SafeSetSpec) -> Self {
        ModelBundle {
            version: BUNDLE_VERSION.to_string(),
            n: models.n,
            t,
            ds: models.ds,
            frame: models.frame,
            safe,
            models: models.models.iter().map(GPModel::to_doc).collect(),
        }
    }

    pub fn into_models(self) -> Result<(StrategyModels, SafeSetSpec), HarnessError> {
        if self.version != BUNDLE_VERSION {
            return Err(HarnessError::Bundle(format!("version {} (expected {BUNDLE_VERSION})", self.version)));
        }
        if self.models.len() != N_OUTPUTS {
            return Err(HarnessError::Bundle(format!("{} models (expected {N_OUTPUTS})", self.models.len())));
        }
        let models = self.models.into_iter().map(GPModel::from_doc).collect::<Result<Vec<_>, _>>()?;
        Ok((StrategyModels { models, frame: self.frame, n: self.n, ds: self.ds }, self.safe))
    }
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecStep {
    pub k: usize,
    pub state: State,
    /// Absent for the final state.
    pub input: Option<Input>,
}

pub fn execution_records(ex: &Execution) -> Vec<ExecStep> {
    ex.states.iter().enumerate().map(|(k, s)| ExecStep { k, state: *s, input: ex.inputs.get(k).copied() }).collect()
}

pub fn execution_from_records(recs: &[ExecStep]) -> Result<Execution, HarnessError> {
    let states = recs.iter().map(|r| r.state).collect();
    let inputs = recs.iter().filter_map(|r| r.input).collect();
    Execution::new(states, inputs).map_err(|e| HarnessError::Config(e.to_string()))
}
