use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, ensure, Context, Result};
use hpl::demo::generate_demonstration;
use hpl::dynamics::LinearModel;
use hpl::environment::TubeEnvironment;
use hpl::execution::Execution;
use hpl::gp::StrategyModels;
use hpl::harness::{
    collect_demonstrations, evaluate, execution_from_records, execution_records, from_jsonl, generate_tasks,
    run_hpl, run_safety_baseline, to_jsonl, train_models, Episode, EpisodeLog, EpisodeSummary, ExecStep, Metrics,
    ModelBundle, RunConfig, StepRecord,
};
use hpl::safety::SafetyController;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::ProjectConfig;
use crate::plot::{render, PlotEpisode};
use crate::{Cli, Command};

pub const MODEL_FILE: &str = "model.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Returns whether every requested item succeeded.
pub fn dispatch(cli: Cli) -> Result<bool> {
    let mut cfg = ProjectConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.clone().or_else(|| cfg.paths.out.clone());
    match cli.cmd {
        Command::GenTasks { n } => gen_tasks(&cfg, n, &out.unwrap_or_else(|| "tasks".into())),
        Command::Demo { tasks, n } => {
            let tasks = tasks.or_else(|| if n.is_none() { cfg.paths.tasks.clone() } else { None });
            demo(&cfg, tasks.as_deref(), n, &out.unwrap_or_else(|| "demos".into()))
        }
        Command::Train { demos } => {
            let demos = demos.or_else(|| cfg.paths.demos.clone()).unwrap_or_else(|| "demos".into());
            train(&cfg, &demos, &out.unwrap_or_else(|| "model".into()))
        }
        Command::Run { model, tasks, reverse, run_id, no_baseline } => {
            let model = model.or_else(|| cfg.paths.model.clone()).unwrap_or_else(|| "model".into());
            let Some(tasks) = tasks.or_else(|| cfg.paths.tasks.clone()) else {
                bail!("no tasks given; pass --tasks GLOB or set paths.tasks in the config")
            };
            let run_id = run_id.unwrap_or_else(|| format!("run-{}", cfg.seed));
            let opts = RunOptions { reverse, baseline: !no_baseline };
            run(&cfg, &model, &tasks, &out.unwrap_or_else(|| "runs".into()).join(run_id), opts)
        }
        Command::Eval { run } => {
            let report = eval(&run)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(report.failures.is_empty() && report.metrics.completions == report.metrics.episodes)
        }
        Command::Plot { run } => {
            let dir = out.unwrap_or_else(|| run.clone());
            plot(&cfg, &run, &dir)?;
            Ok(true)
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_tube(path: &Path) -> Result<TubeEnvironment> {
    TubeEnvironment::from_json(&read(path)?).with_context(|| format!("parsing tube {}", path.display()))
}

fn load_execution(path: &Path) -> Result<Execution> {
    let recs: Vec<ExecStep> = from_jsonl(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    Ok(execution_from_records(&recs)?)
}

/// Task files matching `pattern`, sorted, with ids taken from the file stem.
pub fn load_tasks(pattern: &str) -> Result<Vec<(String, TubeEnvironment)>> {
    let mut paths: Vec<PathBuf> = glob::glob(pattern)
        .with_context(|| format!("bad glob {pattern:?}"))?
        .collect::<Result<_, _>>()?;
    paths.sort();
    ensure!(!paths.is_empty(), "no task files match {pattern:?}; create them with `hpl gen-tasks`");
    paths
        .iter()
        .map(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let id = name.trim_end_matches(".json").trim_end_matches(".tube").to_string();
            Ok((id, load_tube(p)?))
        })
        .collect()
}

fn gen_tasks(cfg: &ProjectConfig, n: usize, out: &Path) -> Result<bool> {
    create_dir(out)?;
    for (i, env) in generate_tasks(n, cfg.seed, &cfg.tubes)?.iter().enumerate() {
        write(&out.join(format!("task_{i:03}.json")), &env.to_json())?;
    }
    info!("wrote {n} tasks to {}", out.display());
    Ok(true)
}

fn demo(cfg: &ProjectConfig, tasks: Option<&str>, n: Option<usize>, out: &Path) -> Result<bool> {
    let model = LinearModel::default();
    let lim = &cfg.run.limits;
    let mut ok = true;
    let demos: Vec<(String, TubeEnvironment, Execution)> = match tasks {
        Some(pattern) => {
            let mut v = Vec::new();
            for (id, env) in load_tasks(pattern)? {
                match generate_demonstration(&env, &model, lim, &cfg.demo) {
                    Ok(ex) => v.push((id, env, ex)),
                    Err(e) => {
                        warn!("{id}: no demonstration ({e}); task skipped");
                        ok = false;
                    }
                }
            }
            v
        }
        None => collect_demonstrations(n.unwrap_or(20), cfg.seed, &cfg.tubes, &model, lim, &cfg.demo)?
            .into_iter()
            .enumerate()
            .map(|(i, (env, ex))| (format!("demo_{i:03}"), env, ex))
            .collect(),
    };
    create_dir(out)?;
    for (id, env, ex) in &demos {
        write(&out.join(format!("{id}.tube.json")), &env.to_json())?;
        write(&out.join(format!("{id}.exec.jsonl")), &to_jsonl(&execution_records(ex)))?;
    }
    info!("wrote {} demonstrations to {}", demos.len(), out.display());
    Ok(ok)
}

fn load_demos(dir: &Path) -> Result<Vec<(TubeEnvironment, Execution)>> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("reading demonstration dir {}; create it with `hpl demo`", dir.display()))?
        .filter_map(|e| e.ok()?.file_name().to_str()?.strip_suffix(".exec.jsonl").map(String::from))
        .collect();
    ids.sort();
    ensure!(!ids.is_empty(), "no demonstrations in {}", dir.display());
    ids.iter()
        .map(|id| {
            let env = load_tube(&dir.join(format!("{id}.tube.json")))?;
            let ex = load_execution(&dir.join(format!("{id}.exec.jsonl")))?;
            Ok((env, ex))
        })
        .collect()
}

fn train(cfg: &ProjectConfig, demos_dir: &Path, out: &Path) -> Result<bool> {
    let model = LinearModel::default();
    let demos = load_demos(demos_dir)?;
    for (i, (env, ex)) in demos.iter().enumerate() {
        ex.validate(env, &model, &cfg.run.limits, true).with_context(|| format!("demonstration {i} is infeasible"))?;
    }
    let models = train_models(&demos, &cfg.run, &cfg.fit)?;
    info!("residual stds {:?}", models.residual_stds());
    create_dir(out)?;
    let bundle = ModelBundle::new(&models, cfg.run.t, cfg.run.safe);
    write(&out.join(MODEL_FILE), &serde_json::to_string(&bundle)?)?;
    info!("wrote {}", out.join(MODEL_FILE).display());
    Ok(true)
}

/// Loads a bundle and refuses it unless it matches `cfg`.
pub fn load_bundle(path: &Path, cfg: &RunConfig) -> Result<StrategyModels> {
    let path = if path.is_dir() { path.join(MODEL_FILE) } else { path.to_path_buf() };
    let bundle: ModelBundle = serde_json::from_str(&read(&path)?)
        .with_context(|| format!("parsing model bundle {}", path.display()))?;
    let (t, safe) = (bundle.t, bundle.safe);
    let (models, _) = bundle.into_models()?;
    let mut diffs = Vec::new();
    if t != cfg.t {
        diffs.push(format!("t: bundle {t}, config {}", cfg.t));
    }
    if models.n != cfg.n {
        diffs.push(format!("n: bundle {}, config {}", models.n, cfg.n));
    }
    if models.ds != cfg.ds {
        diffs.push(format!("ds: bundle {}, config {}", models.ds, cfg.ds));
    }
    if models.frame != cfg.frame {
        diffs.push(format!("frame: bundle {:?}, config {:?}", models.frame, cfg.frame));
    }
    if safe != cfg.safe {
        diffs.push("safe-set spec differs".into());
    }
    ensure!(diffs.is_empty(), "model bundle {} does not match the config ({}); retrain it", path.display(), diffs.join("; "));
    Ok(models)
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub reverse: bool,
    pub baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub task_id: String,
    pub hpl: Option<EpisodeSummary>,
    pub baseline: Option<EpisodeSummary>,
    /// Hard failure of the HPL run, if any.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub model: PathBuf,
    pub config: RunConfig,
    pub episodes: Vec<EpisodeRow>,
    pub metrics: Metrics,
    pub baseline: Option<Metrics>,
    /// `1 - mean HPL duration / mean baseline duration`.
    pub speedup: Option<f64>,
}

fn speedup(hpl: &Metrics, base: Option<&Metrics>) -> Option<f64> {
    base.filter(|b| b.mean_duration_steps > 0.0 && hpl.episodes > 0)
        .map(|b| 1.0 - hpl.mean_duration_steps / b.mean_duration_steps)
}

fn write_episode(dir: &Path, id: &str, ep: &Episode, tag: &str) -> Result<()> {
    write(&dir.join(format!("{id}{tag}.exec.jsonl")), &to_jsonl(&execution_records(&ep.execution)))?;
    if !ep.log.records.is_empty() {
        write(&dir.join(format!("{id}{tag}.log.jsonl")), &to_jsonl(&ep.log.records))?;
    }
    Ok(())
}

fn run_one(
    cfg: &ProjectConfig,
    models: &StrategyModels,
    dir: &Path,
    id: &str,
    env: &TubeEnvironment,
    opts: RunOptions,
) -> Result<EpisodeRow> {
    let model = LinearModel::default();
    write(&dir.join(format!("{id}.tube.json")), &env.to_json())?;
    let (hpl, error) = match run_hpl(env, models, &model, &cfg.run) {
        Ok(ep) => {
            write_episode(dir, id, &ep, "")?;
            info!("{id}: {} steps, completed {}, {} in safety mode", ep.execution.duration(), ep.completed, ep.log.safety_steps());
            (Some(EpisodeSummary::new(id, &ep, env)), None)
        }
        Err(e) => {
            warn!("{id}: {e}");
            (None, Some(e.to_string()))
        }
    };
    let baseline = if opts.baseline {
        let ctrl = SafetyController::new(cfg.run.safety, model.clone(), cfg.run.limits);
        let ep = run_safety_baseline(env, &ctrl, cfg.run.max_steps_for(env, model.dt()))?;
        write_episode(dir, id, &ep, ".baseline")?;
        Some(EpisodeSummary::new(id, &ep, env))
    } else {
        None
    };
    Ok(EpisodeRow { task_id: id.to_string(), hpl, baseline, error })
}

pub fn run(cfg: &ProjectConfig, model_path: &Path, tasks: &str, dir: &Path, opts: RunOptions) -> Result<bool> {
    let models = load_bundle(model_path, &cfg.run)?;
    let mut jobs = Vec::new();
    for (id, env) in load_tasks(tasks)? {
        if opts.reverse {
            jobs.push((format!("{id}.rev"), env.reversed()));
        }
        jobs.push((id, env));
    }
    jobs.sort_by(|a, b| a.0.cmp(&b.0));
    create_dir(dir)?;

    let threads = match cfg.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<Result<EpisodeRow>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((id, env)) = jobs.get(i) else { break };
                let row = run_one(cfg, &models, dir, id, env, opts);
                rows.lock().expect("no worker panics while holding the lock")[i] = Some(row);
            });
        }
    });
    let episodes = rows
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;

    let hpl: Vec<EpisodeSummary> = episodes.iter().filter_map(|r| r.hpl.clone()).collect();
    let mut metrics = evaluate(&hpl);
    metrics.episodes = episodes.len();
    let baseline = opts.baseline.then(|| evaluate(&episodes.iter().filter_map(|r| r.baseline.clone()).collect::<Vec<_>>()));
    let summary = RunSummary {
        run_id: dir.file_name().and_then(|n| n.to_str()).unwrap_or("run").to_string(),
        model: model_path.to_path_buf(),
        config: cfg.run.clone(),
        speedup: speedup(&metrics, baseline.as_ref()),
        episodes,
        metrics,
        baseline,
    };
    write(&dir.join(SUMMARY_FILE), &serde_json::to_string_pretty(&summary)?)?;
    println!(
        "{}/{} episodes completed, mean {:.1} steps{}",
        summary.metrics.completions,
        summary.metrics.episodes,
        summary.metrics.mean_duration_steps,
        summary.speedup.map_or(String::new(), |s| format!(", {:.1}% faster than the baseline", 100.0 * s)),
    );
    Ok(summary.metrics.completions == summary.metrics.episodes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub baseline: Option<Metrics>,
    pub speedup: Option<f64>,
    /// Episodes whose stored execution fails the feasibility re-check.
    pub failures: Vec<String>,
}

fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(SUMMARY_FILE);
    serde_json::from_str(&read(&path)?).with_context(|| format!("parsing {}", path.display()))
}

/// Stored episode, re-validated against its tube.
fn reload_episode(
    dir: &Path,
    id: &str,
    tag: &str,
    env: &TubeEnvironment,
    cfg: &RunConfig,
    wall_time: f64,
) -> Result<(Episode, Result<()>)> {
    let model = LinearModel::default();
    let execution = load_execution(&dir.join(format!("{id}{tag}.exec.jsonl")))?;
    let log_path = dir.join(format!("{id}{tag}.log.jsonl"));
    let records: Vec<StepRecord> = if log_path.exists() {
        from_jsonl(&read(&log_path)?).with_context(|| format!("parsing {}", log_path.display()))?
    } else {
        Vec::new()
    };
    let mut check = execution.validate(env, &model, &cfg.limits, true).map_err(anyhow::Error::from);
    if check.is_ok() && !records.is_empty() && records.len() != execution.duration() {
        check = Err(anyhow::anyhow!("log has {} records for {} steps", records.len(), execution.duration()));
    }
    let ep = Episode { execution, log: EpisodeLog { records }, completed: check.is_ok(), wall_time };
    Ok((ep, check))
}

pub fn eval(dir: &Path) -> Result<EvalReport> {
    let summary = read_summary(dir)?;
    let mut failures = Vec::new();
    let (mut hpl, mut base) = (Vec::new(), Vec::new());
    for row in &summary.episodes {
        let id = &row.task_id;
        if let Some(e) = &row.error {
            failures.push(format!("{id}: {e}"));
            continue;
        }
        let env = load_tube(&dir.join(format!("{id}.tube.json")))?;
        let wall = row.hpl.as_ref().map_or(0.0, |s| s.wall_time);
        let (ep, check) = reload_episode(dir, id, "", &env, &summary.config, wall)?;
        if let Err(e) = check {
            failures.push(format!("{id}: {e:#}"));
        }
        hpl.push(EpisodeSummary::new(id.as_str(), &ep, &env));
        if let Some(b) = &row.baseline {
            let (ep, _) = reload_episode(dir, id, ".baseline", &env, &summary.config, b.wall_time)?;
            base.push(EpisodeSummary::new(id.as_str(), &ep, &env));
        }
    }
    let mut metrics = evaluate(&hpl);
    metrics.episodes = summary.episodes.len();
    let baseline = (!base.is_empty()).then(|| evaluate(&base));
    Ok(EvalReport { speedup: speedup(&metrics, baseline.as_ref()), metrics, baseline, failures })
}

fn plot(cfg: &ProjectConfig, run_dir: &Path, out: &Path) -> Result<()> {
    let summary = read_summary(run_dir)?;
    let mut eps = Vec::new();
    for row in &summary.episodes {
        let id = &row.task_id;
        let env = load_tube(&run_dir.join(format!("{id}.tube.json")))?;
        let exec_path = run_dir.join(format!("{id}.exec.jsonl"));
        let (states, records) = if exec_path.exists() {
            let (ep, _) = reload_episode(run_dir, id, "", &env, &summary.config, 0.0)?;
            (ep.execution.states, ep.log.records)
        } else {
            (Vec::new(), Vec::new())
        };
        eps.push(PlotEpisode {
            id: id.clone(),
            env,
            states,
            records,
            hpl_steps: row.hpl.as_ref().map(|s| s.duration_steps),
            baseline_steps: row.baseline.as_ref().map(|s| s.duration_steps),
        });
    }
    create_dir(out)?;
    let path = out.join("plot.svg");
    write(&path, &render(&eps, &cfg.plot))?;
    info!("wrote {}", path.display());
    Ok(())
}
