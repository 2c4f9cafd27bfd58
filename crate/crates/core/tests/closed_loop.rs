use hpl::demo::DemoConfig;
use hpl::dynamics::{LinearModel, State, SystemLimits};
use hpl::environment::{generate_tube, TubeEnvironment, TubeGenConfig, TubeSegment};
use hpl::gp::{FitConfig, GPModel, KernelParams, QueryFrame, Standardizer, StrategyModels, N_OUTPUTS};
use hpl::harness::{
    collect_demonstrations, evaluate, run_hpl, run_safety_baseline, train_models, EpisodeSummary, Mode, ModelBundle,
    RunConfig,
};
use hpl::safety::SafetyController;
use hpl::strategy::{build_strategy_sets, StrategyConfig};

fn small_models(cfg: &RunConfig) -> StrategyModels {
    let model = LinearModel::default();
    let demos =
        collect_demonstrations(3, 0, &TubeGenConfig::default(), &model, &cfg.limits, &DemoConfig::default()).unwrap();
    let fit = FitConfig { restarts: 1, max_iter: 30, max_fit_rows: 120, max_train_rows: 200, ..FitConfig::for_strategies() };
    train_models(&demos, cfg, &fit).unwrap()
}

#[test]
fn hpl_closed_loop_behaviour() {
    let cfg = RunConfig::default();
    let model = LinearModel::default();
    let models = small_models(&cfg);
    let env = generate_tube(500, &TubeGenConfig::default()).unwrap();

    let ep = run_hpl(&env, &models, &model, &cfg).unwrap();
    assert!(ep.completed);
    ep.execution.validate(&env, &model, &cfg.limits, true).unwrap();
    let again = run_hpl(&env, &models, &model, &cfg).unwrap();
    assert_eq!(ep.execution, again.execution, "runs must be deterministic");

    // every safety-mode step that follows an MPC step starts inside the safe set
    for w in ep.log.records.windows(2) {
        if w[0].mode == Mode::Mpc && w[1].mode == Mode::Safety {
            assert!(cfg.safe.contains(&w[1].state, &env), "step {}", w[1].k);
        }
    }

    // rejecting every strategy leaves exactly the safety controller
    let reject = RunConfig { d_thresh: Some([0.0; N_OUTPUTS]), ..cfg.clone() };
    let ep0 = run_hpl(&env, &models, &model, &reject).unwrap();
    let ctrl = SafetyController::new(cfg.safety, model.clone(), cfg.limits);
    let base = run_safety_baseline(&env, &ctrl, 100_000).unwrap();
    assert!(ep0.completed);
    assert_eq!(ep0.log.safety_steps(), ep0.execution.duration());
    assert_eq!(ep0.execution, base.execution);

    let m = evaluate(&[EpisodeSummary::new("t", &ep0, &env)]);
    assert_eq!(m.safety_mode_fraction, 1.0);
    assert!(m.min_tube_margin > 0.0);
}

#[test]
fn model_bundle_round_trip() {
    let cfg = RunConfig::default();
    let models = small_models(&cfg);
    let bundle = ModelBundle::new(&models, cfg.t, cfg.safe);
    let text = serde_json::to_string(&bundle).unwrap();
    let (back, safe) = serde_json::from_str::<ModelBundle>(&text).unwrap().into_models().unwrap();
    assert_eq!(safe, cfg.safe);
    assert_eq!(back.frame, QueryFrame::Frenet);
    let env = generate_tube(9, &TubeGenConfig::default()).unwrap();
    let z = models.query(&env, &State::new(0.3, 0.4, 0.05, 0.1)).unwrap();
    let (a, b) = (models.posterior(&z).unwrap(), back.posterior(&z).unwrap());
    for i in 0..N_OUTPUTS {
        assert!((a[i].0 - b[i].0).abs() < 1e-9 && (a[i].1 - b[i].1).abs() < 1e-6);
    }

    let mut wrong = serde_json::from_str::<ModelBundle>(&text).unwrap();
    wrong.version = "other".into();
    assert!(wrong.into_models().is_err());
}

#[test]
fn noiseless_strategy_center_reproduces_training_row() {
    // one straight tube, a handful of rows; with σ_n = 0 the strategy box
    // centre at a training query is that row's (s, h)
    let env = TubeEnvironment::new(vec![TubeSegment { length: 4.0, slope: 0.3 }], 1.0).unwrap();
    let states = [State::new(0.2, 0.5, 0.1, 0.1), State::new(1.0, 1.0, 0.2, 0.0), State::new(2.0, 0.8, 0.9, 0.4)];
    let zs: Vec<Vec<f64>> = states.iter().map(|s| hpl::gp::query_vector(&env, s, 10, 0.005).unwrap()).collect();
    let targets = [[0.4, -0.1, 0.2, 0.1], [1.3, 0.05, -0.3, 0.6], [2.5, 0.2, 0.9, -0.2]];
    let dim = zs[0].len();
    let models: Vec<GPModel> = (0..N_OUTPUTS)
        .map(|c| {
            let p = KernelParams::new(1.0, vec![0.5; dim], 0.0).unwrap();
            let y: Vec<f64> = targets.iter().map(|t| t[c]).collect();
            GPModel::with_params(p, Standardizer::identity(dim), &zs, &y).unwrap()
        })
        .collect();
    let sm = StrategyModels { models, frame: QueryFrame::World, n: 10, ds: 0.005 };
    let cfg = StrategyConfig { eta: 2.0, d_thresh: [1.0; N_OUTPUTS], t: 5, n: 10, include_noise: false };
    for (z, t) in zs.iter().zip(&targets) {
        let (xr, ur, _) = build_strategy_sets(&sm, z, &cfg).unwrap();
        let (c, cu) = (xr.center(), ur.center());
        assert!((c[0] - t[0]).abs() < 1e-6 && (c[1] - t[1]).abs() < 1e-6, "{c:?} vs {t:?}");
        assert!((cu[0] - t[2]).abs() < 1e-6 && (cu[1] - t[3]).abs() < 1e-6);
    }
}

#[test]
fn run_config_is_checked() {
    let cfg = RunConfig { t: 0, ..RunConfig::default() };
    let env = generate_tube(1, &TubeGenConfig::default()).unwrap();
    assert!(cfg.validate(&env).is_err());
    let cfg = RunConfig { limits: SystemLimits::default(), ..RunConfig::default() };
    assert!(cfg.validate(&env).is_ok());
}

#[test]
fn straight_tube_models_drive_a_straight_tube() {
    let model = LinearModel::default();
    let cfg = RunConfig::default();
    let demos: Vec<_> = [3.0, 4.0, 5.0]
        .iter()
        .map(|&length| {
            let env = TubeEnvironment::new(vec![TubeSegment { length, slope: 0.0 }], 1.0).unwrap();
            let ex = hpl::demo::generate_demonstration(&env, &model, &cfg.limits, &DemoConfig::default()).unwrap();
            (env, ex)
        })
        .collect();
    let fit = FitConfig { restarts: 1, max_iter: 30, max_fit_rows: 120, max_train_rows: 200, ..FitConfig::for_strategies() };
    let models = train_models(&demos, &cfg, &fit).unwrap();

    let env = TubeEnvironment::new(vec![TubeSegment { length: 4.5, slope: 0.0 }], 1.0).unwrap();
    let ep = run_hpl(&env, &models, &model, &cfg).unwrap();
    assert!(ep.completed);
    ep.execution.validate(&env, &model, &cfg.limits, true).unwrap();
    // the safe-set speed profile forces some braking in safety mode near the
    // end, so only the first stretch has to be MPC-driven
    assert!(ep.log.records[..100].iter().all(|r| r.mode == Mode::Mpc));
    let ctrl = SafetyController::new(cfg.safety, model.clone(), cfg.limits);
    let base = run_safety_baseline(&env, &ctrl, 100_000).unwrap();
    assert!(ep.execution.duration() < base.execution.duration());
}
