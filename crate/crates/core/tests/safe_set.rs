use hpl::dynamics::{LinearModel, SystemLimits};
use hpl::environment::{generate_tube, TubeEnvironment, TubeGenConfig, TubeSegment};
use hpl::safety::{shrink_to_safe, verify_safe_set, SafeSetSpec, SafetyController, SafetyControllerCfg};

fn ctrl() -> SafetyController {
    SafetyController::new(SafetyControllerCfg::default(), LinearModel::default(), SystemLimits::default())
}

#[test]
fn already_safe_spec_is_returned_unchanged() {
    let spec = SafeSetSpec::constant_speed(0.0, 0.0, -1.0, 0.05, 0.75);
    let envs = vec![generate_tube(2, &TubeGenConfig::default()).unwrap()];
    assert_eq!(shrink_to_safe(&spec, &envs, &ctrl(), 20, 100, 1, 5).unwrap(), spec);
}

#[test]
fn shrunk_spec_is_contained_and_holds_on_a_fresh_seed() {
    let sharp = TubeEnvironment::new(
        vec![
            TubeSegment { length: 1.5, slope: 1.5 },
            TubeSegment { length: 1.5, slope: -1.5 },
            TubeSegment { length: 1.5, slope: 1.5 },
        ],
        1.0,
    )
    .unwrap();
    let envs = vec![sharp];
    let c = ctrl();
    let spec0 = SafeSetSpec::constant_speed(0.5, 3.0, -1.0, 0.05, 0.5);
    let out = shrink_to_safe(&spec0, &envs, &c, 100, 300, 11, 40).unwrap();
    assert!(out.is_within(&spec0));
    assert_ne!(out, spec0);
    assert_eq!(verify_safe_set(&out, &envs, &c, 100, 300, 1234).violations, 0);
}

#[test]
fn shrinking_with_no_budget_fails() {
    let sharp =
        TubeEnvironment::new(vec![TubeSegment { length: 1.5, slope: 1.5 }, TubeSegment { length: 1.5, slope: -1.5 }], 1.0)
            .unwrap();
    let spec0 = SafeSetSpec::constant_speed(0.5, 3.0, -1.0, 0.05, 0.5);
    assert!(shrink_to_safe(&spec0, &[sharp], &ctrl(), 40, 300, 3, 1).is_err());
}
