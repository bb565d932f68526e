use mafqi::env_model::{random_mmdp, random_observation_layer, two_state_env, Environment};
use mafqi::harness::{
    emit_csv, run_fqi, run_fqi_in, stability_box_check, sweep, sweep_config, DistSpec, EnvSource, OperatorKind,
    RunConfig, Status, SweepParam,
};

fn two_state() -> Environment {
    Environment::from_mmdp(two_state_env(0.9)).unwrap()
}

#[test]
fn near_optimal_start_stays_put_with_little_exploration() {
    let report = stability_box_check(&two_state(), 0.05, 1e-4, 200, 7).unwrap();
    assert_eq!(report.trials, 200);
    assert_eq!(report.remained, 200);
    assert_eq!(report.policy_changes, 0);
    assert!(report.worst_excursion < 0.1);
}

#[test]
fn uniform_exploration_pushes_iterates_out() {
    let calm = stability_box_check(&two_state(), 0.05, 1e-4, 200, 7).unwrap();
    let wild = stability_box_check(&two_state(), 0.05, 1.0, 200, 7).unwrap();
    assert!(wild.worst_excursion > calm.worst_excursion);
    assert!(wild.fraction() < 1.0);
}

#[test]
fn zero_box_excursion_shrinks_with_exploration() {
    let coarse = stability_box_check(&two_state(), 0.0, 1e-2, 10, 1).unwrap();
    let fine = stability_box_check(&two_state(), 0.0, 1e-4, 10, 1).unwrap();
    assert_eq!(coarse.policy_changes + fine.policy_changes, 0);
    assert!(fine.worst_excursion < coarse.worst_excursion);
    assert!(fine.worst_excursion < 1e-2);
}

#[test]
fn logs_are_byte_identical_across_runs() {
    let dir = std::env::temp_dir().join(format!("mafqi-scenarios-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let config = RunConfig {
        env: EnvSource::Random { agents: 2, states: 3, actions: 2 },
        dist: DistSpec::Product(None),
        gamma: Some(0.7),
        seed: 11,
        ..RunConfig::default()
    };
    let (a, b) = (dir.join("a.csv"), dir.join("b.csv"));
    emit_csv(&run_fqi(&config).unwrap(), &a).unwrap();
    emit_csv(&run_fqi(&config).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn sweep_entries_match_standalone_runs() {
    let template = RunConfig {
        dist: DistSpec::Product(None),
        seed: 3,
        ..RunConfig::default()
    };
    let values = [0.3, 0.6, 0.9];
    let result = sweep(&template, SweepParam::Gamma, &values).unwrap();
    for (i, entry) in result.entries.iter().enumerate() {
        let alone = run_fqi(&sweep_config(&template, SweepParam::Gamma, values[i], i)).unwrap();
        assert_eq!(entry.result.as_ref().unwrap().to_csv(), alone.to_csv());
    }
}

#[test]
fn rich_observations_run_under_every_operator() {
    let mmdp = random_mmdp(5, 2, 3, 2, 0.6).unwrap();
    let obs = random_observation_layer(6, &mmdp, 2).unwrap();
    let env = Environment::new(mmdp, obs).unwrap();
    for operator in [OperatorKind::LvfClosedForm, OperatorKind::LvfNumeric, OperatorKind::Igm] {
        let config = RunConfig {
            operator,
            iters: 50,
            ..RunConfig::default()
        };
        let log = run_fqi_in(&env, &config).unwrap();
        assert!(!log.records.is_empty());
        assert!(log.records.iter().all(|r| r.q_tot_inf_norm.is_finite()));
    }
    let igm = run_fqi_in(&env, &RunConfig { operator: OperatorKind::Igm, iters: 300, ..RunConfig::default() }).unwrap();
    assert_eq!(igm.status, Some(Status::Converged));
    assert!(igm.last().unwrap().greedy_optimal);
}
