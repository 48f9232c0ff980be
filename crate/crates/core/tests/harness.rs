use satlas::harness::{
    run_comparison, run_coverage_experiment, run_dataset_conditional, write_metrics_csv,
    DatasetConditionalSpec, ExperimentConfig, PlannerVariant, RunOptions,
};
use satlas::planner::PlannerMode;
use satlas::scenario::IntRange;
use satlas::scorer::ScorerSpec;
use satlas::Error;

fn small(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        trials: 12,
        calibration_size: 10,
        alphas: vec![0.2, 0.5],
        ..ExperimentConfig::new(seed)
    }
}

#[test]
fn reports_are_a_function_of_the_config() {
    let cfg = small(5);
    let a = run_coverage_experiment(&cfg, &RunOptions::default()).unwrap();
    let b = run_coverage_experiment(
        &cfg,
        &RunOptions {
            jobs: Some(1),
            checkpoint: None,
        },
    )
    .unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.metrics.len(), 2);
    assert_eq!(a.timing.trials_computed, 12);
    let other = run_coverage_experiment(&small(6), &RunOptions::default()).unwrap();
    assert_ne!(a.report.outcomes, other.report.outcomes);
}

#[test]
fn rates_are_probabilities_and_success_dominates_coverage() {
    let run = run_coverage_experiment(&small(9), &RunOptions::default()).unwrap();
    for m in &run.report.metrics {
        let c = m.coverage.unwrap();
        for r in [c, m.success, m.singleton_rate, m.help_rate] {
            assert!((0.0..=1.0).contains(&r));
        }
        assert!(m.success >= c);
        assert_eq!(m.coverage_without_success, 0);
        assert_eq!(m.trials, 12);
    }
}

#[test]
fn checkpoint_resume_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.jsonl");
    let cfg = small(21);
    let opts = RunOptions {
        jobs: Some(2),
        checkpoint: Some(path.clone()),
    };
    let full = run_coverage_experiment(&cfg, &opts).unwrap();

    // Keep the header and five trials plus a torn line.
    let text = std::fs::read_to_string(&path).unwrap();
    let mut kept: Vec<&str> = text.lines().take(6).collect();
    let torn = &text.lines().nth(6).unwrap()[..10];
    kept.push(torn);
    std::fs::write(&path, kept.join("\n")).unwrap();

    let resumed = run_coverage_experiment(&cfg, &opts).unwrap();
    assert_eq!(resumed.timing.trials_resumed, 5);
    assert_eq!(resumed.timing.trials_computed, 7);
    assert_eq!(resumed.report, full.report);

    let again = run_coverage_experiment(&cfg, &opts).unwrap();
    assert_eq!(again.timing.trials_computed, 0);
    assert_eq!(again.report, full.report);

    let err = run_coverage_experiment(&small(22), &opts).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        ExperimentConfig {
            trials: 0,
            ..small(1)
        },
        ExperimentConfig {
            alphas: vec![1.0],
            ..small(1)
        },
        ExperimentConfig {
            planners: vec![],
            ..small(1)
        },
    ] {
        let err = run_coverage_experiment(&cfg, &RunOptions::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}

#[test]
fn comparison_on_single_robot_scenarios_coincides() {
    let mut cfg = small(4);
    cfg.params.robots = IntRange::exactly(1);
    let run = run_comparison(&cfg, &RunOptions::default()).unwrap();
    for alpha in &cfg.alphas {
        let d = run.report.metrics_for(*alpha, PlannerMode::Distributed).unwrap();
        let c = run.report.metrics_for(*alpha, PlannerMode::Centralized).unwrap();
        assert_eq!(d.coverage, c.coverage);
        assert_eq!(d.success, c.success);
        assert_eq!(d.help_rate, c.help_rate);
        assert_eq!(d.total_calls, c.total_calls);
    }
    assert_eq!(run.report.comparison.len(), 2);
    assert!(run.report.comparison.iter().all(|r| r.help_rate_difference == 0.0));
}

#[test]
fn argmax_rows_have_no_coverage() {
    let mut cfg = small(2);
    cfg.planners.push(PlannerVariant::new(PlannerMode::ArgmaxNoHelp));
    let run = run_coverage_experiment(&cfg, &RunOptions::default()).unwrap();
    let m = run.report.metrics_for(0.2, PlannerMode::ArgmaxNoHelp).unwrap();
    assert!(m.coverage.is_none());
    assert_eq!(m.help_rate, 0.0);
    assert_eq!(m.singleton_rate, 1.0);
}

#[test]
fn dataset_conditional_mode_uses_one_calibration() {
    let cfg = ExperimentConfig {
        calibration_size: 60,
        trials: 10,
        dataset_conditional: Some(DatasetConditionalSpec {
            delta: 0.1,
            target: 0.9,
        }),
        ..ExperimentConfig::new(3)
    };
    let run = run_dataset_conditional(&cfg, &RunOptions::default()).unwrap();
    let dc = run.report.dataset_conditional.as_ref().unwrap();
    assert!(dc.coverage_bound >= 0.9);
    assert!(dc.alpha_m < 0.1);
    assert_eq!(run.report.metrics.len(), 1);
    assert!(run
        .report
        .outcomes
        .iter()
        .all(|o| o.q_bar == dc.quantile.value()));

    let tiny = ExperimentConfig {
        calibration_size: 5,
        ..cfg
    };
    let err = run_dataset_conditional(&tiny, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::InfeasibleLevel { .. }));
}

#[test]
fn metrics_csv_has_one_row_per_level_and_mode() {
    let run = run_coverage_experiment(&small(8), &RunOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    write_metrics_csv(std::fs::File::create(&path).unwrap(), &run.report.metrics).unwrap();
    let mut reader = csv::Reader::from_path(&path).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert!(headers.iter().any(|h| h == "help_rate"));
    assert!(headers.iter().all(|h| !h.contains("wall")));
    assert_eq!(reader.records().count(), 2);
}

#[test]
fn config_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.json");
    let mut cfg = small(1);
    cfg.scorer = ScorerSpec::oracle();
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let loaded = ExperimentConfig::load(&path).unwrap();
    assert_eq!(loaded, cfg);
    assert_eq!(loaded.hash(), cfg.hash());
}
