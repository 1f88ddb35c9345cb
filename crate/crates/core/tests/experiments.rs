use spdelab::experiments::{
    read_records, records_path, records_to_csv, run_consistency, run_experiment, run_experiment_with_threads,
    run_fisher_efficiency, run_normality, run_rate_verification, summarize, summary_path, write_outputs,
    ExperimentConfig, ExperimentError, ExperimentKind, SweepPoint,
};
use spdelab::spectral::ModelParams;

fn model(sigma: f64) -> ModelParams {
    ModelParams::new(1.0, 0.6, 0.6, sigma, 1)
}

fn small(kind: ExperimentKind, sigma: f64, sweep: Vec<SweepPoint>, replications: usize) -> ExperimentConfig {
    let mut config = ExperimentConfig::new("t", kind, model(sigma), sweep);
    config.replications = replications;
    config.oversample = 4;
    config.master_seed = 17;
    config
}

fn rates_config(sigma: f64, replications: usize) -> ExperimentConfig {
    let mut config = small(ExperimentKind::Rates, sigma, vec![SweepPoint::new(4, 1 << 9, 1.0)], replications);
    config.ladder = vec![8, 16, 32, 64];
    config
}

/// Largest absolute difference between numbers at matching JSON positions;
/// panics on any structural mismatch.
fn json_distance(a: &serde_json::Value, b: &serde_json::Value) -> f64 {
    use serde_json::Value::*;
    match (a, b) {
        (Number(x), Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            (x - y).abs() / x.abs().max(1.0)
        }
        (Array(x), Array(y)) => {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| json_distance(p, q)).fold(0.0, f64::max)
        }
        (Object(x), Object(y)) => {
            assert_eq!(x.len(), y.len());
            x.iter().map(|(k, v)| json_distance(v, &y[k])).fold(0.0, f64::max)
        }
        _ => {
            assert_eq!(a, b);
            0.0
        }
    }
}

#[test]
fn noiseless_normality_is_flagged_degenerate() {
    let mut config = small(ExperimentKind::Normality, 0.0, vec![SweepPoint::new(3, 40, 1.0)], 200);
    config.model = config.model.with_initial_modes(vec![1.0, 0.5, -2.0]);
    let out = run_normality(&config).unwrap();
    let z: Vec<f64> = out.records.iter().map(|r| r.z_score.unwrap()).collect();
    assert!(z.iter().all(|v| *v == z[0]));
    let p = &out.summary.points[0];
    assert_eq!(p.ks_note.as_deref(), Some("degenerate"));
    assert!(p.ks.unwrap().p_value < 1e-6);
}

#[test]
fn single_replication_marks_ks_insufficient() {
    let config = small(ExperimentKind::Normality, 1.0, vec![SweepPoint::new(3, 40, 1.0)], 1);
    let out = run_normality(&config).unwrap();
    assert_eq!(out.records.len(), 1);
    let p = &out.summary.points[0];
    assert!(p.ks.is_none());
    assert_eq!(p.ks_note.as_deref(), Some("insufficient-sample"));
}

#[test]
fn noiseless_consistency_bias_is_closed_form() {
    let theta0 = 1.3;
    let mut config = small(ExperimentKind::Consistency, 0.0, vec![SweepPoint::new(1, 25, 2.0)], 3);
    config.model = ModelParams::new(theta0, 0.6, 0.6, 0.0, 1).with_initial_modes(vec![1.0]);
    let out = run_consistency(&config).unwrap();
    let dt = 2.0 / 25.0;
    let expected = -(-theta0 * dt).exp_m1() / dt - theta0;
    let bias = out.summary.points[0].bias;
    assert!((bias - expected).abs() < 1e-8, "{bias} vs {expected}");
}

#[test]
fn all_degenerate_replications_abort_the_run() {
    let config = small(ExperimentKind::Consistency, 0.0, vec![SweepPoint::new(2, 10, 1.0)], 5);
    match run_consistency(&config) {
        Err(ExperimentError::TooManyFailures { failed, total, .. }) => assert_eq!((failed, total), (5, 5)),
        other => panic!("expected an abort, got {other:?}"),
    }
}

#[test]
fn kind_mismatch_is_rejected() {
    let config = small(ExperimentKind::Normality, 1.0, vec![SweepPoint::new(2, 10, 1.0)], 2);
    assert!(matches!(run_fisher_efficiency(&config), Err(ExperimentError::Invalid { .. })));
}

#[test]
fn noiseless_rates_skip_the_y_fit() {
    let mut config = rates_config(0.0, 2);
    config.model = config.model.with_initial_modes(vec![1.0; 4]);
    let out = run_rate_verification(&config).unwrap();
    let rates = &out.summary.rates[0];
    assert!(rates.levels.iter().all(|l| l.y_discrepancy == 0.0));
    assert!(rates.y.fit.is_none());
    assert!(rates.y.skipped.is_some());
    assert!(rates.i.fit.is_some());
}

#[test]
fn quadrupling_replications_halves_standard_errors() {
    // squared discrepancies are heavy tailed, so the standard errors need R in the thousands to settle
    let small_run = run_rate_verification(&rates_config(1.0, 1000)).unwrap();
    let large_run = run_rate_verification(&rates_config(1.0, 4000)).unwrap();
    let (a, b) = (&small_run.summary.rates[0], &large_run.summary.rates[0]);
    for (x, y) in a.levels.iter().zip(&b.levels) {
        for (se_small, se_large) in [
            (x.y_standard_error, y.y_standard_error),
            (x.i_standard_error, y.i_standard_error),
            (x.v_standard_error, y.v_standard_error),
        ] {
            let ratio = se_small / se_large;
            assert!((ratio / 2.0 - 1.0).abs() < 0.3, "M={}: ratio {ratio}", x.observations);
        }
    }
}

#[test]
fn fisher_product_is_free_of_sigma() {
    let sweep = vec![SweepPoint::new(5, 500, 2.0)];
    let product = |sigma| {
        let out = run_fisher_efficiency(&small(ExperimentKind::Fisher, sigma, sweep.clone(), 200)).unwrap();
        out.summary.points[0].variance_fisher_product
    };
    let (one, two) = (product(1.0), product(2.0));
    assert!((two / one - 1.0).abs() < 0.15, "{one} vs {two}");
}

#[test]
fn few_replications_are_low_precision() {
    let out = run_fisher_efficiency(&small(ExperimentKind::Fisher, 1.0, vec![SweepPoint::new(3, 100, 1.0)], 10))
        .unwrap();
    assert!(out.summary.points[0].low_precision);
}

#[test]
fn empty_records_give_a_header_only_csv() {
    let bytes = records_to_csv(&[]).unwrap();
    assert_eq!(
        String::from_utf8(bytes).unwrap(),
        "experiment_id,N,M,T,replication,estimator,theta_hat,z_score,Y_coarse,Y_fine,I_coarse,I_fine,V,seed\n"
    );

    let config = small(ExperimentKind::Normality, 1.0, vec![SweepPoint::new(2, 10, 1.0)], 2);
    let out = run_normality(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (csv, _) = write_outputs(&[], &out.summary, dir.path()).unwrap();
    assert_eq!(read_records(&csv).unwrap().len(), 0);
}

#[test]
fn csv_round_trip_reproduces_the_summary() {
    let mut normality = small(
        ExperimentKind::Normality,
        1.0,
        vec![SweepPoint::new(4, 60, 1.0), SweepPoint::new(6, 80, 1.5)],
        30,
    );
    normality.estimator = spdelab::experiments::EstimatorChoice::Both;
    for config in [normality, rates_config(1.0, 30)] {
        let out = run_experiment(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&out.records, &out.summary, dir.path()).unwrap();
        let parsed = read_records(&records_path(dir.path(), &config.id)).unwrap();
        assert_eq!(parsed.len(), out.records.len());
        let again = summarize(&config, &parsed, out.summary.threads, out.summary.warnings.clone()).unwrap();
        let stored: serde_json::Value =
            serde_json::from_slice(&std::fs::read(summary_path(dir.path(), &config.id)).unwrap()).unwrap();
        let recomputed = serde_json::to_value(&again).unwrap();
        assert!(json_distance(&stored, &recomputed) < 1e-9);
    }
}

#[test]
fn record_files_are_identical_across_thread_counts() {
    let config = small(
        ExperimentKind::Consistency,
        1.0,
        vec![SweepPoint::new(5, 50, 1.0), SweepPoint::new(10, 100, 2.0)],
        25,
    );
    let dir = tempfile::tempdir().unwrap();
    let files: Vec<Vec<u8>> = [1, 3, 8]
        .iter()
        .map(|&threads| {
            let out = run_experiment_with_threads(&config, Some(threads)).unwrap();
            let sub = dir.path().join(threads.to_string());
            let (csv, _) = write_outputs(&out.records, &out.summary, &sub).unwrap();
            std::fs::read(csv).unwrap()
        })
        .collect();
    assert!(files.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn rmse_splits_into_bias_and_variance() {
    let config = small(ExperimentKind::Consistency, 1.0, vec![SweepPoint::new(4, 40, 1.0)], 50);
    let out = run_consistency(&config).unwrap();
    let p = &out.summary.points[0];
    let n = p.successes as f64;
    let rhs = p.bias * p.bias + (n - 1.0) / n * p.empirical_variance;
    assert!((p.rmse * p.rmse / rhs - 1.0).abs() < 1e-12);
}

#[test]
fn summary_ignores_record_order() {
    let config = small(ExperimentKind::Normality, 1.0, vec![SweepPoint::new(4, 40, 1.0)], 40);
    let out = run_normality(&config).unwrap();
    let mut reversed = out.records.clone();
    reversed.reverse();
    let again = summarize(&config, &reversed, out.summary.threads, Vec::new()).unwrap();
    let (a, b) = (&out.summary.points[0], &again.points[0]);
    assert!((a.mean - b.mean).abs() < 1e-12);
    assert!((a.rmse - b.rmse).abs() < 1e-12);
    assert_eq!(a.ks.unwrap().statistic, b.ks.unwrap().statistic);
}

#[test]
fn condition_values_are_plain_arithmetic() {
    let config = small(ExperimentKind::Normality, 1.0, vec![SweepPoint::new(20, 10_000, 5.0)], 2);
    let out = run_normality(&config).unwrap();
    let c = out.summary.points[0].conditions;
    // N^{1.2} = 36.41, N^{2.4} = 1325.9, N^{3.6} = 48275
    let n12 = 20f64.powf(1.2);
    assert!((c.normality_linear - 5.0 * n12 / 1e4).abs() < 1e-15);
    assert!((c.normality_linear - 0.018205).abs() < 1e-5);
    assert!((c.normality_cubic - 125.0 * n12.powi(3) / 1e8).abs() < 1e-12);
    assert!((c.consistency - 25.0 * 20f64.powf(1.4) / 1e8).abs() < 1e-15);
}

#[test]
fn invalid_configs_name_the_field() {
    let mut config = small(ExperimentKind::Rates, 1.0, vec![SweepPoint::new(4, 100, 1.0)], 2);
    config.ladder = vec![3, 5, 10, 20];
    match config.validate() {
        Err(ExperimentError::Invalid { field, .. }) => assert_eq!(field, "grid.ladder"),
        other => panic!("{other:?}"),
    }
    config.model.theta0 = 0.0;
    match config.validate() {
        Err(ExperimentError::Invalid { field, .. }) => assert_eq!(field, "model.theta0"),
        other => panic!("{other:?}"),
    }
}
