use std::sync::Arc;

use super::*;
use crate::analyzer::{DefaultValue, FeatureSource, FeatureType, Refresh};
use crate::corpus::{
    simulate_run, simulate_run_at, CorpusSpec, JobScript, ScannedTable, SimOptions, TableMeta,
};
use crate::evaluation::LoopConfig;
use crate::knowledge::RetrievedHit;
use crate::materializer::{encoded_column_names, fit_normalize, materialize_matrix};
use crate::modeling::{load_bundle, train_linear, BundleManifest};

fn table(name: &str, bytes: u64) -> TableMeta {
    TableMeta {
        name: name.into(),
        total_bytes: bytes,
        row_count: 1_000,
        partition_count: 8,
        partition_column: "ds".into(),
        key_cardinality: 5,
        zipf_exponent: 1.0,
    }
}

fn config(name: &str, workers: u32, price: f64) -> ClusterConfig {
    ClusterConfig {
        instance_name: name.into(),
        workers,
        per_worker_throughput_bps: 5.0e7,
        network_bw_bps: 1.0e8,
        photon_factor: 1.0,
        price_per_second: price,
    }
}

/// Pure scan job: no join or group-by, so the simulator's duration is
/// exactly t0 + bytes * selectivity / (workers * throughput).
fn scan_job(id: &str, table: &str) -> JobScript {
    JobScript {
        job_id: id.into(),
        sql_text: format!("SELECT * FROM {table}"),
        scanned_tables: vec![ScannedTable { table: table.into(), selectivity: 1.0 }],
        has_group_by: false,
        has_join: false,
        amplification: 0.0,
        skew_table: None,
    }
}

/// Two jobs an order of magnitude apart in scan volume, over a fleet
/// where the big config is five times the price of the small one.
fn fixture() -> HistoryDataset {
    HistoryDataset {
        catalog: vec![table("t1", 5_000_000_000), table("t2", 40_000_000_000)],
        fleet: vec![config("small2", 2, 0.004), config("big8", 8, 0.02)],
        jobs: vec![scan_job("j1", "t1"), scan_job("j2", "t2")],
        runs: vec![],
    }
}

/// The scan term of the duration law, written in the extractor language
/// against prerun-available tools only. With the fixture's throughput the
/// true duration is exactly 20 + this feature.
fn physics_spec() -> FeatureSpec {
    FeatureSpec {
        name: "scan_seconds_estimate".into(),
        ftype: FeatureType::Numerical,
        source: FeatureSource::Code,
        extraction_plan: "let s = meta.table_stats(table1);\nlet e = sql.estimate_selectivity(sql, table1);\nlet c = meta.cluster_config(job);\nreturn s.total_bytes * e.selectivity / (c.workers * 50000000);\n".into(),
        expected_cost_ms: 150,
        refresh: Refresh::PerRun,
        default_value: DefaultValue::Num(0.0),
        provenance: "handwritten/physics".into(),
        version: "1".into(),
    }
}

fn leaking_spec() -> FeatureSpec {
    FeatureSpec {
        extraction_plan: "let m = log.stage_metrics(current_run);\nreturn sum(m.wall_seconds);"
            .into(),
        name: "leaky".into(),
        ..physics_spec()
    }
}

/// Trains an exact ridge predictor on all job x config combinations and
/// wraps it as an in-memory bundle against the given registry.
fn trained_bundle(
    ds: &HistoryDataset,
    registry: &ToolRegistry,
    policy: &ExecutionPolicy,
) -> ModelBundle {
    let specs = vec![physics_spec()];
    let pairs: Vec<(FeatureSpec, GatedProgram)> = specs
        .iter()
        .map(|s| (s.clone(), gate_program(s, registry, policy).unwrap()))
        .collect();
    let mut artifacts = Vec::new();
    let mut labels = Vec::new();
    for job in &ds.jobs {
        for cfg in &ds.fleet {
            let artifact =
                JobArtifact::for_scheduling(ds, &job.job_id, cfg.clone(), 0).unwrap();
            let run = simulate_run(job, cfg, &ds.catalog, 7, true).unwrap();
            labels.push(run.duration_seconds);
            artifacts.push((format!("{}_{}", job.job_id, cfg.instance_name), artifact));
        }
    }
    let raw = materialize_matrix(&pairs, &artifacts, registry, policy, "snap-train");
    let (matrix, stats) = fit_normalize(&raw, &specs).unwrap();
    let model =
        train_linear(&matrix.rows, &labels, &encoded_column_names(&stats), 0.0).unwrap();
    ModelBundle {
        manifest: BundleManifest {
            bundle_version: 1,
            feature_version: crate::materializer::schema_version(&specs),
            tool_version: registry.toolset_version(),
            data_snapshot_id: "snap-train".into(),
            content_hash: String::new(),
        },
        model,
        specs,
        norm_stats: stats,
    }
}

fn scheduling_artifact(ds: &HistoryDataset, job_id: &str) -> JobArtifact {
    JobArtifact::for_scheduling(ds, job_id, ds.fleet[0].clone(), 0).unwrap()
}

fn full_context() -> RetrievedContext {
    RetrievedContext {
        hits: ["selectivity", "plan", "scan", "shuffle"]
            .iter()
            .map(|t| RetrievedHit {
                doc_id: format!("doc-{t}"),
                score: 1.0,
                snippet: String::new(),
                tags: vec![t.to_string()],
            })
            .collect(),
    }
}

#[test]
fn identical_windows_raise_no_drift() {
    let residuals: Vec<f64> = (0..40).map(|i| (i as f64 - 20.0) / 7.0).collect();
    let window: Vec<f64> = (0..100).map(|i| i as f64).collect();
    let signals = detect_drift(
        &residuals,
        &residuals.clone(),
        &[("f".into(), window.clone(), window)],
        &DriftThresholds::default(),
    );
    assert_eq!(signals.len(), 2);
    assert_eq!(signals[0].kind, DriftKind::Residual);
    assert!((signals[0].statistic - 1.0).abs() < 1e-12);
    assert!(!signals[0].triggered);
    assert_eq!(signals[1].kind, DriftKind::FeatureShift);
    assert_eq!(signals[1].feature.as_deref(), Some("f"));
    // A distribution compared against itself has exactly zero shift.
    assert_eq!(signals[1].statistic, 0.0);
    assert!(!signals[1].triggered);
}

#[test]
fn residual_rule_fires_at_the_ratio_threshold() {
    let reference = vec![1.0, -1.0, 1.0, -1.0];
    let doubled = vec![2.0, -2.0, 2.0, -2.0];
    let signals = detect_drift(&reference, &doubled, &[], &DriftThresholds::default());
    assert!((signals[0].statistic - 2.0).abs() < 1e-12);
    assert!(signals[0].triggered);

    let mild = vec![1.2, -1.2, 1.2, -1.2];
    let signals = detect_drift(&reference, &mild, &[], &DriftThresholds::default());
    assert!((signals[0].statistic - 1.2).abs() < 1e-12);
    assert!(!signals[0].triggered);
}

#[test]
fn residual_rule_survives_a_perfect_reference_fit() {
    let zero = vec![0.0; 10];
    let signals = detect_drift(&zero, &zero, &[], &DriftThresholds::default());
    assert!((signals[0].statistic - 1.0).abs() < 1e-12);
    assert!(!signals[0].triggered);

    let worse = vec![0.5; 10];
    let signals = detect_drift(&zero, &worse, &[], &DriftThresholds::default());
    assert!(signals[0].statistic.is_infinite());
    assert!(signals[0].triggered);
}

#[test]
fn shifted_feature_distribution_trips_the_psi_rule() {
    let reference: Vec<f64> = (0..100).map(|i| i as f64).collect();
    let shifted: Vec<f64> = reference.iter().map(|v| v + 87.0).collect();
    let signals = detect_drift(
        &[1.0],
        &[1.0],
        &[("moved".into(), reference.clone(), shifted), ("same".into(), reference.clone(), reference)],
        &DriftThresholds::default(),
    );
    let moved = &signals[1];
    assert!(moved.statistic > 0.2, "psi {}", moved.statistic);
    assert!(moved.triggered);
    assert!(!signals[2].triggered);
}

#[test]
fn scheduled_refresh_fires_past_the_period() {
    let due = DriftSignal::scheduled(169.0, 168.0);
    assert_eq!(due.kind, DriftKind::Scheduled);
    assert!(due.triggered);
    assert_eq!(due.statistic, 169.0);
    assert_eq!(due.threshold, 168.0);
    assert!(!DriftSignal::scheduled(100.0, 168.0).triggered);
}

#[test]
fn simulator_matches_hand_physics_on_the_fixture() {
    let ds = fixture();
    let w2 = &ds.fleet[0];
    let w8 = &ds.fleet[1];
    let j1 = &ds.jobs[0];
    // 20 + 5e9 / (2 * 5e7) and 20 + 5e9 / (8 * 5e7).
    let run = simulate_run(j1, w2, &ds.catalog, 3, true).unwrap();
    assert_eq!(run.duration_seconds, 70.0);
    let run = simulate_run(j1, w8, &ds.catalog, 3, true).unwrap();
    assert_eq!(run.duration_seconds, 32.5);
}

#[test]
fn orchestrate_picks_the_cheapest_feasible_config() {
    let ds = fixture();
    let registry = builtin_registry(Arc::new(ds.clone()));
    let policy = standard_policy(&registry);
    let bundle = trained_bundle(&ds, &registry, &policy);
    let artifact = scheduling_artifact(&ds, "j1");

    let decision =
        orchestrate(&artifact, &ds.fleet, &bundle, &registry, &policy, 100.0).unwrap();
    assert_eq!(decision.chosen.instance_name, "small2");
    assert!(decision.feasible);
    assert_eq!(decision.job_id, "j1");
    assert_eq!(decision.candidates.len(), 2);
    let small = &decision.candidates[0];
    let big = &decision.candidates[1];
    assert!((small.predicted_seconds - 70.0).abs() < 1e-6);
    assert!((big.predicted_seconds - 32.5).abs() < 1e-6);
    assert!((small.predicted_cost - 0.28).abs() < 1e-6);
    assert!((big.predicted_cost - 0.65).abs() < 1e-6);
    assert!(small.feasible && big.feasible);
}

#[test]
fn orchestrate_meets_the_slo_before_minimizing_cost() {
    let ds = fixture();
    let registry = builtin_registry(Arc::new(ds.clone()));
    let policy = standard_policy(&registry);
    let bundle = trained_bundle(&ds, &registry, &policy);
    let artifact = scheduling_artifact(&ds, "j1");

    // The cheap config would run 70s, past the 40s SLO.
    let decision =
        orchestrate(&artifact, &ds.fleet, &bundle, &registry, &policy, 40.0).unwrap();
    assert_eq!(decision.chosen.instance_name, "big8");
    assert!(decision.feasible);
    assert!(!decision.candidates[0].feasible);
}

#[test]
fn orchestrate_falls_back_to_the_fastest_when_nothing_fits() {
    let ds = fixture();
    let registry = builtin_registry(Arc::new(ds.clone()));
    let policy = standard_policy(&registry);
    let bundle = trained_bundle(&ds, &registry, &policy);
    let artifact = scheduling_artifact(&ds, "j1");

    let decision =
        orchestrate(&artifact, &ds.fleet, &bundle, &registry, &policy, 10.0).unwrap();
    assert_eq!(decision.chosen.instance_name, "big8");
    assert!(!decision.feasible);
    assert!(decision.candidates.iter().all(|c| !c.feasible));
}

#[test]
fn orchestrate_handles_a_fleet_of_one() {
    let ds = fixture();
    let registry = builtin_registry(Arc::new(ds.clone()));
    let policy = standard_policy(&registry);
    let bundle = trained_bundle(&ds, &registry, &policy);
    let artifact = scheduling_artifact(&ds, "j1");

    let lone = vec![ds.fleet[0].clone()];
    let decision = orchestrate(&artifact, &lone, &bundle, &registry, &policy, 1000.0).unwrap();
    assert_eq!(decision.chosen.instance_name, "small2");
    assert_eq!(decision.candidates.len(), 1);
}

#[test]
fn orchestrate_breaks_exact_ties_by_instance_name() {
    let ds = fixture();
    let registry = builtin_registry(Arc::new(ds.clone()));
    let policy = standard_policy(&registry);
    let bundle = trained_bundle(&ds, &registry, &policy);
    let artifact = scheduling_artifact(&ds, "j1");

    // Identical physics and price; only the name differs.
    let twins = vec![config("b4", 4, 0.01), config("a4", 4, 0.01)];
    let decision = orchestrate(&artifact, &twins, &bundle, &registry, &policy, 1000.0).unwrap();
    assert_eq!(decision.chosen.instance_name, "a4");
}

#[test]
fn orchestrate_refuses_an_empty_fleet() {
    let ds = fixture();
    let registry = builtin_registry(Arc::new(ds.clone()));
    let policy = standard_policy(&registry);
    let bundle = trained_bundle(&ds, &registry, &policy);
    let artifact = scheduling_artifact(&ds, "j1");

    let err = orchestrate(&artifact, &[], &bundle, &registry, &policy, 100.0).unwrap_err();
    assert!(matches!(err, LifecycleError::EmptyFleet));
}

#[test]
fn orchestrate_refuses_a_bundle_from_another_toolset() {
    let ds = fixture();
    let registry = builtin_registry(Arc::new(ds.clone()));
    let policy = standard_policy(&registry);
    let mut bundle = trained_bundle(&ds, &registry, &policy);
    bundle.manifest.tool_version = "toolset-from-elsewhere".into();
    let artifact = scheduling_artifact(&ds, "j1");

    let err = orchestrate(&artifact, &ds.fleet, &bundle, &registry, &policy, 100.0).unwrap_err();
    match err {
        LifecycleError::SchemaIncompatible(msg) => assert!(msg.contains("toolset")),
        other => panic!("expected SchemaIncompatible, got {other}"),
    }
}

#[test]
fn bundle_pairs_regate_and_catch_a_leaking_spec() {
    let ds = fixture();
    let registry = builtin_registry(Arc::new(ds.clone()));
    let policy = standard_policy(&registry);
    let mut bundle = trained_bundle(&ds, &registry, &policy);
    // A bundle assembled elsewhere claims a postrun extractor; the live
    // gates must refuse it even though the toolset version matches.
    bundle.specs = vec![leaking_spec()];

    let err = bundle_pairs(&bundle, &registry, &policy).unwrap_err();
    match err {
        LifecycleError::SchemaIncompatible(msg) => {
            assert!(msg.contains("leaky"), "{msg}");
            assert!(msg.contains("POSTRUN_CURRENT"), "{msg}");
        }
        other => panic!("expected SchemaIncompatible, got {other}"),
    }
}

#[test]
fn orchestrated_assignments_cost_no_more_than_a_feasible_fixed_fleet() {
    let ds = fixture();
    let registry = builtin_registry(Arc::new(ds.clone()));
    let policy = standard_policy(&registry);
    let bundle = trained_bundle(&ds, &registry, &policy);

    // Under a 150s SLO the small config is fine for j1 (70s) but not for
    // j2 (420s), so per-job routing mixes the fleet.
    let mut chosen = Vec::new();
    for job in &ds.jobs {
        let artifact = scheduling_artifact(&ds, &job.job_id);
        let decision =
            orchestrate(&artifact, &ds.fleet, &bundle, &registry, &policy, 150.0).unwrap();
        assert!(decision.feasible);
        chosen.push((job.job_id.clone(), decision.chosen));
    }
    assert_eq!(chosen[0].1.instance_name, "small2");
    assert_eq!(chosen[1].1.instance_name, "big8");

    let routed = assignment_cost(&ds, &chosen, 5).unwrap();
    // 0.004 * 70 + 0.02 * 120.
    assert!((routed - 2.68).abs() < 1e-9, "routed {routed}");

    let all_big: Vec<_> =
        ds.jobs.iter().map(|j| (j.job_id.clone(), ds.fleet[1].clone())).collect();
    let fixed_big = assignment_cost(&ds, &all_big, 5).unwrap();
    assert!((fixed_big - 3.05).abs() < 1e-9);
    assert!(routed <= fixed_big);

    // With a loose SLO everything is feasible and routing converges on
    // the cheapest fleet member for every job.
    let mut loose = Vec::new();
    for job in &ds.jobs {
        let artifact = scheduling_artifact(&ds, &job.job_id);
        let decision =
            orchestrate(&artifact, &ds.fleet, &bundle, &registry, &policy, 10_000.0).unwrap();
        loose.push((job.job_id.clone(), decision.chosen));
    }
    let routed_loose = assignment_cost(&ds, &loose, 5).unwrap();
    let all_small: Vec<_> =
        ds.jobs.iter().map(|j| (j.job_id.clone(), ds.fleet[0].clone())).collect();
    let fixed_small = assignment_cost(&ds, &all_small, 5).unwrap();
    assert!((routed_loose - fixed_small).abs() < 1e-9);
    assert!(routed_loose <= fixed_big);
}

#[test]
fn cost_saving_matches_hand_numbers() {
    let report = cost_saving(52.6, 42.6).unwrap();
    assert!((report.saving_rate - 0.19011).abs() < 5e-5);

    let flat = cost_saving(10.0, 10.0).unwrap();
    assert_eq!(flat.saving_rate, 0.0);

    let worse = cost_saving(10.0, 12.0).unwrap();
    assert!((worse.saving_rate + 0.2).abs() < 1e-12);

    assert!(matches!(cost_saving(0.0, 5.0), Err(LifecycleError::ZeroInitialCost)));
    assert!(matches!(cost_saving(-1.0, 5.0), Err(LifecycleError::ZeroInitialCost)));
}

#[test]
fn decision_log_appends_one_json_line_per_decision() {
    let ds = fixture();
    let registry = builtin_registry(Arc::new(ds.clone()));
    let policy = standard_policy(&registry);
    let bundle = trained_bundle(&ds, &registry, &policy);
    let artifact = scheduling_artifact(&ds, "j1");
    let first = orchestrate(&artifact, &ds.fleet, &bundle, &registry, &policy, 100.0).unwrap();
    let second = orchestrate(&artifact, &ds.fleet, &bundle, &registry, &policy, 40.0).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("decisions.jsonl");
    append_decision_log(&path, &first).unwrap();
    append_decision_log(&path, &second).unwrap();

    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let replayed: OrchestrationDecision = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(replayed, first);
    let replayed: OrchestrationDecision = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(replayed, second);
}

#[test]
fn snapshot_bump_invalidates_the_extraction_cache() {
    let ds = fixture();
    let registry = builtin_registry(Arc::new(ds.clone()));
    let policy = standard_policy(&registry);
    let spec = physics_spec();
    let pairs = vec![(spec.clone(), gate_program(&spec, &registry, &policy).unwrap())];
    let artifact = scheduling_artifact(&ds, "j1");
    let version = crate::materializer::schema_version(&[spec]);

    let key_one = cache_key_for(&artifact, "s1", &version, &registry);
    let cold = materialize(&pairs, &artifact, &registry, &policy, &key_one);
    let after_cold = registry.call_log().len();
    let warm = materialize(&pairs, &artifact, &registry, &policy, &key_one);
    let log = registry.call_log();
    assert_eq!(cold, warm);
    assert!(log[after_cold..].iter().all(|e| e.from_cache));

    let key_two = cache_key_for(&artifact, "s2", &version, &registry);
    let after_warm = log.len();
    let reextracted = materialize(&pairs, &artifact, &registry, &policy, &key_two);
    let log = registry.call_log();
    assert!(log[after_warm..].iter().any(|e| !e.from_cache));
    assert_eq!(cold.get("scan_seconds_estimate"), reextracted.get("scan_seconds_estimate"));
}

#[test]
fn retrain_bumps_the_version_and_replays_exactly() {
    let ds = CorpusSpec { seed: 11, n_tables: 6, n_jobs: 6, runs_per_job: 6, noiseless: false }
        .generate()
        .unwrap();
    let cfg = LoopConfig { max_iterations: 1, ..LoopConfig::default() };
    let ctx = full_context();

    let dir_one = tempfile::tempdir().unwrap();
    let first =
        update_and_retrain(&ds, &[], &cfg, &ctx, "snap-7", 3, dir_one.path()).unwrap();
    assert_eq!(first.bundle.manifest.bundle_version, 4);
    assert_eq!(first.dataset.runs.len(), ds.runs.len());
    assert_eq!(first.log.iterations.len(), 1);

    // The packaged directory loads back under full verification.
    let reloaded = load_bundle(dir_one.path()).unwrap();
    assert_eq!(reloaded.model, first.bundle.model);
    assert_eq!(reloaded.manifest, first.bundle.manifest);

    let dir_two = tempfile::tempdir().unwrap();
    let second =
        update_and_retrain(&ds, &[], &cfg, &ctx, "snap-7", 3, dir_two.path()).unwrap();
    assert_eq!(second.bundle.model, first.bundle.model);
    assert_eq!(second.bundle.manifest.content_hash, first.bundle.manifest.content_hash);
}

#[test]
fn retrain_refuses_a_duplicate_run_id() {
    let ds = CorpusSpec { seed: 11, n_tables: 4, n_jobs: 3, runs_per_job: 2, noiseless: true }
        .generate()
        .unwrap();
    let cfg = LoopConfig { max_iterations: 1, ..LoopConfig::default() };
    let replay = vec![ds.runs[0].clone()];

    let dir = tempfile::tempdir().unwrap();
    let err = update_and_retrain(&ds, &replay, &cfg, &full_context(), "s", 0, dir.path())
        .unwrap_err();
    match err {
        LifecycleError::Corpus(CorpusError::Invalid { kind, field, .. }) => {
            assert_eq!(kind, "run");
            assert_eq!(field, "run_id");
        }
        other => panic!("expected duplicate-run error, got {other}"),
    }
}

#[test]
fn retrain_folds_new_runs_into_visible_history() {
    let ds = CorpusSpec { seed: 11, n_tables: 6, n_jobs: 6, runs_per_job: 6, noiseless: false }
        .generate()
        .unwrap();
    let job = ds.jobs[0].clone();
    let last_start = ds.runs.iter().map(|r| r.started_at).max().unwrap();
    let fresh = simulate_run_at(
        &job,
        &ds.fleet[0],
        &ds.catalog,
        991,
        false,
        "fresh_1",
        last_start + 86_400,
        SimOptions::default(),
    )
    .unwrap();

    let cfg = LoopConfig { max_iterations: 1, ..LoopConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let outcome = update_and_retrain(
        &ds,
        &[fresh.clone()],
        &cfg,
        &full_context(),
        "snap-8",
        0,
        dir.path(),
    )
    .unwrap();

    assert_eq!(outcome.dataset.runs.len(), ds.runs.len() + 1);
    assert_eq!(outcome.dataset.run("fresh_1").unwrap().job_id, job.job_id);
    // History is ordered, so the new run is the latest prior run for the
    // next scheduling decision on this job.
    let next = JobArtifact::for_scheduling(
        &outcome.dataset,
        &job.job_id,
        ds.fleet[0].clone(),
        fresh.started_at + 1,
    )
    .unwrap();
    assert_eq!(next.prior_runs.last().unwrap().run_id, "fresh_1");
}

#[test]
fn retrain_rejects_a_run_for_an_unknown_job() {
    let ds = CorpusSpec { seed: 11, n_tables: 4, n_jobs: 3, runs_per_job: 2, noiseless: true }
        .generate()
        .unwrap();
    let mut orphan = ds.runs[0].clone();
    orphan.run_id = "orphan_1".into();
    orphan.job_id = "no_such_job".into();

    let cfg = LoopConfig { max_iterations: 1, ..LoopConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let err = update_and_retrain(&ds, &[orphan], &cfg, &full_context(), "s", 0, dir.path())
        .unwrap_err();
    assert!(matches!(err, LifecycleError::Corpus(CorpusError::UnknownJob(id)) if id == "no_such_job"));
}
