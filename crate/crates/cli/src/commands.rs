//! The six subcommands. Each returns `Ok(())` for exit 0, a usage
//! failure for exit 2, or a runtime failure for exit 1.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use serde::Serialize;
use serde_json::json;

use jotforge_core::analyzer::TemplatePlanner;
use jotforge_core::corpus::{
    load_corpus, save_corpus, ClusterConfig, CorpusSpec, HistoryDataset, JobArtifact,
};
use jotforge_core::evaluation::{training_rows, write_iteration_log, IterationLog, LoopContext};
use jotforge_core::knowledge::{seed_kb, workload_context, KnowledgeBase};
use jotforge_core::lifecycle::{
    append_decision_log, assignment_cost, bundle_pairs, cost_saving, orchestrate as decide,
    predict_with_pairs, OrchestrationDecision,
};
use jotforge_core::materializer::schema_version;
use jotforge_core::modeling::{
    load_bundle, metrics, package_bundle, BundleManifest, ManifestFields, ModelBundle,
};
use jotforge_core::toolchain::{builtin_registry, standard_policy, ExecutionPolicy, ToolRegistry};

use crate::config::PipelineConfig;
use crate::{usage, EvaluateArgs, Failure, Format, GenCorpusArgs, OrchestrateArgs, PredictArgs, ReportArgs, TrainArgs};

fn load_dataset(dir: &Path) -> Result<HistoryDataset, Failure> {
    Ok(load_corpus(dir).with_context(|| format!("loading corpus from {}", dir.display()))?)
}

fn open_bundle(dir: &Path) -> Result<ModelBundle, Failure> {
    Ok(load_bundle(dir).with_context(|| format!("loading bundle from {}", dir.display()))?)
}

fn substrate(dataset: &HistoryDataset) -> (ToolRegistry, ExecutionPolicy) {
    let registry = builtin_registry(Arc::new(dataset.clone()));
    let policy = standard_policy(&registry);
    (registry, policy)
}

fn corpus_dir<'a>(
    flag: Option<&'a Path>,
    config: Option<&'a Path>,
) -> Result<&'a Path, Failure> {
    flag.or(config)
        .ok_or_else(|| usage("no corpus directory: pass --corpus or set corpus_dir in the config"))
}

fn knowledge(config: &PipelineConfig) -> Result<KnowledgeBase, Failure> {
    match &config.knowledge_base {
        None => Ok(seed_kb()),
        Some(path) => Ok(KnowledgeBase::load_jsonl(path)
            .with_context(|| format!("loading knowledge base from {}", path.display()))?),
    }
}

fn print_json(value: &impl Serialize) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?);
    Ok(())
}

pub fn gen_corpus(mut config: PipelineConfig, args: &GenCorpusArgs) -> Result<(), Failure> {
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let defaults = CorpusSpec::default();
    let spec = CorpusSpec {
        seed: config.seed,
        n_tables: args.tables.unwrap_or(defaults.n_tables),
        n_jobs: args.jobs.unwrap_or(defaults.n_jobs),
        runs_per_job: args.runs.unwrap_or(defaults.runs_per_job),
        noiseless: args.noiseless,
    };
    let dataset = spec.generate()?;
    save_corpus(&dataset, &args.out)
        .with_context(|| format!("writing corpus to {}", args.out.display()))?;
    println!(
        "corpus: {} tables, {} jobs, {} runs, seed {} -> {}",
        dataset.catalog.len(),
        dataset.jobs.len(),
        dataset.runs.len(),
        spec.seed,
        args.out.display()
    );
    Ok(())
}

fn iteration_table(log: &IterationLog) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<5} {:>8} {:>8} {:>10} {:>8} {:>10} {:>8}  {}\n",
        "iter", "features", "cost_ms", "mae", "mape", "rmse", "r2", "model"
    ));
    for record in &log.iterations {
        let m = &record.metrics;
        out.push_str(&format!(
            "{:<5} {:>8} {:>8} {:>10.3} {:>8.4} {:>10.3} {:>8.4}  {}\n",
            record.iteration,
            record.selected.len(),
            record.selected_cost_ms,
            m.mae,
            m.mape,
            m.rmse,
            m.r2,
            record.candidate,
        ));
    }
    out.push_str(&format!("stop reason: {:?}\n", log.stop_reason));
    out
}

pub fn train(mut config: PipelineConfig, args: &TrainArgs) -> Result<(), Failure> {
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(v) = args.budget_ms {
        config.budget_ms = v;
    }
    if let Some(v) = args.lambda {
        config.lambda = v;
    }
    if let Some(v) = args.max_iterations {
        config.max_iterations = v;
    }
    if let Some(v) = args.cv_folds {
        config.cv_folds = v;
    }
    config.validate()?;

    let corpus = corpus_dir(args.corpus.as_deref(), config.corpus_dir.as_deref())?;
    let out = args
        .out
        .as_deref()
        .or(config.out_dir.as_deref())
        .ok_or_else(|| usage("no output directory: pass --out or set out_dir in the config"))?;
    let dataset = load_dataset(corpus)?;
    let (registry, policy) = substrate(&dataset);
    let kb = knowledge(&config)?;
    let retrieved = workload_context(&dataset, &kb, 8)?;
    let (rows, labels) = training_rows(&dataset)?;
    let snapshot = args.snapshot.clone().unwrap_or_else(|| "snapshot-1".into());

    let ctx = LoopContext {
        planner: &TemplatePlanner,
        registry: &registry,
        policy: &policy,
        retrieved: &retrieved,
        rows: &rows,
        labels: &labels,
        snapshot_id: &snapshot,
    };
    let outcome = jotforge_core::evaluation::run_iterations(&ctx, &config.loop_config())?;
    write_iteration_log(out, &outcome.log)?;
    let fields = ManifestFields {
        bundle_version: 1,
        feature_version: schema_version(&outcome.fit.specs),
        tool_version: registry.toolset_version(),
        data_snapshot_id: snapshot,
    };
    let bundle_dir = out.join("bundle");
    let bundle = package_bundle(
        &bundle_dir,
        &outcome.fit.model,
        &outcome.fit.specs,
        &outcome.fit.stats,
        &fields,
    )?;

    match args.format {
        Format::Json => print_json(&json!({
            "log": outcome.log,
            "manifest": bundle.manifest,
            "bundle_dir": bundle_dir,
        }))?,
        Format::Text => {
            print!("{}", iteration_table(&outcome.log));
            println!(
                "bundle: {} (version {}, {} features)",
                bundle_dir.display(),
                bundle.manifest.bundle_version,
                bundle.specs.len()
            );
        }
    }
    Ok(())
}

fn instance_config<'a>(
    fleet: &'a [ClusterConfig],
    name: &str,
) -> Result<&'a ClusterConfig, Failure> {
    fleet
        .iter()
        .find(|c| c.instance_name == name)
        .ok_or_else(|| usage(format!("instance `{name}` is not in the fleet")))
}

pub fn predict(config: PipelineConfig, args: &PredictArgs) -> Result<(), Failure> {
    config.validate()?;
    let corpus = corpus_dir(args.corpus.as_deref(), config.corpus_dir.as_deref())?;
    let dataset = load_dataset(corpus)?;
    let (registry, policy) = substrate(&dataset);
    let bundle = open_bundle(&args.bundle)?;

    let (artifact, run_id) = match (&args.run, &args.job) {
        (Some(run_id), _) => {
            let mut artifact = JobArtifact::for_run(&dataset, run_id)?;
            if let Some(name) = &args.instance {
                artifact = artifact.with_config(instance_config(&dataset.fleet, name)?.clone());
            }
            (artifact, Some(run_id.clone()))
        }
        (None, Some(job_id)) => {
            let instance = match &args.instance {
                Some(name) => instance_config(&dataset.fleet, name)?.clone(),
                None => dataset
                    .runs_for_job(job_id)
                    .last()
                    .map(|r| r.config.clone())
                    .unwrap_or_else(|| dataset.fleet[0].clone()),
            };
            let at = args.at.unwrap_or(i64::MAX);
            (JobArtifact::for_scheduling(&dataset, job_id, instance, at)?, None)
        }
        (None, None) => unreachable!("clap requires one of --run / --job"),
    };

    let pairs = bundle_pairs(&bundle, &registry, &policy)?;
    let (seconds, vector) = predict_with_pairs(&artifact, &pairs, &bundle, &registry, &policy)?;

    match args.format {
        Format::Json => {
            let features: BTreeMap<&str, _> =
                vector.values.iter().map(|(name, value)| (name.as_str(), value)).collect();
            print_json(&json!({
                "job_id": artifact.job.job_id,
                "run_id": run_id,
                "instance": artifact.config.instance_name,
                "predicted_seconds": seconds,
                "features": features,
            }))?;
        }
        Format::Text => {
            println!("job: {}", artifact.job.job_id);
            if let Some(run_id) = run_id {
                println!("run: {run_id}");
            }
            println!("instance: {}", artifact.config.instance_name);
            println!("predicted_seconds: {seconds:.3}");
        }
    }
    Ok(())
}

pub fn evaluate(config: PipelineConfig, args: &EvaluateArgs) -> Result<(), Failure> {
    config.validate()?;
    let corpus = corpus_dir(args.corpus.as_deref(), config.corpus_dir.as_deref())?;
    let dataset = load_dataset(corpus)?;
    let (registry, policy) = substrate(&dataset);
    let bundle = open_bundle(&args.bundle)?;
    let pairs = bundle_pairs(&bundle, &registry, &policy)?;

    let mut runs: Vec<_> = dataset.runs.iter().collect();
    runs.sort_by(|a, b| a.started_at.cmp(&b.started_at).then(a.run_id.cmp(&b.run_id)));
    let mut rows = Vec::with_capacity(runs.len());
    let mut actual = Vec::with_capacity(runs.len());
    let mut predicted = Vec::with_capacity(runs.len());
    for run in runs {
        let artifact = JobArtifact::for_run(&dataset, &run.run_id)?;
        let (seconds, _) = predict_with_pairs(&artifact, &pairs, &bundle, &registry, &policy)?;
        actual.push(run.duration_seconds);
        predicted.push(seconds);
        rows.push(json!({
            "run_id": run.run_id,
            "job_id": run.job_id,
            "actual_seconds": run.duration_seconds,
            "predicted_seconds": seconds,
        }));
    }
    let report = metrics(&actual, &predicted)?;

    match args.format {
        Format::Json => print_json(&json!({ "metrics": report, "rows": rows }))?,
        Format::Text => {
            println!("runs: {}", report.n);
            println!("mae:  {:.3}", report.mae);
            println!("mape: {:.4}", report.mape);
            println!("rmse: {:.3}", report.rmse);
            println!("r2:   {:.4}", report.r2);
        }
    }
    Ok(())
}

fn load_fleet(
    path: Option<&Path>,
    dataset: &HistoryDataset,
) -> Result<Vec<ClusterConfig>, Failure> {
    let fleet = match path {
        None => dataset.fleet.clone(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read fleet file {}: {e}", p.display())))?;
            serde_json::from_str::<Vec<ClusterConfig>>(&text)
                .map_err(|e| usage(format!("invalid fleet file {}: {e}", p.display())))?
        }
    };
    if fleet.is_empty() {
        return Err(usage("fleet is empty"));
    }
    for config in &fleet {
        config
            .validate()
            .map_err(|e| usage(format!("invalid fleet config: {e}")))?;
    }
    Ok(fleet)
}

fn print_decision(decision: &OrchestrationDecision) {
    println!(
        "{:<16} {:>8} {:>12} {:>12} {:>12} {:>9}",
        "instance", "workers", "price/s", "predicted_s", "cost", "feasible"
    );
    for c in &decision.candidates {
        println!(
            "{:<16} {:>8} {:>12.5} {:>12.3} {:>12.5} {:>9}",
            c.config.instance_name,
            c.config.workers,
            c.config.price_per_second,
            c.predicted_seconds,
            c.predicted_cost,
            c.feasible,
        );
    }
    let slo = if decision.slo_seconds.is_finite() {
        format!("{:.1}s", decision.slo_seconds)
    } else {
        "unbounded".into()
    };
    println!(
        "chosen: {} for {} (slo {slo}, {})",
        decision.chosen.instance_name,
        decision.job_id,
        if decision.feasible { "meets slo" } else { "no config meets slo; fastest picked" },
    );
}

/// The fixed baseline: the biggest config in the fleet.
fn largest_config(fleet: &[ClusterConfig]) -> &ClusterConfig {
    fleet
        .iter()
        .max_by(|a, b| {
            a.workers
                .cmp(&b.workers)
                .then(a.price_per_second.partial_cmp(&b.price_per_second).unwrap())
                .then(a.instance_name.cmp(&b.instance_name))
        })
        .expect("fleet checked non-empty")
}

pub fn orchestrate(config: PipelineConfig, args: &OrchestrateArgs) -> Result<(), Failure> {
    config.validate()?;
    let corpus = corpus_dir(args.corpus.as_deref(), config.corpus_dir.as_deref())?;
    let dataset = load_dataset(corpus)?;
    let (registry, policy) = substrate(&dataset);
    let bundle = open_bundle(&args.bundle)?;
    let fleet = load_fleet(args.fleet.as_deref(), &dataset)?;
    let slo = args.slo.unwrap_or(f64::INFINITY);

    if let Some(job_id) = &args.job {
        let artifact = JobArtifact::for_scheduling(
            &dataset,
            job_id,
            dataset.fleet[0].clone(),
            i64::MAX,
        )?;
        let decision = decide(&artifact, &fleet, &bundle, &registry, &policy, slo)?;
        if let Some(log) = &args.log {
            append_decision_log(log, &decision)?;
        }
        match args.format {
            Format::Json => print_json(&decision)?,
            Format::Text => print_decision(&decision),
        }
        return Ok(());
    }

    // Simulate mode: route every job, then price the routed assignment
    // against the largest fixed config on the simulator's exact physics.
    let mut decisions = Vec::new();
    let mut routed = Vec::new();
    for job in &dataset.jobs {
        let artifact = JobArtifact::for_scheduling(
            &dataset,
            &job.job_id,
            dataset.fleet[0].clone(),
            i64::MAX,
        )?;
        let decision = decide(&artifact, &fleet, &bundle, &registry, &policy, slo)?;
        if let Some(log) = &args.log {
            append_decision_log(log, &decision)?;
        }
        routed.push((job.job_id.clone(), decision.chosen.clone()));
        decisions.push(decision);
    }
    let baseline = largest_config(&fleet).clone();
    let fixed: Vec<_> =
        dataset.jobs.iter().map(|j| (j.job_id.clone(), baseline.clone())).collect();
    let initial = assignment_cost(&dataset, &fixed, config.seed)?;
    let final_cost = assignment_cost(&dataset, &routed, config.seed)?;
    let saving = cost_saving(initial, final_cost)?;

    match args.format {
        Format::Json => print_json(&json!({
            "decisions": decisions,
            "baseline_instance": baseline.instance_name,
            "saving": saving,
        }))?,
        Format::Text => {
            for decision in &decisions {
                println!(
                    "{:<12} -> {:<16} predicted {:>10.3}s  cost {:>10.5}  feasible {}",
                    decision.job_id,
                    decision.chosen.instance_name,
                    decision
                        .candidates
                        .iter()
                        .find(|c| c.config.instance_name == decision.chosen.instance_name)
                        .map(|c| c.predicted_seconds)
                        .unwrap_or(f64::NAN),
                    decision
                        .candidates
                        .iter()
                        .find(|c| c.config.instance_name == decision.chosen.instance_name)
                        .map(|c| c.predicted_cost)
                        .unwrap_or(f64::NAN),
                    decision.feasible,
                );
            }
            println!("baseline (fixed {}): cost {:.5}", baseline.instance_name, initial);
            println!("routed:             cost {:.5}", final_cost);
            println!("saving_rate: {:.4}", saving.saving_rate);
        }
    }
    Ok(())
}

pub fn report(args: &ReportArgs) -> Result<(), Failure> {
    let path = args.dir.join("iterations.json");
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))?;
    let log: IterationLog = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    let manifest_path = args.dir.join("bundle").join("manifest.json");
    let manifest: Option<BundleManifest> = match std::fs::read_to_string(&manifest_path) {
        Err(_) => None,
        Ok(text) => Some(
            serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", manifest_path.display()))?,
        ),
    };

    match args.format {
        Format::Json => print_json(&json!({ "log": log, "manifest": manifest }))?,
        Format::Text => {
            println!("seed: {}", log.seed);
            print!("{}", iteration_table(&log));
            if let Some(last) = log.iterations.last() {
                for note in &last.feedback.notes {
                    println!("note: {note}");
                }
            }
            if let Some(m) = manifest {
                println!(
                    "bundle: version {} features {} tools {} snapshot {}",
                    m.bundle_version, m.feature_version, m.tool_version, m.data_snapshot_id
                );
            }
        }
    }
    Ok(())
}
