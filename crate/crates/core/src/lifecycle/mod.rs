//! Continuous operation: drift detection over residuals and feature
//! distributions, dataset growth with retraining, and the orchestration
//! consumer that picks the cheapest configuration predicted to meet an
//! SLO.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzer::{FeatureSpec, TemplatePlanner};
use crate::corpus::{ClusterConfig, CorpusError, HistoryDataset, JobArtifact, RunTrace};
use crate::evaluation::{
    run_iterations, shift_psi, training_rows, EvalError, IterationLog, LoopConfig, LoopContext,
};
use crate::gates::{gate_program, GatedProgram};
use crate::knowledge::RetrievedContext;
use crate::materializer::{
    apply_normalize, cache_key_for, materialize, schema_version, MaterializeError,
};
use crate::modeling::{package_bundle, ManifestFields, ModelBundle, ModelError};
use crate::toolchain::{builtin_registry, standard_policy, ExecutionPolicy, ToolRegistry};

/// Errors from drift handling, retraining, and orchestration.
#[derive(Debug, Error)]
pub enum LifecycleError {
    #[error("fleet is empty")]
    EmptyFleet,
    #[error("bundle incompatible with the live system: {0}")]
    SchemaIncompatible(String),
    #[error("every fleet candidate failed extraction; last failure: {0}")]
    AllCandidatesFailed(String),
    #[error("initial cost must be positive")]
    ZeroInitialCost,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Materialize(#[from] MaterializeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What kind of evidence asks for a refresh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    Residual,
    FeatureShift,
    Scheduled,
}

/// One drift check, reported whether or not it fired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSignal {
    pub kind: DriftKind,
    /// The shifted feature, for feature-shift signals.
    pub feature: Option<String>,
    pub statistic: f64,
    pub threshold: f64,
    pub triggered: bool,
}

impl DriftSignal {
    /// Clock-driven refresh: fires once the time since the last update
    /// exceeds the period.
    pub fn scheduled(hours_since_update: f64, period_hours: f64) -> Self {
        DriftSignal {
            kind: DriftKind::Scheduled,
            feature: None,
            statistic: hours_since_update,
            threshold: period_hours,
            triggered: hours_since_update > period_hours,
        }
    }
}

/// Trigger levels for the two evidence-driven rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftThresholds {
    /// Rolling MAE over training MAE above this fires.
    pub residual_ratio: f64,
    /// Population-stability index above this fires.
    pub psi: f64,
}

impl Default for DriftThresholds {
    fn default() -> Self {
        DriftThresholds { residual_ratio: 1.25, psi: 0.2 }
    }
}

fn mae(residuals: &[f64]) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    residuals.iter().map(|r| r.abs()).sum::<f64>() / residuals.len() as f64
}

/// Checks the residual rule and then every listed feature's shift.
/// Each window pair is (feature, training sample, recent sample).
pub fn detect_drift(
    training_residuals: &[f64],
    rolling_residuals: &[f64],
    feature_windows: &[(String, Vec<f64>, Vec<f64>)],
    thresholds: &DriftThresholds,
) -> Vec<DriftSignal> {
    let reference = mae(training_residuals);
    let rolling = mae(rolling_residuals);
    let ratio = if reference > 0.0 {
        rolling / reference
    } else if rolling == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    let mut signals = vec![DriftSignal {
        kind: DriftKind::Residual,
        feature: None,
        statistic: ratio,
        threshold: thresholds.residual_ratio,
        triggered: ratio > thresholds.residual_ratio,
    }];
    for (feature, training, recent) in feature_windows {
        let psi = shift_psi(training, recent);
        signals.push(DriftSignal {
            kind: DriftKind::FeatureShift,
            feature: Some(feature.clone()),
            statistic: psi,
            threshold: thresholds.psi,
            triggered: psi > thresholds.psi,
        });
    }
    signals
}

/// One fleet candidate's predicted outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOutcome {
    pub config: ClusterConfig,
    pub predicted_seconds: f64,
    /// price_per_second times predicted seconds.
    pub predicted_cost: f64,
    pub feasible: bool,
}

/// The cost-minimizing choice for one job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrchestrationDecision {
    pub job_id: String,
    pub chosen: ClusterConfig,
    pub candidates: Vec<CandidateOutcome>,
    pub slo_seconds: f64,
    /// False when nothing met the SLO and the fastest config was the
    /// fallback.
    pub feasible: bool,
}

/// Re-gates a bundle's extractors against the live registry. Refuses a
/// bundle built for a different toolset before gating anything; stale
/// bundles must go back through proposal, not around the gates.
pub fn bundle_pairs(
    bundle: &ModelBundle,
    registry: &ToolRegistry,
    policy: &ExecutionPolicy,
) -> Result<Vec<(FeatureSpec, GatedProgram)>, LifecycleError> {
    let live = registry.toolset_version();
    if bundle.manifest.tool_version != live {
        return Err(LifecycleError::SchemaIncompatible(format!(
            "bundle was built for toolset {} but the registry reports {live}",
            bundle.manifest.tool_version
        )));
    }
    bundle
        .specs
        .iter()
        .map(|spec| {
            gate_program(spec, registry, policy)
                .map(|gated| (spec.clone(), gated))
                .map_err(|verdicts| {
                    let why = verdicts
                        .iter()
                        .filter(|v| !v.pass)
                        .flat_map(|v| v.reasons.first())
                        .map(|r| r.code.as_str())
                        .next()
                        .unwrap_or("rejected");
                    LifecycleError::SchemaIncompatible(format!(
                        "bundled feature {} no longer passes the gates ({why})",
                        spec.name
                    ))
                })
        })
        .collect()
}

/// Extracts the bundle's features for one artifact and predicts its
/// duration in seconds, clamped at zero. Returns the raw vector so
/// callers can echo what the model saw.
pub fn predict_with_pairs(
    artifact: &JobArtifact,
    pairs: &[(FeatureSpec, GatedProgram)],
    bundle: &ModelBundle,
    registry: &ToolRegistry,
    policy: &ExecutionPolicy,
) -> Result<(f64, crate::materializer::FeatureVector), LifecycleError> {
    let key = cache_key_for(
        artifact,
        &bundle.manifest.data_snapshot_id,
        &bundle.manifest.feature_version,
        registry,
    );
    let vector = materialize(pairs, artifact, registry, policy, &key);
    let row = apply_normalize(&vector, &bundle.norm_stats)?;
    let predicted = bundle.model.predict(&row)?;
    // Durations are physical; a model extrapolating below zero still
    // means "effectively instant".
    Ok((predicted.max(0.0), vector))
}

/// One-shot prediction: re-gates the bundle and predicts one artifact.
pub fn predict_duration(
    artifact: &JobArtifact,
    bundle: &ModelBundle,
    registry: &ToolRegistry,
    policy: &ExecutionPolicy,
) -> Result<(f64, crate::materializer::FeatureVector), LifecycleError> {
    let pairs = bundle_pairs(bundle, registry, policy)?;
    predict_with_pairs(artifact, &pairs, bundle, registry, policy)
}

/// Orders candidates for the feasible case: cheapest first, then lower
/// price, then instance name.
fn by_cost(a: &CandidateOutcome, b: &CandidateOutcome) -> std::cmp::Ordering {
    a.predicted_cost
        .partial_cmp(&b.predicted_cost)
        .unwrap()
        .then(a.config.price_per_second.partial_cmp(&b.config.price_per_second).unwrap())
        .then(a.config.instance_name.cmp(&b.config.instance_name))
}

fn by_seconds(a: &CandidateOutcome, b: &CandidateOutcome) -> std::cmp::Ordering {
    a.predicted_seconds
        .partial_cmp(&b.predicted_seconds)
        .unwrap()
        .then(a.config.price_per_second.partial_cmp(&b.config.price_per_second).unwrap())
        .then(a.config.instance_name.cmp(&b.config.instance_name))
}

/// Predicts the job under every fleet config and picks the cheapest one
/// expected to meet the SLO; with nothing feasible, the fastest.
///
/// Config-dependent features re-materialize per candidate (the cache key
/// covers the config); everything else replays from cache.
pub fn orchestrate(
    artifact: &JobArtifact,
    fleet: &[ClusterConfig],
    bundle: &ModelBundle,
    registry: &ToolRegistry,
    policy: &ExecutionPolicy,
    slo_seconds: f64,
) -> Result<OrchestrationDecision, LifecycleError> {
    if fleet.is_empty() {
        return Err(LifecycleError::EmptyFleet);
    }
    let pairs = bundle_pairs(bundle, registry, policy)?;
    let mut candidates = Vec::new();
    let mut last_failure = String::from("no candidates evaluated");
    for config in fleet {
        let candidate = artifact.with_config(config.clone());
        let predicted_seconds =
            match predict_with_pairs(&candidate, &pairs, bundle, registry, policy) {
                Ok((seconds, _)) => seconds,
                Err(e) => {
                    last_failure = e.to_string();
                    continue;
                }
            };
        candidates.push(CandidateOutcome {
            config: config.clone(),
            predicted_seconds,
            predicted_cost: config.price_per_second * predicted_seconds,
            feasible: predicted_seconds <= slo_seconds,
        });
    }
    if candidates.is_empty() {
        return Err(LifecycleError::AllCandidatesFailed(last_failure));
    }
    let feasible: Vec<&CandidateOutcome> = candidates.iter().filter(|c| c.feasible).collect();
    let (chosen, decision_feasible) = if feasible.is_empty() {
        (candidates.iter().min_by(|a, b| by_seconds(a, b)).unwrap(), false)
    } else {
        (feasible.into_iter().min_by(|a, b| by_cost(a, b)).unwrap(), true)
    };
    Ok(OrchestrationDecision {
        job_id: artifact.job.job_id.clone(),
        chosen: chosen.config.clone(),
        candidates: candidates.clone(),
        slo_seconds,
        feasible: decision_feasible,
    })
}

/// Appends one JSON line per decision.
pub fn append_decision_log(
    path: &Path,
    decision: &OrchestrationDecision,
) -> Result<(), LifecycleError> {
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(decision).map_err(EvalError::Encode)?;
    writeln!(file, "{line}")?;
    Ok(())
}

/// Cost of the two policies side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSavingReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// (initial - final) / initial; at most 1, negative when the new
    /// policy costs more.
    pub saving_rate: f64,
}

pub fn cost_saving(initial_cost: f64, final_cost: f64) -> Result<CostSavingReport, LifecycleError> {
    if !(initial_cost > 0.0) {
        return Err(LifecycleError::ZeroInitialCost);
    }
    Ok(CostSavingReport {
        initial_cost,
        final_cost,
        saving_rate: (initial_cost - final_cost) / initial_cost,
    })
}

/// Total price of running each job once under its assigned config, with
/// the simulator's exact physics supplying the true durations.
pub fn assignment_cost(
    dataset: &HistoryDataset,
    assignments: &[(String, ClusterConfig)],
    seed: u64,
) -> Result<f64, LifecycleError> {
    let mut total = 0.0;
    for (job_id, config) in assignments {
        let job = dataset
            .job(job_id)
            .ok_or_else(|| CorpusError::UnknownJob(job_id.clone()))?;
        let run = crate::corpus::simulate_run(job, config, &dataset.catalog, seed, true)?;
        total += config.price_per_second * run.duration_seconds;
    }
    Ok(total)
}

/// Result of one update cycle.
#[derive(Debug)]
pub struct UpdateOutcome {
    pub dataset: HistoryDataset,
    pub bundle: ModelBundle,
    pub log: IterationLog,
}

/// Folds new labeled runs into the dataset, re-runs the improvement loop
/// from proposal onward, and packages the retrained predictor under the
/// next bundle version. Retraining always re-proposes, so feature specs
/// that no longer fit the data simply fall out instead of wedging.
pub fn update_and_retrain(
    dataset: &HistoryDataset,
    new_runs: &[RunTrace],
    loop_config: &LoopConfig,
    retrieved: &RetrievedContext,
    snapshot_id: &str,
    previous_version: u64,
    bundle_dir: &Path,
) -> Result<UpdateOutcome, LifecycleError> {
    let mut merged = dataset.clone();
    for run in new_runs {
        if merged.run(&run.run_id).is_some() {
            return Err(CorpusError::Invalid {
                kind: "run",
                id: run.run_id.clone(),
                field: "run_id",
                reason: "already recorded".into(),
            }
            .into());
        }
        merged.runs.push(run.clone());
    }
    merged
        .runs
        .sort_by(|a, b| a.started_at.cmp(&b.started_at).then(a.run_id.cmp(&b.run_id)));
    merged.validate()?;
    let registry = builtin_registry(Arc::new(merged.clone()));
    let policy = standard_policy(&registry);
    let (rows, labels) = training_rows(&merged)?;
    let ctx = LoopContext {
        planner: &TemplatePlanner,
        registry: &registry,
        policy: &policy,
        retrieved,
        rows: &rows,
        labels: &labels,
        snapshot_id,
    };
    let outcome = run_iterations(&ctx, loop_config)?;
    let fields = ManifestFields {
        bundle_version: previous_version + 1,
        feature_version: schema_version(&outcome.fit.specs),
        tool_version: registry.toolset_version(),
        data_snapshot_id: snapshot_id.to_string(),
    };
    let bundle = package_bundle(
        bundle_dir,
        &outcome.fit.model,
        &outcome.fit.specs,
        &outcome.fit.stats,
        &fields,
    )?;
    Ok(UpdateOutcome { dataset: merged, bundle, log: outcome.log })
}

#[cfg(test)]
mod tests;
