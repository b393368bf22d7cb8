//! The closed improvement loop: propose, gate, select under budget,
//! materialize, train and cross-validate, evaluate, feed back. Repeats
//! until the model is good enough or stops improving.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ablation::{ablation, AblationReport};
use super::feedback::{
    build_feedback, residual_autocorrelation, FeedbackInputs, ResidualDiagnostics,
};
use super::health::feature_health;
use super::utility::{feature_utility, source_feature};
use super::{DropReason, EvalError, FeedbackPacket};
use crate::analyzer::{
    coarse_family, select_features, template_family, FeatureSpec, Planner, SelectionConfig,
};
use crate::corpus::{HistoryDataset, JobArtifact};
use crate::gates::{gate_program, GatedProgram};
use crate::knowledge::RetrievedContext;
use crate::materializer::{
    fit_normalize, materialize_matrix, FeatureMatrix, NormStats, RawMatrix,
};
use crate::modeling::{
    cross_validate, default_grid, select_model, train_candidate, train_gbt, CandidateSpec,
    GBTParams, MetricsReport, Model, ModelKind,
};
use crate::toolchain::{ExecutionPolicy, ToolRegistry};

/// Utility assigned to every gate-passing feature before any model has
/// scored them: cheap features are worth trying, expensive ones less so.
pub const COLD_START_UTILITY: f64 = 0.05;

fn probe_params(seed: u64) -> GBTParams {
    GBTParams {
        n_trees: 100,
        max_depth: 4,
        learning_rate: 0.1,
        min_samples_leaf: 2,
        seed,
    }
}

/// Loop-wide knobs with the documented defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub max_iterations: usize,
    pub selection: SelectionConfig,
    pub cv_folds: usize,
    pub seed: u64,
    /// Stop once cross-validated R2 reaches this.
    pub r2_stop: f64,
    /// Stop once the relative MAE improvement over the previous
    /// iteration falls below this fraction.
    pub min_rel_mae_improvement: f64,
    /// Candidate models per iteration; empty means the built-in grid.
    #[serde(default)]
    pub grid: Vec<CandidateSpec>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            max_iterations: 3,
            selection: SelectionConfig::default(),
            cv_folds: 5,
            seed: 0,
            r2_stop: 0.85,
            min_rel_mae_improvement: 0.02,
            grid: Vec::new(),
        }
    }
}

/// Everything the loop is wired to: the proposal seam, the tool
/// substrate, and the labeled rows it trains on.
pub struct LoopContext<'a> {
    pub planner: &'a dyn Planner,
    pub registry: &'a ToolRegistry,
    pub policy: &'a ExecutionPolicy,
    pub retrieved: &'a RetrievedContext,
    /// One labeled row per historical run: (run id, artifact as of that
    /// run's scheduling moment), chronological.
    pub rows: &'a [(String, JobArtifact)],
    /// Measured durations, aligned with `rows`.
    pub labels: &'a [f64],
    pub snapshot_id: &'a str,
}

/// Why the loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    R2Target,
    SmallImprovement,
}

/// One completed iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub proposed: usize,
    /// (feature, first gate reason code) for every refused proposal.
    pub gate_rejections: Vec<(String, String)>,
    pub selected: Vec<String>,
    pub selected_cost_ms: u64,
    pub candidate: CandidateSpec,
    /// Cross-validated means of the winning candidate.
    pub metrics: MetricsReport,
    pub feedback: FeedbackPacket,
}

/// Append-only loop transcript; identical seeds reproduce it byte for
/// byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub seed: u64,
    pub stop_reason: StopReason,
    pub iterations: Vec<IterationRecord>,
}

/// The last iteration's trained state, kept so callers can package a
/// bundle without replaying the loop.
#[derive(Debug, Clone)]
pub struct FinalFit {
    pub specs: Vec<FeatureSpec>,
    pub stats: NormStats,
    pub model: Model,
    pub candidate: CandidateSpec,
    pub raw: RawMatrix,
    pub matrix: FeatureMatrix,
}

/// Loop result: the serializable transcript plus the final fit.
pub struct LoopOutcome {
    pub log: IterationLog,
    pub fit: FinalFit,
}

/// Builds one labeled row per recorded run: the artifact exactly as it
/// would have been scheduled (prior runs only, that run's config) and
/// the measured duration. Rows are chronological.
pub fn training_rows(
    dataset: &HistoryDataset,
) -> Result<(Vec<(String, JobArtifact)>, Vec<f64>), EvalError> {
    let mut runs: Vec<_> = dataset.runs.iter().collect();
    runs.sort_by(|a, b| a.started_at.cmp(&b.started_at).then(a.run_id.cmp(&b.run_id)));
    let mut rows = Vec::with_capacity(runs.len());
    let mut labels = Vec::with_capacity(runs.len());
    for run in runs {
        let artifact = JobArtifact::for_scheduling(
            dataset,
            &run.job_id,
            run.config.clone(),
            run.started_at,
        )
        .map_err(|e| EvalError::Shape(e.to_string()))?;
        rows.push((run.run_id.clone(), artifact));
        labels.push(run.duration_seconds);
    }
    Ok((rows, labels))
}

fn wrap(iteration: usize, source: EvalError) -> EvalError {
    EvalError::Iteration { iteration, source: Box::new(source) }
}

/// Probe utilities: materialize every gate-passing feature, train one
/// fixed tree model, and share out its split gain per source feature,
/// normalized to sum to one.
fn probe_utilities(
    pool: &[(FeatureSpec, GatedProgram)],
    ctx: &LoopContext,
    cfg: &LoopConfig,
) -> Result<BTreeMap<String, f64>, EvalError> {
    let specs: Vec<FeatureSpec> = pool.iter().map(|(s, _)| s.clone()).collect();
    let raw = materialize_matrix(pool, ctx.rows, ctx.registry, ctx.policy, ctx.snapshot_id);
    let (matrix, _) = fit_normalize(&raw, &specs)?;
    let model = train_gbt(&matrix.rows, ctx.labels, &matrix.columns, &probe_params(cfg.seed))?;
    let mut per_feature: BTreeMap<String, f64> =
        specs.iter().map(|s| (s.name.clone(), 0.0)).collect();
    for (column, gain) in matrix.columns.iter().zip(model.importances()) {
        if let Some(slot) = per_feature.get_mut(source_feature(column)) {
            *slot += gain;
        }
    }
    let total: f64 = per_feature.values().sum();
    if total <= 0.0 {
        return Ok(specs.iter().map(|s| (s.name.clone(), COLD_START_UTILITY)).collect());
    }
    Ok(per_feature.into_iter().map(|(name, gain)| (name, gain / total)).collect())
}

/// Merges a fresh packet into the guidance carried across iterations:
/// drops accumulate (a feature once dropped stays dropped), forced
/// template families accumulate, the rest is replaced.
fn merge_feedback(carried: Option<FeedbackPacket>, fresh: &FeedbackPacket) -> FeedbackPacket {
    let mut merged = fresh.clone();
    if let Some(prev) = carried {
        let known: BTreeSet<&String> = merged.drop.iter().map(|(n, _)| n).collect();
        let mut inherited: Vec<(String, DropReason)> = prev
            .drop
            .into_iter()
            .filter(|(n, _)| !known.contains(n))
            .collect();
        inherited.extend(merged.drop);
        merged.drop = inherited;
        for family in prev.add_templates {
            if !merged.add_templates.contains(&family) {
                merged.add_templates.push(family);
            }
        }
    }
    merged
}

/// Coarse ablation groups over the selected specs. Groups that would
/// strip the matrix bare are left out; they cannot be ablated.
fn ablation_groups(specs: &[FeatureSpec]) -> Vec<(String, Vec<String>)> {
    let mut groups: BTreeMap<&'static str, Vec<String>> = BTreeMap::new();
    for spec in specs {
        let coarse = coarse_family(template_family(spec).unwrap_or("custom"));
        groups.entry(coarse).or_default().push(spec.name.clone());
    }
    groups
        .into_iter()
        .filter(|(_, members)| members.len() < specs.len())
        .map(|(name, members)| (name.to_string(), members))
        .collect()
}

pub fn run_iterations(ctx: &LoopContext, cfg: &LoopConfig) -> Result<LoopOutcome, EvalError> {
    if ctx.rows.is_empty() {
        return Err(EvalError::Shape("no training rows".into()));
    }
    if ctx.rows.len() != ctx.labels.len() {
        return Err(EvalError::Shape(format!(
            "{} rows but {} labels",
            ctx.rows.len(),
            ctx.labels.len()
        )));
    }
    if cfg.max_iterations == 0 {
        return Err(EvalError::Shape("max_iterations must be at least 1".into()));
    }
    // The planner sees the warmest artifact: the one with the longest
    // history, ties broken by position.
    let representative = ctx
        .rows
        .iter()
        .map(|(_, a)| a)
        .fold(&ctx.rows[0].1, |best, a| {
            if a.prior_runs.len() > best.prior_runs.len() {
                a
            } else {
                best
            }
        });
    let job_of: Vec<String> = ctx.rows.iter().map(|(_, a)| a.job.job_id.clone()).collect();
    let half = ctx.rows.len() / 2;
    let windows: Vec<Vec<usize>> = if ctx.rows.len() >= 2 {
        vec![(0..half).collect(), (half..ctx.rows.len()).collect()]
    } else {
        vec![(0..ctx.rows.len()).collect()]
    };
    let grid =
        if cfg.grid.is_empty() { default_grid(cfg.seed) } else { cfg.grid.clone() };

    let mut carried: Option<FeedbackPacket> = None;
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut final_fit: Option<FinalFit> = None;
    let mut stop_reason = StopReason::MaxIterations;

    for iteration in 1..=cfg.max_iterations {
        let proposed = ctx.planner.propose(representative, ctx.retrieved, carried.as_ref());
        let proposed_count = proposed.len();
        let mut pool: Vec<(FeatureSpec, GatedProgram)> = Vec::new();
        let mut gate_rejections: Vec<(String, String)> = Vec::new();
        for spec in proposed {
            match gate_program(&spec, ctx.registry, ctx.policy) {
                Ok(gated) => pool.push((spec, gated)),
                Err(verdicts) => {
                    let code = verdicts
                        .iter()
                        .filter(|v| !v.pass)
                        .flat_map(|v| v.reasons.first())
                        .map(|r| r.code.clone())
                        .next()
                        .unwrap_or_else(|| "REJECTED".into());
                    gate_rejections.push((spec.name.clone(), code));
                }
            }
        }
        if pool.is_empty() {
            return Err(wrap(
                iteration,
                EvalError::Shape("every proposed feature was rejected".into()),
            ));
        }

        let utilities: BTreeMap<String, f64> = if iteration == 1 {
            pool.iter().map(|(s, _)| (s.name.clone(), COLD_START_UTILITY)).collect()
        } else {
            probe_utilities(&pool, ctx, cfg).map_err(|e| wrap(iteration, e))?
        };

        let pool_specs: Vec<FeatureSpec> = pool.iter().map(|(s, _)| s.clone()).collect();
        let selected_specs = select_features(&pool_specs, &utilities, &cfg.selection);
        if selected_specs.is_empty() {
            return Err(wrap(
                iteration,
                EvalError::Shape("selection admitted no features".into()),
            ));
        }
        let mut by_name: BTreeMap<String, GatedProgram> =
            pool.into_iter().map(|(s, g)| (s.name, g)).collect();
        let pairs: Vec<(FeatureSpec, GatedProgram)> = selected_specs
            .iter()
            .map(|s| (s.clone(), by_name.remove(&s.name).expect("selected from pool")))
            .collect();
        let selected_cost_ms: u64 = selected_specs.iter().map(|s| s.expected_cost_ms).sum();

        let raw = materialize_matrix(&pairs, ctx.rows, ctx.registry, ctx.policy, ctx.snapshot_id);
        let (matrix, stats) =
            fit_normalize(&raw, &selected_specs).map_err(|e| wrap(iteration, e.into()))?;

        let report = cross_validate(
            &matrix.rows,
            ctx.labels,
            &matrix.columns,
            &grid,
            cfg.cv_folds,
            cfg.seed,
        )
        .map_err(|e| wrap(iteration, e.into()))?;
        let best = select_model(&report).expect("non-empty grid");
        let winner = &report.candidates[best];
        let metrics = MetricsReport {
            mae: winner.mae.mean,
            mape: winner.mape.mean,
            rmse: winner.rmse.mean,
            r2: winner.r2.mean,
            n: ctx.labels.len(),
        };
        let model = train_candidate(&matrix.rows, ctx.labels, &matrix.columns, &winner.spec)
            .map_err(|e| wrap(iteration, e.into()))?;

        let health = feature_health(&raw, &job_of, &windows);
        let utility_model = if model.kind() == ModelKind::Gbt {
            model.clone()
        } else {
            train_gbt(&matrix.rows, ctx.labels, &matrix.columns, &probe_params(cfg.seed))
                .map_err(|e| wrap(iteration, e.into()))?
        };
        let utility = feature_utility(&utility_model, &matrix.rows)
            .map_err(|e| wrap(iteration, e))?;
        let groups = ablation_groups(&selected_specs);
        let ablation_report = if groups.is_empty() {
            AblationReport {
                baseline_mae: metrics.mae,
                baseline_rmse: metrics.rmse,
                baseline_r2: metrics.r2,
                groups: vec![],
            }
        } else {
            ablation(
                &matrix.rows,
                ctx.labels,
                &matrix.columns,
                &groups,
                &winner.spec,
                cfg.cv_folds,
                cfg.seed,
            )
            .map_err(|e| wrap(iteration, e))?
        };
        let predictions = model
            .predict_rows(&matrix.rows)
            .map_err(|e| wrap(iteration, e.into()))?;
        let mut sequences: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (i, job) in job_of.iter().enumerate() {
            sequences
                .entry(job.as_str())
                .or_default()
                .push(ctx.labels[i] - predictions[i]);
        }
        let residuals = ResidualDiagnostics {
            lag1_autocorrelation: residual_autocorrelation(
                &sequences.into_values().collect::<Vec<_>>(),
            ),
        };
        let packet = build_feedback(
            &health,
            &utility,
            &ablation_report,
            &metrics,
            &residuals,
            &FeedbackInputs { specs: &selected_specs, budget_ms: cfg.selection.budget_ms },
        );
        carried = Some(merge_feedback(carried.take(), &packet));

        final_fit = Some(FinalFit {
            specs: selected_specs.clone(),
            stats,
            model,
            candidate: winner.spec.clone(),
            raw,
            matrix,
        });
        iterations.push(IterationRecord {
            iteration,
            proposed: proposed_count,
            gate_rejections,
            selected: selected_specs.iter().map(|s| s.name.clone()).collect(),
            selected_cost_ms,
            candidate: winner.spec.clone(),
            metrics,
            feedback: packet,
        });

        let current = &iterations[iterations.len() - 1].metrics;
        if current.r2 >= cfg.r2_stop {
            stop_reason = StopReason::R2Target;
            break;
        }
        if iterations.len() >= 2 {
            let previous = iterations[iterations.len() - 2].metrics.mae;
            let improvement =
                if previous > 0.0 { (previous - current.mae) / previous } else { 0.0 };
            if improvement < cfg.min_rel_mae_improvement {
                stop_reason = StopReason::SmallImprovement;
                break;
            }
        }
    }

    Ok(LoopOutcome {
        log: IterationLog { seed: cfg.seed, stop_reason, iterations },
        fit: final_fit.expect("at least one iteration ran"),
    })
}

/// Writes `iterations.json` plus one `runs/<iter>/` directory per
/// iteration with its metrics and feedback.
pub fn write_iteration_log(dir: &Path, log: &IterationLog) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("iterations.json"), serde_json::to_vec_pretty(log)?)?;
    for record in &log.iterations {
        let sub = dir.join("runs").join(record.iteration.to_string());
        std::fs::create_dir_all(&sub)?;
        std::fs::write(sub.join("metrics.json"), serde_json::to_vec_pretty(&record.metrics)?)?;
        std::fs::write(
            sub.join("feedback.json"),
            serde_json::to_vec_pretty(&record.feedback)?,
        )?;
    }
    Ok(())
}
