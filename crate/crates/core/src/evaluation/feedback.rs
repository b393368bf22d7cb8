//! Turns evaluation reports into a structured feedback packet through a
//! fixed rule table. Every rule is deterministic, so identical reports
//! always produce identical guidance.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ablation::AblationReport;
use super::health::HealthReport;
use super::utility::{source_feature, UtilityReport};
use super::{DropReason, FeedbackPacket};
use crate::analyzer::{template_family, FeatureSpec};
use crate::modeling::MetricsReport;

const MIN_COVERAGE: f64 = 0.7;
const MAX_STABILITY_CV: f64 = 1.0;
const AUTOCORR_TRIGGER: f64 = 0.3;
const NEGLIGIBLE_R2: f64 = 0.01;
const COSTLY_BUDGET_SHARE: f64 = 0.5;

/// Residual structure the metrics alone cannot show.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualDiagnostics {
    /// Pearson correlation of consecutive residuals within one job,
    /// pooled across jobs.
    pub lag1_autocorrelation: f64,
}

/// Lag-1 autocorrelation of residuals, pooled over per-job sequences.
/// Sequences shorter than two contribute no pairs; fewer than two pairs
/// overall scores zero.
pub fn residual_autocorrelation(sequences: &[Vec<f64>]) -> f64 {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for seq in sequences {
        for pair in seq.windows(2) {
            xs.push(pair[0]);
            ys.push(pair[1]);
        }
    }
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx).powi(2);
        vy += (y - my).powi(2);
    }
    if vx <= 0.0 || vy <= 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Everything the rule table needs beyond the reports themselves.
#[derive(Debug, Clone)]
pub struct FeedbackInputs<'a> {
    /// The specs that were selected and materialized this iteration.
    pub specs: &'a [FeatureSpec],
    pub budget_ms: u64,
}

fn is_lag_feature(spec: &FeatureSpec) -> bool {
    template_family(spec) == Some("history") || spec.name.contains("lag")
}

fn is_sandbox_feature(spec: &FeatureSpec) -> bool {
    template_family(spec).is_some_and(|f| crate::analyzer::coarse_family(f) == "sandbox")
}

/// Applies the rule table. Rules fire in a fixed order and the first
/// reason to claim a feature wins; later rules cannot re-drop it.
pub fn build_feedback(
    health: &HealthReport,
    utility: &UtilityReport,
    ablation: &AblationReport,
    metrics: &MetricsReport,
    residuals: &ResidualDiagnostics,
    inputs: &FeedbackInputs,
) -> FeedbackPacket {
    let mut drop: Vec<(String, DropReason)> = Vec::new();
    let mut claimed: BTreeSet<String> = BTreeSet::new();
    let mut notes = Vec::new();
    let mut claim = |name: &str, reason: DropReason, drop: &mut Vec<(String, DropReason)>| {
        if claimed.insert(name.to_string()) {
            drop.push((name.to_string(), reason));
        }
    };

    for feature in &health.features {
        if feature.coverage < MIN_COVERAGE {
            claim(&feature.feature, DropReason::LowCoverage, &mut drop);
            notes.push(format!(
                "{} covers only {:.0}% of rows",
                feature.feature,
                feature.coverage * 100.0
            ));
        }
    }
    for feature in &health.features {
        if feature.stability_cv > MAX_STABILITY_CV {
            claim(&feature.feature, DropReason::Unstable, &mut drop);
            notes.push(format!(
                "{} varies across repeat runs (cv {:.2})",
                feature.feature, feature.stability_cv
            ));
        }
    }
    for pair in &utility.redundant_pairs {
        let loser = source_feature(&pair.droppable).to_string();
        let kept = if source_feature(&pair.a) == loser { &pair.b } else { &pair.a };
        // A one-hot feature can pair with itself across its own columns;
        // that is structure, not redundancy.
        if loser == source_feature(kept) {
            continue;
        }
        claim(&loser, DropReason::Redundant, &mut drop);
        notes.push(format!(
            "{} duplicates {} (rho {:.3})",
            pair.droppable, kept, pair.rho
        ));
    }
    if let Some(delta) = ablation.get("sandbox") {
        let sandbox_cost: u64 = inputs
            .specs
            .iter()
            .filter(|s| is_sandbox_feature(s))
            .map(|s| s.expected_cost_ms)
            .sum();
        if delta.removed_columns > 0
            && delta.delta_r2.abs() <= NEGLIGIBLE_R2
            && (sandbox_cost as f64) > COSTLY_BUDGET_SHARE * inputs.budget_ms as f64
        {
            for spec in inputs.specs.iter().filter(|s| is_sandbox_feature(s)) {
                claim(&spec.name, DropReason::CostIneffective, &mut drop);
            }
            notes.push(format!(
                "sandbox features cost {sandbox_cost}ms for a {:+.4} R2 change",
                -delta.delta_r2
            ));
        }
    }

    let mut add_templates = Vec::new();
    let has_lag = inputs.specs.iter().any(is_lag_feature);
    if residuals.lag1_autocorrelation > AUTOCORR_TRIGGER && !has_lag {
        add_templates.push("history".to_string());
        notes.push(format!(
            "residuals trend within jobs (lag-1 rho {:.2}); history features missing",
            residuals.lag1_autocorrelation
        ));
    }

    FeedbackPacket { drop, add_templates, notes, iteration_metrics: metrics.clone() }
}
