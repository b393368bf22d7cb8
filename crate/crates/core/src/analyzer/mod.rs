//! Feature proposal and cost-aware budgeted selection.
//!
//! The planner turns a job artifact, retrieved guidance, and optional
//! iteration feedback into feature specifications; the selector then
//! admits a subset under a per-request extraction budget, trading
//! predicted utility against extraction cost.

mod templates;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::JobArtifact;
use crate::dsl::{parse, typecheck, ValueType};
use crate::evaluation::FeedbackPacket;
use crate::knowledge::RetrievedContext;
use crate::toolchain::ToolRegistry;

pub use templates::{
    apply_feedback, coarse_family, plan_from_templates, template_catalog, template_family,
    TemplatePlanner, TEMPLATE_VERSION,
};

/// Errors from proposal validation and cost estimation.
#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error("extraction plan for '{name}' failed to parse: {message}")]
    Parse { name: String, message: String },
    #[error("extraction plan for '{name}' failed to typecheck: {message}")]
    Type { name: String, message: String },
    #[error("duplicate feature name in proposal set: {0}")]
    DuplicateName(String),
}

/// Kind of value a feature produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureType {
    Numerical,
    Categorical,
    TextDerived,
}

/// Where the feature's raw signal lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Log,
    Metadata,
    Code,
}

/// How often the materialized value must be recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refresh {
    PerRun,
    Daily,
    Static,
}

/// Typed fallback used when extraction yields no value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefaultValue {
    Num(f64),
    Str(String),
    Bool(bool),
}

/// One proposed feature: schema plus the program that extracts it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub ftype: FeatureType,
    pub source: FeatureSource,
    /// Extractor program source text.
    pub extraction_plan: String,
    pub expected_cost_ms: u64,
    pub refresh: Refresh,
    pub default_value: DefaultValue,
    pub provenance: String,
    pub version: String,
}

impl FeatureSpec {
    /// The scalar type the extractor must return for this feature.
    pub fn expected_type(&self) -> ValueType {
        match self.ftype {
            FeatureType::Numerical => ValueType::Num,
            FeatureType::Categorical | FeatureType::TextDerived => ValueType::Str,
        }
    }
}

/// Budgeted-selection parameters: budget in milliseconds and the
/// utility-per-second tradeoff weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub budget_ms: u64,
    pub lambda: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { budget_ms: 500, lambda: 0.1 }
    }
}

/// Proposal seam. The template planner is the built-in implementation;
/// an external agent can stand behind the same interface.
pub trait Planner {
    fn propose(
        &self,
        artifact: &JobArtifact,
        context: &RetrievedContext,
        feedback: Option<&FeedbackPacket>,
    ) -> Vec<FeatureSpec>;
}

/// Checks proposal-set invariants: unique names, parseable plans.
pub fn validate_specs(specs: &[FeatureSpec]) -> Result<(), AnalyzerError> {
    let mut seen = std::collections::BTreeSet::new();
    for spec in specs {
        if !seen.insert(spec.name.as_str()) {
            return Err(AnalyzerError::DuplicateName(spec.name.clone()));
        }
        parse(&spec.extraction_plan).map_err(|errs| AnalyzerError::Parse {
            name: spec.name.clone(),
            message: errs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
        })?;
    }
    Ok(())
}

/// Static per-row extraction cost: the sum of the plan's tool-call cost
/// estimates plus a fixed 1 ms evaluation overhead. Repeated calls are
/// all counted; caching is not assumed.
pub fn estimate_cost(spec: &FeatureSpec, registry: &ToolRegistry) -> Result<u64, AnalyzerError> {
    let program = parse(&spec.extraction_plan).map_err(|errs| AnalyzerError::Parse {
        name: spec.name.clone(),
        message: errs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
    })?;
    let typed = typecheck(&program, registry, spec.expected_type()).map_err(|errs| {
        AnalyzerError::Type {
            name: spec.name.clone(),
            message: errs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
        }
    })?;
    Ok(typed.tool_cost_ms() + 1)
}

/// Greedy budgeted selection.
///
/// Each feature scores `utility - lambda * cost_seconds`. Features are
/// ranked by score (ties: lower cost, then name) and admitted in rank
/// order while they fit the remaining budget; an oversized feature is
/// skipped and the sweep continues, so cheaper lower-ranked features
/// may still enter. Only strictly positive scores are admissible.
pub fn select_features(
    specs: &[FeatureSpec],
    utilities: &BTreeMap<String, f64>,
    cfg: &SelectionConfig,
) -> Vec<FeatureSpec> {
    let mut ranked: Vec<(f64, &FeatureSpec)> = specs
        .iter()
        .map(|s| {
            let utility = utilities.get(&s.name).copied().unwrap_or(0.0);
            (utility - cfg.lambda * (s.expected_cost_ms as f64 / 1000.0), s)
        })
        .collect();
    ranked.sort_by(|(score_a, a), (score_b, b)| {
        score_b
            .partial_cmp(score_a)
            .unwrap()
            .then(a.expected_cost_ms.cmp(&b.expected_cost_ms))
            .then(a.name.cmp(&b.name))
    });
    let mut selected = Vec::new();
    let mut spent = 0u64;
    for (score, spec) in ranked {
        if score <= 0.0 {
            break;
        }
        if spent + spec.expected_cost_ms <= cfg.budget_ms {
            spent += spec.expected_cost_ms;
            selected.push(spec.clone());
        }
    }
    selected
}
