//! Pipeline configuration: a JSON file layered under environment and
//! flag overrides, validated against documented bounds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use jotforge_core::analyzer::SelectionConfig;
use jotforge_core::evaluation::LoopConfig;
use jotforge_core::lifecycle::DriftThresholds;
use jotforge_core::modeling::CandidateSpec;

use crate::Failure;

/// Everything the pipeline commands read. Unknown keys in the config
/// file are rejected.
///
/// Bounds: budget_ms in [1, 60000]; lambda in [0, 10]; max_iterations in
/// [1, 10]; cv_folds in [2, 20]; r2_stop and min_rel_mae_improvement in
/// [0, 1]; drift.residual_ratio in [1, 100]; drift.psi in (0, 10].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Per-job extraction budget handed to feature selection.
    pub budget_ms: u64,
    /// Cost weight in the selection score.
    pub lambda: f64,
    pub max_iterations: usize,
    pub cv_folds: usize,
    pub r2_stop: f64,
    pub min_rel_mae_improvement: f64,
    pub drift: DriftThresholds,
    /// Candidate models per iteration; empty means the built-in grid.
    pub grid: Vec<CandidateSpec>,
    pub corpus_dir: Option<PathBuf>,
    pub knowledge_base: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            budget_ms: 500,
            lambda: 0.1,
            max_iterations: 3,
            cv_folds: 5,
            r2_stop: 0.85,
            min_rel_mae_improvement: 0.02,
            drift: DriftThresholds::default(),
            grid: Vec::new(),
            corpus_dir: None,
            knowledge_base: None,
            out_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), Failure> {
        let bad = |field: &str, detail: String| {
            Err(Failure::Usage(format!("config field {field} out of bounds: {detail}")))
        };
        if !(1..=60_000).contains(&self.budget_ms) {
            return bad("budget_ms", format!("{} not in [1, 60000]", self.budget_ms));
        }
        if !(0.0..=10.0).contains(&self.lambda) {
            return bad("lambda", format!("{} not in [0, 10]", self.lambda));
        }
        if !(1..=10).contains(&self.max_iterations) {
            return bad("max_iterations", format!("{} not in [1, 10]", self.max_iterations));
        }
        if !(2..=20).contains(&self.cv_folds) {
            return bad("cv_folds", format!("{} not in [2, 20]", self.cv_folds));
        }
        if !(0.0..=1.0).contains(&self.r2_stop) {
            return bad("r2_stop", format!("{} not in [0, 1]", self.r2_stop));
        }
        if !(0.0..=1.0).contains(&self.min_rel_mae_improvement) {
            return bad(
                "min_rel_mae_improvement",
                format!("{} not in [0, 1]", self.min_rel_mae_improvement),
            );
        }
        if !(1.0..=100.0).contains(&self.drift.residual_ratio) {
            return bad(
                "drift.residual_ratio",
                format!("{} not in [1, 100]", self.drift.residual_ratio),
            );
        }
        if !(self.drift.psi > 0.0 && self.drift.psi <= 10.0) {
            return bad("drift.psi", format!("{} not in (0, 10]", self.drift.psi));
        }
        Ok(())
    }

    /// The improvement-loop view of this config.
    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            max_iterations: self.max_iterations,
            selection: SelectionConfig { budget_ms: self.budget_ms, lambda: self.lambda },
            cv_folds: self.cv_folds,
            seed: self.seed,
            r2_stop: self.r2_stop,
            min_rel_mae_improvement: self.min_rel_mae_improvement,
            grid: self.grid.clone(),
        }
    }
}

/// Loads the config file (or the defaults), then applies the
/// `JOTFORGE_SEED` environment override. Flag overrides are applied by
/// each command on top; precedence is flags over environment over file.
pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    let mut config = match path {
        None => PipelineConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Failure::Usage(format!("cannot read config {}: {e}", p.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                Failure::Usage(format!("invalid config {}: {e}", p.display()))
            })?
        }
    };
    if let Ok(raw) = std::env::var("JOTFORGE_SEED") {
        config.seed = raw.parse().map_err(|_| {
            Failure::Usage(format!("JOTFORGE_SEED must be an unsigned integer, got `{raw}`"))
        })?;
    }
    Ok(config)
}
