//! Feature evaluation: health, utility, ablations, structured feedback,
//! and the closed improvement loop that ties them together.

mod ablation;
mod feedback;
mod health;
mod iterate;
mod utility;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::materializer::MaterializeError;
use crate::modeling::{MetricsReport, ModelError};

pub use ablation::{ablation, AblationReport, GroupDelta};
pub use feedback::{
    build_feedback, residual_autocorrelation, FeedbackInputs, ResidualDiagnostics,
};
pub use health::{feature_health, shift_psi, FeatureHealth, HealthReport};
pub use iterate::{
    run_iterations, training_rows, write_iteration_log, FinalFit, IterationLog, IterationRecord,
    LoopConfig, LoopContext, LoopOutcome, StopReason, COLD_START_UTILITY,
};
pub use utility::{feature_utility, source_feature, RedundantPair, UtilityReport};

/// Errors from evaluation and the improvement loop.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("feature utility requires a tree model")]
    NotATreeModel,
    #[error("bad evaluation input: {0}")]
    Shape(String),
    #[error("iteration {iteration} failed: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Materialize(#[from] MaterializeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("encoding the iteration log: {0}")]
    Encode(#[from] serde_json::Error),
}

/// Machine-readable reason a feature is asked to be dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DropReason {
    LowCoverage,
    Unstable,
    Redundant,
    CostIneffective,
}

impl std::fmt::Display for DropReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DropReason::LowCoverage => "LOW_COVERAGE",
            DropReason::Unstable => "UNSTABLE",
            DropReason::Redundant => "REDUNDANT",
            DropReason::CostIneffective => "COST_INEFFECTIVE",
        })
    }
}

/// Guidance handed back to the planner between iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPacket {
    /// Features to remove, each with a reason code.
    pub drop: Vec<(String, DropReason)>,
    /// Template families to force into the next proposal.
    pub add_templates: Vec<String>,
    pub notes: Vec<String>,
    pub iteration_metrics: MetricsReport,
}
