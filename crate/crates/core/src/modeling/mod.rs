//! Predictors, metrics, cross-validation, model selection, and bundle
//! packaging.
//!
//! Two model families form the bounded candidate set: gradient-boosted
//! regression trees (squared error, exact greedy splits, no subsampling)
//! and closed-form ridge regression. Both train fully deterministically,
//! so identical inputs reproduce identical models bit for bit.

mod bundle;
mod cv;
mod gbt;
mod linear;
mod metrics;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bundle::{load_bundle, package_bundle, BundleManifest, ManifestFields, ModelBundle};
pub use cv::{cross_validate, select_model, CandidateResult, CvReport, MetricAggregate};
pub use gbt::{train_gbt, GbtModel, TreeNode};
pub use linear::{train_linear, LinearModel};
pub use metrics::metrics;

/// Errors from training, evaluation, and bundle IO.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty training matrix")]
    EmptyMatrix,
    #[error("ragged matrix: row {row} has {got} columns, expected {expected}")]
    RaggedMatrix { row: usize, got: usize, expected: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("labels and predictions differ in length: {labels} vs {predictions}")]
    LengthMismatch { labels: usize, predictions: usize },
    #[error("{rows} rows cannot form {k} folds")]
    BadFolds { rows: usize, k: usize },
    #[error("row has {got} features, model expects {expected}")]
    ColumnMismatch { expected: usize, got: usize },
    #[error("matrix has too few rows: {rows} < {required}")]
    TooFewRows { rows: usize, required: usize },
    #[error("normal equations unsolvable even after stabilization")]
    Unsolvable,
    #[error("invalid hyperparameter: {0}")]
    BadParams(String),
    #[error("bundle member versions disagree: {message}")]
    VersionSkew { message: String },
    #[error("bundle content hash mismatch: manifest says {expected}, computed {computed}")]
    HashMismatch { expected: String, computed: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed bundle member {member}: {source}")]
    Decode {
        member: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Gradient-boosting hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GBTParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    pub seed: u64,
}

impl Default for GBTParams {
    fn default() -> Self {
        GBTParams {
            n_trees: 200,
            max_depth: 6,
            learning_rate: 0.1,
            min_samples_leaf: 2,
            seed: 0,
        }
    }
}

/// One entry of the candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSpec {
    Gbt(GBTParams),
    Ridge { lambda: f64 },
}

impl std::fmt::Display for CandidateSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CandidateSpec::Gbt(p) => write!(
                f,
                "gbt(trees={}, depth={}, lr={})",
                p.n_trees, p.max_depth, p.learning_rate
            ),
            CandidateSpec::Ridge { lambda } => write!(f, "ridge(lambda={lambda})"),
        }
    }
}

/// The documented candidate grid: 8 boosted-tree settings and 2 ridge
/// penalties. Order matters: model selection breaks ties by position.
pub fn default_grid(seed: u64) -> Vec<CandidateSpec> {
    let mut grid = Vec::new();
    for n_trees in [50, 200] {
        for max_depth in [3, 6] {
            for learning_rate in [0.05, 0.1] {
                grid.push(CandidateSpec::Gbt(GBTParams {
                    n_trees,
                    max_depth,
                    learning_rate,
                    min_samples_leaf: 2,
                    seed,
                }));
            }
        }
    }
    grid.push(CandidateSpec::Ridge { lambda: 0.1 });
    grid.push(CandidateSpec::Ridge { lambda: 1.0 });
    grid
}

/// Model family tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gbt,
    Linear,
}

/// Trained parameters of either family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPayload {
    Gbt(GbtModel),
    Linear(LinearModel),
}

/// A trained predictor bound to a column schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub columns: Vec<String>,
    pub payload: ModelPayload,
    pub seed: u64,
    /// Hash of the training matrix and labels, for provenance.
    pub data_hash: String,
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self.payload {
            ModelPayload::Gbt(_) => ModelKind::Gbt,
            ModelPayload::Linear(_) => ModelKind::Linear,
        }
    }

    /// Predicts one encoded row; the row must match the column schema.
    pub fn predict(&self, row: &[f64]) -> Result<f64, ModelError> {
        if row.len() != self.columns.len() {
            return Err(ModelError::ColumnMismatch {
                expected: self.columns.len(),
                got: row.len(),
            });
        }
        Ok(match &self.payload {
            ModelPayload::Gbt(m) => m.predict(row),
            ModelPayload::Linear(m) => m.predict(row),
        })
    }

    pub fn predict_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        rows.iter().map(|r| self.predict(r)).collect()
    }

    /// Per-column importance. Tree models report accumulated squared-error
    /// gain; linear models report |coefficient| as a weak proxy.
    pub fn importances(&self) -> Vec<f64> {
        match &self.payload {
            ModelPayload::Gbt(m) => m.importances.clone(),
            ModelPayload::Linear(m) => m.coefficients.iter().map(|c| c.abs()).collect(),
        }
    }
}

/// Point metrics of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean absolute error, in label units (seconds).
    pub mae: f64,
    /// Mean absolute percentage error over nonzero labels, in percent.
    pub mape: f64,
    pub rmse: f64,
    /// 1 - SS_res/SS_tot; negative infinity flags a constant-label
    /// evaluation that the model failed to fit exactly.
    pub r2: f64,
    pub n: usize,
}

/// Validates shape and finiteness; returns (rows, cols).
pub(crate) fn validate_matrix(x: &[Vec<f64>], y: &[f64]) -> Result<(usize, usize), ModelError> {
    if x.is_empty() || y.is_empty() {
        return Err(ModelError::EmptyMatrix);
    }
    if x.len() != y.len() {
        return Err(ModelError::LengthMismatch { labels: y.len(), predictions: x.len() });
    }
    let cols = x[0].len();
    for (i, row) in x.iter().enumerate() {
        if row.len() != cols {
            return Err(ModelError::RaggedMatrix { row: i, got: row.len(), expected: cols });
        }
        for (j, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(ModelError::NonFinite { row: i, col: j });
            }
        }
    }
    for (i, v) in y.iter().enumerate() {
        if !v.is_finite() {
            return Err(ModelError::NonFinite { row: i, col: usize::MAX });
        }
    }
    Ok((x.len(), cols))
}

/// Stable hash of a training set, recorded in model provenance.
pub fn data_hash(x: &[Vec<f64>], y: &[f64]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for row in x {
        for v in row {
            hasher.update(v.to_le_bytes());
        }
        hasher.update([0xff]);
    }
    hasher.update([0xfe]);
    for v in y {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(&hasher.finalize()[..8])
}

/// Trains one candidate on the full matrix.
pub fn train_candidate(
    x: &[Vec<f64>],
    y: &[f64],
    columns: &[String],
    spec: &CandidateSpec,
) -> Result<Model, ModelError> {
    match spec {
        CandidateSpec::Gbt(params) => train_gbt(x, y, columns, params),
        CandidateSpec::Ridge { lambda } => train_linear(x, y, columns, *lambda),
    }
}
