//! Executes gate-passed extraction plans against one artifact at a time,
//! then turns raw feature vectors into an encoded numeric matrix.
//!
//! Pipeline stages: materialization (tool-backed evaluation with caching
//! and budgets), normalization and encoding (z-score and capped one-hot,
//! replayable at inference from stored stats), and data-quality checks
//! over the raw values before defaults are substituted.


use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analyzer::{DefaultValue, FeatureSpec, FeatureType};
use crate::corpus::JobArtifact;
use crate::dsl::{evaluate, AmbientBindings, FeatureValue};
use crate::gates::GatedProgram;
use crate::toolchain::{BudgetState, CacheKey, ExecutionPolicy, RequestScope, ToolRegistry};

/// Errors from encoding and persistence; extraction itself never errors
/// at the vector level.
#[derive(Debug, Error)]
pub enum MaterializeError {
    #[error("matrix needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("vector lacks column '{0}' required by the stats")]
    MissingColumn(String),
    #[error("schema version mismatch: stats built for {stats}, vector carries {vector}")]
    SchemaSkew { stats: String, vector: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed sidecar or matrix file: {0}")]
    Decode(String),
}

/// One materialized row: feature values in spec-list order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<(String, FeatureValue)>,
    pub schema_version: String,
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<&FeatureValue> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

/// Stable identifier of a spec list: names and versions, hashed.
pub fn schema_version(specs: &[FeatureSpec]) -> String {
    let mut hasher = Sha256::new();
    for spec in specs {
        hasher.update(spec.name.as_bytes());
        hasher.update([0]);
        hasher.update(spec.version.as_bytes());
        hasher.update([1]);
    }
    hex::encode(&hasher.finalize()[..8])
}

/// Request scope for one artifact's tool calls.
pub fn scope_for(artifact: &JobArtifact) -> RequestScope {
    RequestScope {
        job_id: artifact.job.job_id.clone(),
        sql_text: artifact.job.sql_text.clone(),
        config: artifact.config.clone(),
        current_run_id: artifact.current_run_id.clone(),
        scheduling_time: artifact.scheduling_time,
    }
}

/// Cache key scoping tool results to (job, snapshot, spec list, tools).
pub fn cache_key_for(
    artifact: &JobArtifact,
    snapshot_id: &str,
    feature_version: &str,
    registry: &ToolRegistry,
) -> CacheKey {
    CacheKey {
        job_signature: CacheKey::job_signature(
            &artifact.job.job_id,
            &artifact.job.sql_text,
            &artifact.config,
        ),
        data_snapshot_id: snapshot_id.to_string(),
        feature_version: feature_version.to_string(),
        tool_version: registry.toolset_version(),
    }
}

/// Materializes every feature of one artifact. Per-feature failures
/// (tool errors, budget, timeouts) become MISSING values with reasons;
/// the vector always covers every spec. The sandbox budget is shared
/// across the vector's programs, counting only non-cached executions.
pub fn materialize(
    pairs: &[(FeatureSpec, GatedProgram)],
    artifact: &JobArtifact,
    registry: &ToolRegistry,
    policy: &ExecutionPolicy,
    cache_key: &CacheKey,
) -> FeatureVector {
    let scope = scope_for(artifact);
    let ambient = AmbientBindings::for_artifact(artifact);
    let mut budget = BudgetState::default();
    let values = pairs
        .iter()
        .map(|(spec, gated)| {
            let value =
                evaluate(gated.typed(), registry, policy, cache_key, &scope, &ambient, &mut budget);
            (spec.name.clone(), value)
        })
        .collect();
    let specs: Vec<FeatureSpec> = pairs.iter().map(|(s, _)| s.clone()).collect();
    FeatureVector { values, schema_version: schema_version(&specs) }
}

/// Raw vectors stacked over labeled rows, before encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMatrix {
    pub columns: Vec<String>,
    pub row_ids: Vec<String>,
    pub rows: Vec<FeatureVector>,
    pub schema_version: String,
}

/// Materializes a matrix over many artifacts; row ids name the rows
/// (run ids during training).
pub fn materialize_matrix(
    pairs: &[(FeatureSpec, GatedProgram)],
    artifacts: &[(String, JobArtifact)],
    registry: &ToolRegistry,
    policy: &ExecutionPolicy,
    snapshot_id: &str,
) -> RawMatrix {
    let specs: Vec<FeatureSpec> = pairs.iter().map(|(s, _)| s.clone()).collect();
    let version = schema_version(&specs);
    let mut rows = Vec::with_capacity(artifacts.len());
    let mut row_ids = Vec::with_capacity(artifacts.len());
    for (row_id, artifact) in artifacts {
        let key = cache_key_for(artifact, snapshot_id, &version, registry);
        rows.push(materialize(pairs, artifact, registry, policy, &key));
        row_ids.push(row_id.clone());
    }
    RawMatrix {
        columns: specs.iter().map(|s| s.name.clone()).collect(),
        row_ids,
        rows,
        schema_version: version,
    }
}

/// Per-column transformation fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// `(v - mean) / std`; a zero std encodes the column to zeros.
    ZScore { mean: f64, std: f64, default: f64 },
    /// One column per vocabulary entry plus a trailing OTHER bucket.
    OneHot { vocabulary: Vec<String>, default: String },
}

/// Stats of one source feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub feature: String,
    pub encoding: Encoding,
}

/// Everything needed to replay training-time encoding at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub schema_version: String,
    pub columns: Vec<ColumnStats>,
}

/// Encoded numeric matrix; columns expand one-hot features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub columns: Vec<String>,
    pub row_ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Largest one-hot vocabulary; rarer categories fold into OTHER.
pub const ONE_HOT_CAP: usize = 16;

fn numeric_default(spec: &FeatureSpec) -> f64 {
    match &spec.default_value {
        DefaultValue::Num(n) => *n,
        DefaultValue::Bool(b) => f64::from(*b),
        DefaultValue::Str(_) => 0.0,
    }
}

fn string_default(spec: &FeatureSpec) -> String {
    match &spec.default_value {
        DefaultValue::Str(s) => s.clone(),
        DefaultValue::Num(n) => n.to_string(),
        DefaultValue::Bool(b) => b.to_string(),
    }
}

/// Raw value as a number, with the spec default filling gaps.
fn raw_numeric(value: Option<&FeatureValue>, default: f64) -> f64 {
    match value {
        Some(FeatureValue::Num(n)) => *n,
        Some(FeatureValue::Bool(b)) => f64::from(*b),
        _ => default,
    }
}

fn raw_string(value: Option<&FeatureValue>, default: &str) -> String {
    match value {
        Some(FeatureValue::Str(s)) => s.clone(),
        Some(FeatureValue::Num(n)) => n.to_string(),
        Some(FeatureValue::Bool(b)) => b.to_string(),
        _ => default.to_string(),
    }
}

/// Fits per-column encodings on the raw matrix: missing values take the
/// spec default first, numerical columns are z-scored with population
/// statistics, categorical columns one-hot encode the most frequent
/// categories (ties broken lexicographically) up to the cap.
pub fn fit_normalize(
    raw: &RawMatrix,
    specs: &[FeatureSpec],
) -> Result<(FeatureMatrix, NormStats), MaterializeError> {
    if raw.rows.len() < 2 {
        return Err(MaterializeError::TooFewRows(raw.rows.len()));
    }
    let mut columns = Vec::with_capacity(specs.len());
    for spec in specs {
        let encoding = match spec.ftype {
            FeatureType::Numerical => {
                let default = numeric_default(spec);
                let values: Vec<f64> = raw
                    .rows
                    .iter()
                    .map(|r| raw_numeric(r.get(&spec.name), default))
                    .collect();
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                Encoding::ZScore { mean, std: var.sqrt(), default }
            }
            FeatureType::Categorical | FeatureType::TextDerived => {
                let default = string_default(spec);
                let mut counts: BTreeMap<String, usize> = BTreeMap::new();
                for row in &raw.rows {
                    *counts.entry(raw_string(row.get(&spec.name), &default)).or_default() += 1;
                }
                let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
                ranked.sort_by(|(na, ca), (nb, cb)| cb.cmp(ca).then(na.cmp(nb)));
                let vocabulary =
                    ranked.into_iter().take(ONE_HOT_CAP).map(|(name, _)| name).collect();
                Encoding::OneHot { vocabulary, default }
            }
        };
        columns.push(ColumnStats { feature: spec.name.clone(), encoding });
    }
    let stats = NormStats { schema_version: raw.schema_version.clone(), columns };
    // Encode through the replay path so training rows and later
    // inference rows are bit-identical by construction.
    let rows = raw
        .rows
        .iter()
        .map(|vector| apply_normalize(vector, &stats))
        .collect::<Result<Vec<_>, _>>()?;
    let matrix =
        FeatureMatrix { columns: encoded_column_names(&stats), row_ids: raw.row_ids.clone(), rows };
    Ok((matrix, stats))
}

/// Encoded column names, expanding one-hot vocabularies.
pub fn encoded_column_names(stats: &NormStats) -> Vec<String> {
    let mut names = Vec::new();
    for col in &stats.columns {
        match &col.encoding {
            Encoding::ZScore { .. } => names.push(col.feature.clone()),
            Encoding::OneHot { vocabulary, .. } => {
                for v in vocabulary {
                    names.push(format!("{}={v}", col.feature));
                }
                names.push(format!("{}=OTHER", col.feature));
            }
        }
    }
    names
}

/// Replays the fitted encoding over one vector. Unseen categories land
/// in the OTHER bucket; a value equal to the training mean encodes to 0.
pub fn apply_normalize(
    vector: &FeatureVector,
    stats: &NormStats,
) -> Result<Vec<f64>, MaterializeError> {
    if vector.schema_version != stats.schema_version {
        return Err(MaterializeError::SchemaSkew {
            stats: stats.schema_version.clone(),
            vector: vector.schema_version.clone(),
        });
    }
    let mut row = Vec::new();
    for col in &stats.columns {
        let value = vector.get(&col.feature);
        if value.is_none() {
            return Err(MaterializeError::MissingColumn(col.feature.clone()));
        }
        match &col.encoding {
            Encoding::ZScore { mean, std, default } => {
                let v = raw_numeric(value, *default);
                row.push(if *std == 0.0 { 0.0 } else { (v - mean) / std });
            }
            Encoding::OneHot { vocabulary, default } => {
                let v = raw_string(value, default);
                let hit = vocabulary.iter().position(|entry| *entry == v);
                for i in 0..vocabulary.len() {
                    row.push(if hit == Some(i) { 1.0 } else { 0.0 });
                }
                row.push(if hit.is_none() { 1.0 } else { 0.0 });
            }
        }
    }
    Ok(row)
}

/// Recommended repair for a flagged column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairAction {
    UseDefault,
    DropFeature,
    Reextract,
}

/// Raw-value quality of one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnQuality {
    pub name: String,
    pub missing_rate: f64,
    /// Values with |z| > 4 against the column's own present values.
    pub outlier_count: usize,
}

/// Quality assessment over the raw matrix, before default substitution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub columns: Vec<ColumnQuality>,
    /// Columns whose values conflict with the declared feature type.
    pub schema_mismatch: Vec<String>,
    pub repair_actions: Vec<(String, RepairAction)>,
}

/// Flags missingness, outliers, and schema mismatches on raw values.
/// Missing rate above 0.3 recommends dropping the feature; any lower
/// nonzero rate recommends default substitution; a schema mismatch
/// recommends re-extraction.
pub fn quality_check(raw: &RawMatrix, specs: &[FeatureSpec]) -> QualityReport {
    let n = raw.rows.len().max(1) as f64;
    let mut columns = Vec::with_capacity(specs.len());
    let mut schema_mismatch = Vec::new();
    let mut repair_actions = Vec::new();
    for spec in specs {
        let values: Vec<Option<&FeatureValue>> =
            raw.rows.iter().map(|r| r.get(&spec.name)).collect();
        let missing = values
            .iter()
            .filter(|v| v.map_or(true, |value| value.is_missing()))
            .count();
        let missing_rate = missing as f64 / n;
        let mismatched = values.iter().flatten().any(|v| match spec.ftype {
            FeatureType::Numerical => matches!(v, FeatureValue::Str(_)),
            FeatureType::Categorical | FeatureType::TextDerived => {
                matches!(v, FeatureValue::Num(_) | FeatureValue::Bool(_))
            }
        });
        let present: Vec<f64> = values.iter().flatten().filter_map(|v| v.as_num()).collect();
        let outlier_count = if present.len() >= 2 {
            let m = present.iter().sum::<f64>() / present.len() as f64;
            let var =
                present.iter().map(|v| (v - m).powi(2)).sum::<f64>() / present.len() as f64;
            let std = var.sqrt();
            if std == 0.0 {
                0
            } else {
                present.iter().filter(|v| ((*v - m) / std).abs() > 4.0).count()
            }
        } else {
            0
        };
        columns.push(ColumnQuality { name: spec.name.clone(), missing_rate, outlier_count });
        if mismatched {
            schema_mismatch.push(spec.name.clone());
            repair_actions.push((spec.name.clone(), RepairAction::Reextract));
        } else if missing_rate > 0.3 {
            repair_actions.push((spec.name.clone(), RepairAction::DropFeature));
        } else if missing_rate > 0.0 {
            repair_actions.push((spec.name.clone(), RepairAction::UseDefault));
        }
    }
    QualityReport { columns, schema_mismatch, repair_actions }
}

/// Writes `matrix.csv` (run_id plus encoded columns) and `columns.json`
/// (the NormStats sidecar) into `dir`.
pub fn save_matrix(
    dir: &Path,
    matrix: &FeatureMatrix,
    stats: &NormStats,
) -> Result<(), MaterializeError> {
    std::fs::create_dir_all(dir)?;
    let mut csv = std::fs::File::create(dir.join("matrix.csv"))?;
    writeln!(csv, "run_id,{}", matrix.columns.join(","))?;
    for (row_id, row) in matrix.row_ids.iter().zip(&matrix.rows) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(csv, "{row_id},{}", cells.join(","))?;
    }
    let sidecar = serde_json::to_string_pretty(stats)
        .map_err(|e| MaterializeError::Decode(e.to_string()))?;
    std::fs::write(dir.join("columns.json"), sidecar)?;
    Ok(())
}

/// Reads a matrix and its sidecar back; the inverse of `save_matrix`.
pub fn load_matrix(dir: &Path) -> Result<(FeatureMatrix, NormStats), MaterializeError> {
    let stats: NormStats =
        serde_json::from_str(&std::fs::read_to_string(dir.join("columns.json"))?)
            .map_err(|e| MaterializeError::Decode(e.to_string()))?;
    let text = std::fs::read_to_string(dir.join("matrix.csv"))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| MaterializeError::Decode("empty csv".into()))?;
    let columns: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let mut row_ids = Vec::new();
    let mut rows = Vec::new();
    for line in lines {
        let mut cells = line.split(',');
        let row_id =
            cells.next().ok_or_else(|| MaterializeError::Decode("short row".into()))?;
        let row: Vec<f64> = cells
            .map(|c| c.parse::<f64>().map_err(|e| MaterializeError::Decode(e.to_string())))
            .collect::<Result<_, _>>()?;
        if row.len() != columns.len() {
            return Err(MaterializeError::Decode(format!(
                "row {row_id} has {} cells, expected {}",
                row.len(),
                columns.len()
            )));
        }
        row_ids.push(row_id.to_string());
        rows.push(row);
    }
    Ok((FeatureMatrix { columns, row_ids, rows }, stats))
}
