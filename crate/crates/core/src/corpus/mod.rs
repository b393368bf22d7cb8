//! Synthetic workload corpus: tables, jobs, cluster configs, and run traces.
//!
//! The corpus plays the role of a production job log at desk scale. Runtimes
//! come from a closed-form cost model (scan + skew-amplified shuffle on top
//! of a fixed overhead), so every downstream claim about feature quality can
//! be checked against known physics instead of a live cluster.

mod generate;
mod simulate;
mod store;

pub use generate::{build_history, default_fleet, generate_catalog, generate_jobs, CorpusSpec};
pub use simulate::{simulate_run, simulate_run_at, RunPhysics, SimOptions};
pub use store::{load_corpus, save_corpus};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Fixed per-run overhead in seconds (cluster spin-up, planning, commit).
pub const BASE_OVERHEAD_SECONDS: f64 = 20.0;
/// Default multiplicative log-normal noise sigma on simulated durations.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;
/// Default sigma of per-run workload drift (scan volume and shuffle
/// amplification wander run to run; zero in noiseless corpora).
pub const DEFAULT_WORKLOAD_DRIFT_SIGMA: f64 = 0.3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid {kind} `{id}`: {field} {reason}")]
    Invalid {
        kind: &'static str,
        id: String,
        field: &'static str,
        reason: String,
    },
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("unknown job `{0}`")]
    UnknownJob(String),
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("fleet is empty")]
    EmptyFleet,
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus decode at {path} line {line}: {source}")]
    Decode {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
}

/// One table in the synthetic catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub name: String,
    pub total_bytes: u64,
    pub row_count: u64,
    /// Number of partitions; at least 1.
    pub partition_count: u32,
    pub partition_column: String,
    /// Distinct join-key values; drives how unevenly shuffle work spreads.
    pub key_cardinality: u32,
    /// Zipf exponent of the key distribution; 0 means uniform keys.
    pub zipf_exponent: f64,
}

impl TableMeta {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |field: &'static str, reason: String| CorpusError::Invalid {
            kind: "table",
            id: self.name.clone(),
            field,
            reason,
        };
        if self.name.is_empty() {
            return Err(fail("name", "must be non-empty".into()));
        }
        if self.partition_count < 1 {
            return Err(fail("partition_count", "must be >= 1".into()));
        }
        if self.key_cardinality < 1 {
            return Err(fail("key_cardinality", "must be >= 1".into()));
        }
        if !self.zipf_exponent.is_finite() || self.zipf_exponent < 0.0 {
            return Err(fail(
                "zipf_exponent",
                format!("must be finite and >= 0, got {}", self.zipf_exponent),
            ));
        }
        Ok(())
    }
}

/// One cluster shape a job can run on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub instance_name: String,
    pub workers: u32,
    /// Effective scan throughput of one worker, bytes per second.
    pub per_worker_throughput_bps: f64,
    /// Cross-worker network bandwidth available to the shuffle, bytes per second.
    pub network_bw_bps: f64,
    /// Vectorized-engine speedup; 1.0 means no acceleration.
    pub photon_factor: f64,
    pub price_per_second: f64,
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |field: &'static str, reason: String| CorpusError::Invalid {
            kind: "cluster_config",
            id: self.instance_name.clone(),
            field,
            reason,
        };
        if self.workers < 1 {
            return Err(fail("workers", "must be >= 1".into()));
        }
        if !(self.per_worker_throughput_bps > 0.0) {
            return Err(fail("per_worker_throughput_bps", "must be > 0".into()));
        }
        if !(self.network_bw_bps > 0.0) {
            return Err(fail("network_bw_bps", "must be > 0".into()));
        }
        if !(self.photon_factor >= 1.0) {
            return Err(fail("photon_factor", "must be >= 1".into()));
        }
        if !(self.price_per_second >= 0.0) {
            return Err(fail("price_per_second", "must be >= 0".into()));
        }
        Ok(())
    }
}

/// A table scan performed by a job, with the fraction of bytes surviving
/// partition pruning and predicate filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScannedTable {
    pub table: String,
    /// Fraction of the table actually read, in (0, 1].
    pub selectivity: f64,
}

/// One recurring job: its query text plus the workload traits the simulator
/// consumes directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobScript {
    pub job_id: String,
    pub sql_text: String,
    pub scanned_tables: Vec<ScannedTable>,
    pub has_group_by: bool,
    pub has_join: bool,
    /// Shuffle volume as a fraction of scanned bytes.
    pub amplification: f64,
    /// Table whose key distribution skews the shuffle, if any.
    pub skew_table: Option<String>,
}

impl JobScript {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |field: &'static str, reason: String| CorpusError::Invalid {
            kind: "job",
            id: self.job_id.clone(),
            field,
            reason,
        };
        if self.job_id.is_empty() {
            return Err(fail("job_id", "must be non-empty".into()));
        }
        if self.scanned_tables.is_empty() {
            return Err(fail("scanned_tables", "must scan at least one table".into()));
        }
        for scan in &self.scanned_tables {
            if !(scan.selectivity > 0.0 && scan.selectivity <= 1.0) {
                return Err(fail(
                    "scanned_tables",
                    format!("selectivity for `{}` must be in (0, 1], got {}", scan.table, scan.selectivity),
                ));
            }
        }
        if !self.amplification.is_finite() || self.amplification < 0.0 {
            return Err(fail(
                "amplification",
                format!("must be finite and >= 0, got {}", self.amplification),
            ));
        }
        if !self.has_group_by && !self.has_join && self.amplification != 0.0 {
            return Err(fail(
                "amplification",
                "must be 0 when the job has neither a join nor a group-by".into(),
            ));
        }
        if let Some(skew) = &self.skew_table {
            if !self.scanned_tables.iter().any(|s| &s.table == skew) {
                return Err(fail(
                    "skew_table",
                    format!("`{skew}` is not among the scanned tables"),
                ));
            }
        }
        Ok(())
    }

    /// Selectivity of one scanned table; `None` if the job does not scan it.
    pub fn selectivity_of(&self, table: &str) -> Option<f64> {
        self.scanned_tables
            .iter()
            .find(|s| s.table == table)
            .map(|s| s.selectivity)
    }
}

/// Per-stage execution detail of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetric {
    pub stage_id: u32,
    /// Wall-clock seconds of each task; never empty.
    pub task_durations_seconds: Vec<f64>,
    pub shuffle_bytes: u64,
    /// Wall-clock seconds the stage occupied the cluster (the straggler task).
    pub wall_seconds: f64,
}

/// One recorded execution of a job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub run_id: String,
    pub job_id: String,
    pub config: ClusterConfig,
    /// Unix seconds when the run started.
    pub started_at: i64,
    /// The prediction target.
    pub duration_seconds: f64,
    pub stage_metrics: Vec<StageMetric>,
    pub shuffle_read_bytes: u64,
    pub shuffle_write_bytes: u64,
    pub spill_bytes: u64,
}

impl RunTrace {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |field: &'static str, reason: String| CorpusError::Invalid {
            kind: "run",
            id: self.run_id.clone(),
            field,
            reason,
        };
        if !(self.duration_seconds > 0.0) {
            return Err(fail(
                "duration_seconds",
                format!("must be > 0, got {}", self.duration_seconds),
            ));
        }
        for stage in &self.stage_metrics {
            if stage.task_durations_seconds.is_empty() {
                return Err(fail("stage_metrics", format!("stage {} has no tasks", stage.stage_id)));
            }
        }
        self.config.validate()?;
        Ok(())
    }
}

/// The corpus as one value: catalog, fleet, job scripts, and the full run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryDataset {
    pub catalog: Vec<TableMeta>,
    pub fleet: Vec<ClusterConfig>,
    pub jobs: Vec<JobScript>,
    /// All runs, ascending by `started_at` (ties broken by run id).
    pub runs: Vec<RunTrace>,
}

impl HistoryDataset {
    pub fn table(&self, name: &str) -> Option<&TableMeta> {
        self.catalog.iter().find(|t| t.name == name)
    }

    pub fn job(&self, job_id: &str) -> Option<&JobScript> {
        self.jobs.iter().find(|j| j.job_id == job_id)
    }

    pub fn run(&self, run_id: &str) -> Option<&RunTrace> {
        self.runs.iter().find(|r| r.run_id == run_id)
    }

    /// Runs of one job, ascending by start time.
    pub fn runs_for_job(&self, job_id: &str) -> Vec<&RunTrace> {
        let mut runs: Vec<&RunTrace> = self.runs.iter().filter(|r| r.job_id == job_id).collect();
        runs.sort_by(|a, b| a.started_at.cmp(&b.started_at).then(a.run_id.cmp(&b.run_id)));
        runs
    }

    /// Catalog keyed by table name.
    pub fn catalog_map(&self) -> BTreeMap<&str, &TableMeta> {
        self.catalog.iter().map(|t| (t.name.as_str(), t)).collect()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for t in &self.catalog {
            t.validate()?;
        }
        for c in &self.fleet {
            c.validate()?;
        }
        for j in &self.jobs {
            j.validate()?;
            for scan in &j.scanned_tables {
                if self.table(&scan.table).is_none() {
                    return Err(CorpusError::UnknownTable(scan.table.clone()));
                }
            }
        }
        for r in &self.runs {
            r.validate()?;
            if self.job(&r.job_id).is_none() {
                return Err(CorpusError::UnknownJob(r.job_id.clone()));
            }
        }
        Ok(())
    }
}

/// Everything known about a job at the moment a prediction is requested:
/// the script, the candidate config, and runs that finished strictly before
/// the scheduling time. Post-run detail of the run being predicted is never
/// part of the artifact.
#[derive(Debug, Clone)]
pub struct JobArtifact {
    pub job: JobScript,
    pub config: ClusterConfig,
    /// Prior runs of the same job, ascending by start time.
    pub prior_runs: Vec<RunTrace>,
    /// Unix seconds of the prediction moment.
    pub scheduling_time: i64,
    /// Run id the prediction is for, when the run exists in the log
    /// (training-time materialization). `None` for fresh scheduling requests.
    pub current_run_id: Option<String>,
}

impl JobArtifact {
    /// Artifact for a recorded run: history is everything that started
    /// strictly earlier, and the run itself becomes the leakage target.
    pub fn for_run(dataset: &HistoryDataset, run_id: &str) -> Result<Self, CorpusError> {
        let run = dataset
            .run(run_id)
            .ok_or_else(|| CorpusError::UnknownRun(run_id.to_string()))?;
        let job = dataset
            .job(&run.job_id)
            .ok_or_else(|| CorpusError::UnknownJob(run.job_id.clone()))?;
        let prior_runs = dataset
            .runs_for_job(&run.job_id)
            .into_iter()
            .filter(|r| r.started_at < run.started_at)
            .cloned()
            .collect();
        Ok(JobArtifact {
            job: job.clone(),
            config: run.config.clone(),
            prior_runs,
            scheduling_time: run.started_at,
            current_run_id: Some(run.run_id.clone()),
        })
    }

    /// Artifact for scheduling a job that has not run yet at `at_time`.
    pub fn for_scheduling(
        dataset: &HistoryDataset,
        job_id: &str,
        config: ClusterConfig,
        at_time: i64,
    ) -> Result<Self, CorpusError> {
        let job = dataset
            .job(job_id)
            .ok_or_else(|| CorpusError::UnknownJob(job_id.to_string()))?;
        let prior_runs = dataset
            .runs_for_job(job_id)
            .into_iter()
            .filter(|r| r.started_at < at_time)
            .cloned()
            .collect();
        Ok(JobArtifact {
            job: job.clone(),
            config,
            prior_runs,
            scheduling_time: at_time,
            current_run_id: None,
        })
    }

    /// Same artifact with the candidate config swapped in. History and script
    /// are shared; only config-derived features change.
    pub fn with_config(&self, config: ClusterConfig) -> Self {
        JobArtifact {
            config,
            ..self.clone()
        }
    }
}
