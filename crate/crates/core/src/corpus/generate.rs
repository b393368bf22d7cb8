//! Seeded corpus generation: catalog, job scripts, fleet, and run history.

use super::{
    simulate::simulate_run_at, ClusterConfig, CorpusError, HistoryDataset, JobScript,
    ScannedTable, SimOptions, TableMeta,
};
use crate::seed::{derive, rng_for};
use rand::seq::SliceRandom;
use rand::Rng;

/// Unix seconds of the first run in every generated history (2025-01-01).
const HISTORY_EPOCH: i64 = 1_735_689_600;

const PARTITION_COLUMNS: [&str; 4] = ["ds", "event_date", "region", "tenant_id"];

/// Shape of a generated corpus. The default is the reference corpus used
/// throughout the test suite: seed 42, 12 tables, 40 jobs, 5 runs per job.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_tables: usize,
    pub n_jobs: usize,
    pub runs_per_job: usize,
    /// Disables measurement noise and workload drift.
    pub noiseless: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 42,
            n_tables: 12,
            n_jobs: 40,
            runs_per_job: 5,
            noiseless: false,
        }
    }
}

impl CorpusSpec {
    /// Reference corpus with all stochastic terms switched off.
    pub fn noiseless_reference() -> Self {
        CorpusSpec {
            noiseless: true,
            ..CorpusSpec::default()
        }
    }

    /// Generates the full dataset this spec describes.
    pub fn generate(&self) -> Result<HistoryDataset, CorpusError> {
        let catalog = generate_catalog(self.seed, self.n_tables);
        let jobs = generate_jobs(self.seed, &catalog, self.n_jobs);
        let fleet = default_fleet();
        build_history(&catalog, &jobs, &fleet, self.runs_per_job, self.seed, self.noiseless)
    }
}

/// Generates `n_tables` tables with log-uniform sizes between 2 GB and
/// 100 GB, so scan terms dominate the fixed overhead without letting one
/// giant table swallow the corpus variance.
pub fn generate_catalog(seed: u64, n_tables: usize) -> Vec<TableMeta> {
    let mut rng = rng_for(seed, "catalog");
    let (ln_lo, ln_hi) = ((2.0e9_f64).ln(), (1.0e11_f64).ln());
    (0..n_tables)
        .map(|i| {
            let total_bytes = (ln_lo + rng.gen::<f64>() * (ln_hi - ln_lo)).exp() as u64;
            let row_width = rng.gen_range(64_u64..=512);
            let row_count = (total_bytes / row_width).max(1);
            let partition_count = (rng.gen_range(1_u64..=1000).min(row_count)) as u32;
            TableMeta {
                name: format!("t_{i:02}"),
                total_bytes,
                row_count,
                partition_count,
                partition_column: PARTITION_COLUMNS[rng.gen_range(0..PARTITION_COLUMNS.len())]
                    .to_string(),
                key_cardinality: rng.gen_range(8_u32..=64),
                zipf_exponent: rng.gen_range(0.0..1.0),
            }
        })
        .collect()
}

/// Generates recurring jobs over the catalog. Most scans are heavily pruned;
/// joins and group-bys add shuffle amplification and sometimes key skew.
pub fn generate_jobs(seed: u64, catalog: &[TableMeta], n_jobs: usize) -> Vec<JobScript> {
    assert!(!catalog.is_empty(), "catalog must not be empty");
    let mut rng = rng_for(seed, "jobs");
    (0..n_jobs)
        .map(|i| {
            let job_id = format!("job_{i:03}");
            let n_scanned = match rng.gen::<f64>() {
                x if x < 0.20 => 1,
                x if x < 0.65 => 2,
                _ => 3,
            }
            .min(catalog.len());
            let mut indices: Vec<usize> = (0..catalog.len()).collect();
            indices.shuffle(&mut rng);
            indices.truncate(n_scanned);
            indices.sort_unstable();
            let scanned_tables: Vec<ScannedTable> = indices
                .iter()
                .map(|&t| {
                    let selectivity = if rng.gen::<f64>() < 0.7 {
                        let (lo, hi) = ((0.02_f64).ln(), (0.7_f64).ln());
                        (lo + rng.gen::<f64>() * (hi - lo)).exp()
                    } else {
                        rng.gen_range(0.7..=1.0)
                    };
                    ScannedTable {
                        table: catalog[t].name.clone(),
                        selectivity,
                    }
                })
                .collect();
            let has_join = rng.gen_bool(0.5);
            let has_group_by = rng.gen_bool(0.45);
            let amplification = if has_join || has_group_by {
                let base = if has_join { 0.9 } else { 0.0 } + if has_group_by { 0.6 } else { 0.0 };
                base * rng.gen_range(0.8..1.2)
            } else {
                0.0
            };
            let skew_table = if has_join && rng.gen_bool(0.4) {
                Some(scanned_tables[rng.gen_range(0..scanned_tables.len())].table.clone())
            } else {
                None
            };
            let sql_text = synthesize_sql(&job_id, &scanned_tables, has_join, has_group_by, catalog);
            JobScript {
                job_id,
                sql_text,
                scanned_tables,
                has_group_by,
                has_join,
                amplification,
                skew_table,
            }
        })
        .collect()
}

fn synthesize_sql(
    job_id: &str,
    scans: &[ScannedTable],
    has_join: bool,
    has_group_by: bool,
    catalog: &[TableMeta],
) -> String {
    let partition_col = |name: &str| {
        catalog
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.partition_column.clone())
            .unwrap_or_else(|| "ds".to_string())
    };
    let select = if has_group_by { "k, COUNT(*) AS c" } else { "*" };
    let mut sql = format!("-- {job_id}\nSELECT {select} FROM {}", scans[0].table);
    if has_join && scans.len() == 1 {
        sql.push_str(&format!(" JOIN {} b ON {}.k = b.k", scans[0].table, scans[0].table));
    }
    for scan in scans.iter().skip(1) {
        if has_join {
            sql.push_str(&format!(" JOIN {} ON {}.k = {}.k", scan.table, scans[0].table, scan.table));
        } else {
            sql.push_str(&format!(", {}", scan.table));
        }
    }
    let predicates: Vec<String> = scans
        .iter()
        .filter(|s| s.selectivity < 1.0)
        .map(|s| format!("{}.{} >= '2025-01-01'", s.table, partition_col(&s.table)))
        .collect();
    if !predicates.is_empty() {
        sql.push_str(" WHERE ");
        sql.push_str(&predicates.join(" AND "));
    }
    if has_group_by {
        sql.push_str(" GROUP BY k");
    }
    sql
}

/// The cluster shapes jobs can run on. Price scales with size; the Photon
/// variant trades a premium for faster scans.
pub fn default_fleet() -> Vec<ClusterConfig> {
    let base = |name: &str, workers: u32, photon: f64, price: f64| ClusterConfig {
        instance_name: name.to_string(),
        workers,
        per_worker_throughput_bps: 5.0e7,
        network_bw_bps: 1.0e8,
        photon_factor: photon,
        price_per_second: price,
    };
    vec![
        base("Standard_F4s", 4, 1.0, 0.008),
        base("Standard_F8s", 8, 1.0, 0.016),
        base("Standard_F16s", 16, 1.0, 0.032),
        base("Standard_F32s", 32, 1.0, 0.064),
        base("Standard_F16s_Photon", 16, 1.8, 0.048),
    ]
}

/// Simulates `runs_per_job` runs for every job. Each job cycles through the
/// fleet from a seeded starting offset, so histories cover varied configs;
/// timestamps are strictly increasing within a job.
pub fn build_history(
    catalog: &[TableMeta],
    jobs: &[JobScript],
    fleet: &[ClusterConfig],
    runs_per_job: usize,
    seed: u64,
    noiseless: bool,
) -> Result<HistoryDataset, CorpusError> {
    if fleet.is_empty() {
        return Err(CorpusError::EmptyFleet);
    }
    let mut rng = rng_for(seed, "history");
    let options = if noiseless { SimOptions::noiseless() } else { SimOptions::default() };
    let mut runs = Vec::with_capacity(jobs.len() * runs_per_job);
    for (job_idx, job) in jobs.iter().enumerate() {
        let start = rng.gen_range(0..fleet.len());
        for r in 0..runs_per_job {
            let config = &fleet[(start + r) % fleet.len()];
            let run_id = format!("{}_r{r}", job.job_id);
            let started_at = HISTORY_EPOCH + (r as i64) * 86_400 + (job_idx as i64) * 60;
            let run_seed = derive(seed, &format!("run/{}/{r}", job.job_id));
            runs.push(simulate_run_at(
                job, config, catalog, run_seed, noiseless, &run_id, started_at, options,
            )?);
        }
    }
    runs.sort_by(|a, b| a.started_at.cmp(&b.started_at).then(a.run_id.cmp(&b.run_id)));
    Ok(HistoryDataset {
        catalog: catalog.to_vec(),
        fleet: fleet.to_vec(),
        jobs: jobs.to_vec(),
        runs,
    })
}
