//! Closed-form runtime simulation.
//!
//! A run's duration is `t0 + scan + shuffle`: scanned bytes stream through
//! the workers' aggregate throughput, shuffled bytes cross the network once
//! and are stretched by the straggler holding the heaviest key share. The
//! model is deliberately simple enough to hand-check and monotone in each
//! workload and config knob.

use super::{
    ClusterConfig, CorpusError, JobScript, RunTrace, StageMetric, TableMeta,
    BASE_OVERHEAD_SECONDS, DEFAULT_NOISE_SIGMA, DEFAULT_WORKLOAD_DRIFT_SIGMA,
};
use crate::seed::rng_for;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

/// Noise and drift knobs; both collapse to zero for noiseless corpora.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Sigma of the log-normal measurement noise on the final duration.
    pub noise_sigma: f64,
    /// Sigma of per-run log-normal drift on scanned bytes and amplification.
    /// Models day-to-day input growth and plan variation that no pre-run
    /// probe can observe.
    pub workload_drift_sigma: f64,
    /// Fixed overhead added to every run, seconds.
    pub base_overhead_seconds: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            noise_sigma: DEFAULT_NOISE_SIGMA,
            workload_drift_sigma: DEFAULT_WORKLOAD_DRIFT_SIGMA,
            base_overhead_seconds: BASE_OVERHEAD_SECONDS,
        }
    }
}

impl SimOptions {
    pub fn noiseless() -> Self {
        SimOptions {
            noise_sigma: 0.0,
            workload_drift_sigma: 0.0,
            ..SimOptions::default()
        }
    }
}

/// Intermediate quantities of one simulated run, before noise.
#[derive(Debug, Clone, Copy)]
pub struct RunPhysics {
    /// Bytes actually read after pruning, including drift.
    pub scan_bytes: f64,
    /// Bytes crossing the network, including drift.
    pub shuffle_bytes: f64,
    /// Straggler multiplier, >= 1.
    pub skew: f64,
    /// Seconds spent scanning.
    pub scan_seconds: f64,
    /// Seconds spent shuffling (already skew-stretched).
    pub shuffle_seconds: f64,
    /// Noise-free total duration.
    pub total_seconds: f64,
}

/// Generalized harmonic number `H_k(s) = sum_{i=1..k} i^(-s)`.
pub(crate) fn harmonic(k: u32, s: f64) -> f64 {
    (1..=k).map(|i| (i as f64).powf(-s)).sum()
}

/// Share of shuffle traffic landing on the hottest key of a Zipf-distributed
/// key column.
pub(crate) fn hottest_key_share(table: &TableMeta) -> f64 {
    1.0 / harmonic(table.key_cardinality, table.zipf_exponent)
}

fn physics(
    job: &JobScript,
    config: &ClusterConfig,
    catalog: &BTreeMap<&str, &TableMeta>,
    scan_drift: f64,
    amp_drift: f64,
    base_overhead: f64,
) -> Result<RunPhysics, CorpusError> {
    let mut scan_bytes = 0.0;
    for scan in &job.scanned_tables {
        let table = catalog
            .get(scan.table.as_str())
            .ok_or_else(|| CorpusError::UnknownTable(scan.table.clone()))?;
        scan_bytes += table.total_bytes as f64 * scan.selectivity;
    }
    scan_bytes *= scan_drift;

    let skew = match &job.skew_table {
        Some(name) => {
            let table = catalog
                .get(name.as_str())
                .ok_or_else(|| CorpusError::UnknownTable(name.clone()))?;
            (config.workers as f64 * hottest_key_share(table)).max(1.0)
        }
        None => 1.0,
    };

    let shuffle_bytes = job.amplification * amp_drift * scan_bytes;
    let workers = config.workers as f64;
    let scan_seconds =
        scan_bytes / (workers * config.per_worker_throughput_bps * config.photon_factor);
    let shuffle_seconds = shuffle_bytes / (workers * config.network_bw_bps) * skew;

    Ok(RunPhysics {
        scan_bytes,
        shuffle_bytes,
        skew,
        scan_seconds,
        shuffle_seconds,
        total_seconds: base_overhead + scan_seconds + shuffle_seconds,
    })
}

/// Simulates one run with generated identity fields. See [`simulate_run_at`].
pub fn simulate_run(
    job: &JobScript,
    config: &ClusterConfig,
    catalog: &[TableMeta],
    seed: u64,
    noiseless: bool,
) -> Result<RunTrace, CorpusError> {
    let run_id = format!("{}_s{:016x}", job.job_id, seed);
    simulate_run_at(job, config, catalog, seed, noiseless, &run_id, 0, SimOptions::default())
}

/// Simulates one run with explicit identity and options.
///
/// `noiseless` turns off both measurement noise and workload drift, making
/// the duration an exact function of the script, config, and catalog.
/// Stage walls always sum to the recorded duration, so post-run stage detail
/// reconstructs the label exactly (which is precisely why reading it pre-run
/// is a leak).
#[allow(clippy::too_many_arguments)]
pub fn simulate_run_at(
    job: &JobScript,
    config: &ClusterConfig,
    catalog: &[TableMeta],
    seed: u64,
    noiseless: bool,
    run_id: &str,
    started_at: i64,
    options: SimOptions,
) -> Result<RunTrace, CorpusError> {
    job.validate()?;
    config.validate()?;
    let map: BTreeMap<&str, &TableMeta> = catalog.iter().map(|t| (t.name.as_str(), t)).collect();

    let mut rng = rng_for(seed, "run-noise");
    let (scan_drift, amp_drift, noise) = if noiseless {
        // Burn the same three draws either way so seeds line up across modes.
        let _: (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
        (1.0, 1.0, 1.0)
    } else {
        let drift = Normal::new(0.0, options.workload_drift_sigma)
            .expect("drift sigma is non-negative");
        let noise = Normal::new(0.0, options.noise_sigma).expect("noise sigma is non-negative");
        (
            drift.sample(&mut rng).exp(),
            drift.sample(&mut rng).exp(),
            noise.sample(&mut rng).exp(),
        )
    };

    let phys = physics(job, config, &map, scan_drift, amp_drift, options.base_overhead_seconds)?;
    let duration = phys.total_seconds * noise;

    // Stage walls split the observed duration in the same proportions as the
    // noise-free terms; scan absorbs the fixed overhead.
    let scan_wall = duration * (options.base_overhead_seconds + phys.scan_seconds) / phys.total_seconds;
    let shuffle_wall = duration * phys.shuffle_seconds / phys.total_seconds;

    let workers = config.workers as f64;
    let mut stages = vec![StageMetric {
        stage_id: 0,
        task_durations_seconds: vec![scan_wall; config.workers as usize],
        shuffle_bytes: 0,
        wall_seconds: scan_wall,
    }];
    if phys.shuffle_seconds > 0.0 {
        let tasks = match &job.skew_table {
            Some(name) => {
                // Task k handles the k-th hottest key; the hottest sets the wall.
                let table = map[name.as_str()];
                let h = harmonic(table.key_cardinality, table.zipf_exponent);
                let n = config.workers.min(table.key_cardinality).max(1);
                let p_max = 1.0 / h;
                (1..=n)
                    .map(|k| shuffle_wall * ((k as f64).powf(-table.zipf_exponent) / h) / p_max)
                    .collect()
            }
            None => vec![shuffle_wall; config.workers as usize],
        };
        stages.push(StageMetric {
            stage_id: 1,
            task_durations_seconds: tasks,
            shuffle_bytes: phys.shuffle_bytes as u64,
            wall_seconds: shuffle_wall,
        });
    }

    let shuffle_bytes = phys.shuffle_bytes as u64;
    let spill_bytes = if phys.skew > 1.5 { shuffle_bytes / 4 } else { 0 };
    let trace = RunTrace {
        run_id: run_id.to_string(),
        job_id: job.job_id.clone(),
        config: config.clone(),
        started_at,
        duration_seconds: duration,
        stage_metrics: stages,
        shuffle_read_bytes: shuffle_bytes,
        shuffle_write_bytes: shuffle_bytes,
        spill_bytes,
    };
    debug_assert!(workers >= 1.0);
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ScannedTable;

    fn catalog_100gb() -> Vec<TableMeta> {
        vec![TableMeta {
            name: "t_00".into(),
            total_bytes: 100_000_000_000,
            row_count: 1_000_000_000,
            partition_count: 100,
            partition_column: "ds".into(),
            key_cardinality: 5,
            zipf_exponent: 1.0,
        }]
    }

    fn job_one_table() -> JobScript {
        JobScript {
            job_id: "job_000".into(),
            sql_text: "SELECT k, count(*) FROM t_00 GROUP BY k".into(),
            scanned_tables: vec![ScannedTable {
                table: "t_00".into(),
                selectivity: 0.01,
            }],
            has_group_by: true,
            has_join: false,
            amplification: 0.5,
            skew_table: Some("t_00".into()),
        }
    }

    fn config_w4() -> ClusterConfig {
        ClusterConfig {
            instance_name: "F4s".into(),
            workers: 4,
            per_worker_throughput_bps: 5.0e7,
            network_bw_bps: 1.0e8,
            photon_factor: 1.0,
            price_per_second: 0.008,
        }
    }

    /// Hand computation: scan = 1e9 B -> 5.0 s at 4 x 5e7 B/s; hottest key
    /// share 1/H_5(1) = 60/137; skew = 4 * 0.437956 = 1.751825; shuffle =
    /// 0.5e9 B / 4e8 B/s * skew = 2.18978 s; total = 20 + 5 + 2.18978.
    #[test]
    fn noiseless_duration_matches_hand_computation() {
        let trace = simulate_run(&job_one_table(), &config_w4(), &catalog_100gb(), 7, true).unwrap();
        assert!((trace.duration_seconds - 27.19).abs() < 0.01, "got {}", trace.duration_seconds);
    }

    #[test]
    fn harmonic_of_five_at_one_is_137_over_60() {
        assert!((harmonic(5, 1.0) - 137.0 / 60.0).abs() < 1e-12);
    }

    #[test]
    fn stage_walls_sum_to_duration() {
        for seed in [1_u64, 2, 3] {
            for noiseless in [true, false] {
                let trace =
                    simulate_run(&job_one_table(), &config_w4(), &catalog_100gb(), seed, noiseless)
                        .unwrap();
                let wall_sum: f64 = trace.stage_metrics.iter().map(|s| s.wall_seconds).sum();
                assert!(
                    (wall_sum - trace.duration_seconds).abs() < 1e-9,
                    "walls {wall_sum} vs duration {}",
                    trace.duration_seconds
                );
            }
        }
    }

    #[test]
    fn same_seed_reproduces_identical_trace() {
        let a = simulate_run(&job_one_table(), &config_w4(), &catalog_100gb(), 5, false).unwrap();
        let b = simulate_run(&job_one_table(), &config_w4(), &catalog_100gb(), 5, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_table_is_an_error_naming_the_table() {
        let mut job = job_one_table();
        job.scanned_tables[0].table = "t_missing".into();
        job.skew_table = None;
        let err = simulate_run(&job, &config_w4(), &catalog_100gb(), 1, true).unwrap_err();
        assert!(err.to_string().contains("t_missing"), "got {err}");
    }

    #[test]
    fn skew_task_spread_follows_key_shares() {
        let trace = simulate_run(&job_one_table(), &config_w4(), &catalog_100gb(), 9, true).unwrap();
        let shuffle = &trace.stage_metrics[1];
        let tasks = &shuffle.task_durations_seconds;
        // Hottest-key task is the wall; second task carries half its share.
        assert!((tasks[0] - shuffle.wall_seconds).abs() < 1e-12);
        assert!((tasks[1] / tasks[0] - 0.5).abs() < 1e-12);
        assert!(tasks.iter().all(|d| *d > 0.0));
    }

    #[test]
    fn more_workers_never_slow_a_noiseless_run() {
        let catalog = catalog_100gb();
        let job = job_one_table();
        let mut last = f64::INFINITY;
        for workers in [1_u32, 2, 4, 8, 16, 32, 64] {
            let mut config = config_w4();
            config.workers = workers;
            let trace = simulate_run(&job, &config, &catalog, 3, true).unwrap();
            assert!(
                trace.duration_seconds <= last + 1e-9,
                "workers {workers} regressed: {} > {last}",
                trace.duration_seconds
            );
            last = trace.duration_seconds;
        }
    }
}
