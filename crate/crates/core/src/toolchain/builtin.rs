//! Built-in tools over a [`HistoryDataset`].
//!
//! Three namespaces: `meta.*` reads catalog facts, `log.*` reads the run
//! log bounded by the request's scheduling horizon, `sql.*` runs sandboxed
//! plan probes. All are read-only and deterministic for a fixed corpus.

use super::{
    ArgValue, AvailabilitySpec, Availability, ExecutionPolicy, FieldKind, FieldValue, OutputSchema,
    ParamKind, ParamSpec, Record, RecordSchema, RequestScope, ToolCategory, ToolDescriptor,
    ToolRegistry, ToolValue,
};
use crate::corpus::{HistoryDataset, RunTrace};
use std::collections::BTreeSet;
use std::sync::Arc;

/// Name of the optional run-summary tool used by the leakage test suite.
pub const RUN_SUMMARY_TOOL: &str = "log.run_summary";

/// vCPUs provisioned per worker across the synthetic fleet.
const VCPU_PER_WORKER: f64 = 4.0;
/// Memory per worker in GiB across the synthetic fleet.
const MEMORY_GB_PER_WORKER: f64 = 16.0;

fn record(fields: Vec<(&str, FieldValue)>) -> Record {
    fields.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn schema(fields: &[(&str, FieldKind)]) -> RecordSchema {
    RecordSchema {
        fields: fields.iter().map(|(n, k)| (n.to_string(), *k)).collect(),
    }
}

fn str_arg<'a>(args: &'a [ArgValue], idx: usize) -> &'a str {
    args[idx].as_str().expect("arity and types checked by registry")
}

fn num_arg(args: &[ArgValue], idx: usize) -> f64 {
    match &args[idx] {
        ArgValue::Num(n) => *n,
        _ => unreachable!("arity and types checked by registry"),
    }
}

/// Runs of one job visible at the scope's scheduling time, ascending start.
fn visible_history<'a>(dataset: &'a HistoryDataset, scope: &RequestScope, job_id: &str) -> Vec<&'a RunTrace> {
    dataset
        .runs_for_job(job_id)
        .into_iter()
        .filter(|r| r.started_at < scope.scheduling_time)
        .collect()
}

fn history_record(run: &RunTrace) -> Record {
    let workers = run.config.workers as f64;
    record(vec![
        ("run_id", FieldValue::Str(run.run_id.clone())),
        ("started_at", FieldValue::Num(run.started_at as f64)),
        ("duration_seconds", FieldValue::Num(run.duration_seconds)),
        ("workers", FieldValue::Num(workers)),
        ("vcpu", FieldValue::Num(workers * VCPU_PER_WORKER)),
        ("memory_gb", FieldValue::Num(workers * MEMORY_GB_PER_WORKER)),
        (
            "dbu",
            FieldValue::Num(run.config.price_per_second * run.duration_seconds),
        ),
        ("photon_factor", FieldValue::Num(run.config.photon_factor)),
        (
            "price_per_second",
            FieldValue::Num(run.config.price_per_second),
        ),
    ])
}

/// Registers the built-in toolset over `dataset` and returns the registry.
pub fn builtin_registry(dataset: Arc<HistoryDataset>) -> ToolRegistry {
    let mut registry = ToolRegistry::new();

    let ds = dataset.clone();
    registry
        .register(
            ToolDescriptor {
                name: "meta.table_stats".into(),
                params: vec![ParamSpec { name: "table".into(), kind: ParamKind::Str }],
                output: OutputSchema::Record(schema(&[
                    ("total_bytes", FieldKind::Num),
                    ("row_count", FieldKind::Num),
                    ("partition_count", FieldKind::Num),
                ])),
                availability: AvailabilitySpec::Fixed(Availability::PrerunStatic),
                category: ToolCategory::Metadata,
                cost_estimate_ms: 5,
                version: "1".into(),
            },
            Arc::new(move |args, _scope| {
                let table = str_arg(args, 0);
                let meta = ds.table(table).ok_or_else(|| format!("unknown table `{table}`"))?;
                Ok(ToolValue::Record(record(vec![
                    ("total_bytes", FieldValue::Num(meta.total_bytes as f64)),
                    ("row_count", FieldValue::Num(meta.row_count as f64)),
                    ("partition_count", FieldValue::Num(meta.partition_count as f64)),
                ])))
            }),
        )
        .expect("builtin registration");

    let ds = dataset.clone();
    registry
        .register(
            ToolDescriptor {
                name: "meta.partitions".into(),
                params: vec![ParamSpec { name: "table".into(), kind: ParamKind::Str }],
                output: OutputSchema::RecordList(schema(&[
                    ("name", FieldKind::Str),
                    ("row_count", FieldKind::Num),
                ])),
                availability: AvailabilitySpec::Fixed(Availability::PrerunStatic),
                category: ToolCategory::Metadata,
                cost_estimate_ms: 5,
                version: "1".into(),
            },
            Arc::new(move |args, _scope| {
                let table = str_arg(args, 0);
                let meta = ds.table(table).ok_or_else(|| format!("unknown table `{table}`"))?;
                let per_partition = meta.row_count / meta.partition_count.max(1) as u64;
                let records = (0..meta.partition_count)
                    .map(|i| {
                        record(vec![
                            ("name", FieldValue::Str(format!("{}={i:04}", meta.partition_column))),
                            ("row_count", FieldValue::Num(per_partition as f64)),
                        ])
                    })
                    .collect();
                Ok(ToolValue::Records(records))
            }),
        )
        .expect("builtin registration");

    registry
        .register(
            ToolDescriptor {
                name: "meta.cluster_config".into(),
                params: vec![ParamSpec { name: "job_id".into(), kind: ParamKind::Str }],
                output: OutputSchema::Record(schema(&[
                    ("instance_name", FieldKind::Str),
                    ("workers", FieldKind::Num),
                    ("per_worker_throughput_bps", FieldKind::Num),
                    ("network_bw_bps", FieldKind::Num),
                    ("photon_factor", FieldKind::Num),
                    ("price_per_second", FieldKind::Num),
                ])),
                availability: AvailabilitySpec::Fixed(Availability::PrerunStatic),
                category: ToolCategory::Metadata,
                cost_estimate_ms: 5,
                version: "1".into(),
            },
            Arc::new(move |args, scope| {
                let job_id = str_arg(args, 0);
                if job_id != scope.job_id {
                    return Err(format!("job `{job_id}` is not in scope"));
                }
                let c = &scope.config;
                Ok(ToolValue::Record(record(vec![
                    ("instance_name", FieldValue::Str(c.instance_name.clone())),
                    ("workers", FieldValue::Num(c.workers as f64)),
                    ("per_worker_throughput_bps", FieldValue::Num(c.per_worker_throughput_bps)),
                    ("network_bw_bps", FieldValue::Num(c.network_bw_bps)),
                    ("photon_factor", FieldValue::Num(c.photon_factor)),
                    ("price_per_second", FieldValue::Num(c.price_per_second)),
                ])))
            }),
        )
        .expect("builtin registration");

    let ds = dataset.clone();
    registry
        .register(
            ToolDescriptor {
                name: "log.history".into(),
                params: vec![
                    ParamSpec { name: "job_id".into(), kind: ParamKind::Str },
                    ParamSpec { name: "k".into(), kind: ParamKind::Num },
                ],
                output: OutputSchema::RecordList(schema(&[
                    ("run_id", FieldKind::Str),
                    ("started_at", FieldKind::Num),
                    ("duration_seconds", FieldKind::Num),
                    ("workers", FieldKind::Num),
                    ("vcpu", FieldKind::Num),
                    ("memory_gb", FieldKind::Num),
                    ("dbu", FieldKind::Num),
                    ("photon_factor", FieldKind::Num),
                    ("price_per_second", FieldKind::Num),
                ])),
                availability: AvailabilitySpec::Fixed(Availability::PrerunHistorical),
                category: ToolCategory::Log,
                cost_estimate_ms: 10,
                version: "1".into(),
            },
            Arc::new(move |args, scope| {
                let job_id = str_arg(args, 0);
                let k = num_arg(args, 1);
                if !(k >= 1.0 && k.fract() == 0.0) {
                    return Err(format!("k must be a positive integer, got {k}"));
                }
                if ds.job(job_id).is_none() {
                    return Err(format!("unknown job `{job_id}`"));
                }
                // Most recent first, so `history(job, 1)` is the lag-1 run.
                let records = visible_history(&ds, scope, job_id)
                    .into_iter()
                    .rev()
                    .take(k as usize)
                    .map(history_record)
                    .collect();
                Ok(ToolValue::Records(records))
            }),
        )
        .expect("builtin registration");

    let ds = dataset.clone();
    registry
        .register(
            ToolDescriptor {
                name: "log.stage_metrics".into(),
                params: vec![ParamSpec { name: "run_id".into(), kind: ParamKind::Str }],
                output: OutputSchema::RecordList(schema(&[
                    ("stage_id", FieldKind::Num),
                    ("shuffle_bytes", FieldKind::Num),
                    ("n_tasks", FieldKind::Num),
                    ("wall_seconds", FieldKind::Num),
                    ("task_seconds_total", FieldKind::Num),
                    ("task_seconds_max", FieldKind::Num),
                ])),
                availability: AvailabilitySpec::CurrentRunSensitive { param_index: 0 },
                category: ToolCategory::Log,
                cost_estimate_ms: 10,
                version: "1".into(),
            },
            Arc::new(move |args, scope| {
                let run_id = str_arg(args, 0);
                let run = ds.run(run_id).ok_or_else(|| format!("unknown run `{run_id}`"))?;
                let visible = run.started_at < scope.scheduling_time
                    || scope.current_run_id.as_deref() == Some(run_id);
                if !visible {
                    return Err(format!("run `{run_id}` is not visible at the scheduling time"));
                }
                let records = run
                    .stage_metrics
                    .iter()
                    .map(|s| {
                        let total: f64 = s.task_durations_seconds.iter().sum();
                        let max = s
                            .task_durations_seconds
                            .iter()
                            .cloned()
                            .fold(f64::NEG_INFINITY, f64::max);
                        record(vec![
                            ("stage_id", FieldValue::Num(s.stage_id as f64)),
                            ("shuffle_bytes", FieldValue::Num(s.shuffle_bytes as f64)),
                            ("n_tasks", FieldValue::Num(s.task_durations_seconds.len() as f64)),
                            ("wall_seconds", FieldValue::Num(s.wall_seconds)),
                            ("task_seconds_total", FieldValue::Num(total)),
                            ("task_seconds_max", FieldValue::Num(max)),
                        ])
                    })
                    .collect();
                Ok(ToolValue::Records(records))
            }),
        )
        .expect("builtin registration");

    let ds = dataset.clone();
    registry
        .register(
            ToolDescriptor {
                name: "sql.estimate_selectivity".into(),
                params: vec![
                    ParamSpec { name: "sql_text".into(), kind: ParamKind::Str },
                    ParamSpec { name: "table".into(), kind: ParamKind::Str },
                ],
                output: OutputSchema::Record(schema(&[("selectivity", FieldKind::Num)])),
                availability: AvailabilitySpec::Fixed(Availability::PrerunStatic),
                category: ToolCategory::Sandbox,
                cost_estimate_ms: 80,
                version: "1".into(),
            },
            Arc::new(move |args, _scope| {
                let sql = str_arg(args, 0);
                let table = str_arg(args, 1);
                let job = ds
                    .jobs
                    .iter()
                    .find(|j| j.sql_text == sql)
                    .ok_or_else(|| "unknown script".to_string())?;
                // A table the script never scans contributes no bytes.
                let sel = job.selectivity_of(table).unwrap_or(0.0);
                Ok(ToolValue::Record(record(vec![(
                    "selectivity",
                    FieldValue::Num(sel),
                )])))
            }),
        )
        .expect("builtin registration");

    let ds = dataset;
    registry
        .register(
            ToolDescriptor {
                name: "sql.plan_summary".into(),
                params: vec![ParamSpec { name: "sql_text".into(), kind: ParamKind::Str }],
                output: OutputSchema::Record(schema(&[
                    ("n_joins", FieldKind::Num),
                    ("n_group_by", FieldKind::Num),
                    ("n_scans", FieldKind::Num),
                    ("predicate_count", FieldKind::Num),
                ])),
                availability: AvailabilitySpec::Fixed(Availability::PrerunStatic),
                category: ToolCategory::Sandbox,
                cost_estimate_ms: 120,
                version: "1".into(),
            },
            Arc::new(move |args, _scope| {
                let sql = str_arg(args, 0);
                let job = ds
                    .jobs
                    .iter()
                    .find(|j| j.sql_text == sql)
                    .ok_or_else(|| "unknown script".to_string())?;
                let n_joins = if job.has_join {
                    (job.scanned_tables.len().max(2) - 1) as f64
                } else {
                    0.0
                };
                let predicate_count =
                    job.scanned_tables.iter().filter(|s| s.selectivity < 1.0).count() as f64;
                Ok(ToolValue::Record(record(vec![
                    ("n_joins", FieldValue::Num(n_joins)),
                    ("n_group_by", FieldValue::Num(if job.has_group_by { 1.0 } else { 0.0 })),
                    ("n_scans", FieldValue::Num(job.scanned_tables.len() as f64)),
                    ("predicate_count", FieldValue::Num(predicate_count)),
                ])))
            }),
        )
        .expect("builtin registration");

    registry
}

/// Registers a per-run summary tool exposing the recorded duration under a
/// historical availability tag. The leakage gate's field denylist must catch
/// reads of the current run through it; the gate-bypass harness uses it to
/// demonstrate what leaks if that check is missing.
pub fn register_run_summary(registry: &mut ToolRegistry, dataset: Arc<HistoryDataset>) {
    registry
        .register(
            ToolDescriptor {
                name: RUN_SUMMARY_TOOL.into(),
                params: vec![ParamSpec { name: "run_id".into(), kind: ParamKind::Str }],
                output: OutputSchema::Record(schema(&[
                    ("run_id", FieldKind::Str),
                    ("started_at", FieldKind::Num),
                    ("duration_seconds", FieldKind::Num),
                ])),
                availability: AvailabilitySpec::Fixed(Availability::PrerunHistorical),
                category: ToolCategory::Log,
                cost_estimate_ms: 10,
                version: "1".into(),
            },
            Arc::new(move |args, scope| {
                let run_id = str_arg(args, 0);
                let run = dataset.run(run_id).ok_or_else(|| format!("unknown run `{run_id}`"))?;
                let visible = run.started_at < scope.scheduling_time
                    || scope.current_run_id.as_deref() == Some(run_id);
                if !visible {
                    return Err(format!("run `{run_id}` is not visible at the scheduling time"));
                }
                Ok(ToolValue::Record(record(vec![
                    ("run_id", FieldValue::Str(run.run_id.clone())),
                    ("started_at", FieldValue::Num(run.started_at as f64)),
                    ("duration_seconds", FieldValue::Num(run.duration_seconds)),
                ])))
            }),
        )
        .expect("run_summary registration");
}

/// Default policy: all built-ins allowlisted, 1 s per call, 16 sandbox calls
/// per materialization request.
pub fn standard_policy(registry: &ToolRegistry) -> ExecutionPolicy {
    ExecutionPolicy {
        max_sandbox_calls_per_job: 16,
        per_call_timeout_ms: 1_000,
        tool_allowlist: registry
            .descriptors()
            .map(|d| d.name.clone())
            .collect::<BTreeSet<_>>(),
    }
}
