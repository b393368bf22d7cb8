//! Typed, policy-gated tool protocol.
//!
//! Feature extraction programs never touch the corpus directly; every read
//! goes through a registered tool with a declared parameter schema, output
//! schema, availability class, and cost estimate. The registry enforces an
//! allowlist, per-call timeouts, and a sandbox-call budget, and memoizes
//! results under a four-part cache key so repeated extraction over the same
//! data snapshot is free and bumping any key component invalidates cleanly.

mod builtin;

pub use builtin::{builtin_registry, register_run_summary, standard_policy, RUN_SUMMARY_TOOL};

use crate::corpus::ClusterConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;
use thiserror::Error;

/// Scalar kinds a tool parameter can take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Num,
    Str,
    Bool,
}

/// Kinds a record field can take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Num,
    Str,
    Bool,
    NumList,
}

/// When a tool's answer becomes knowable relative to the run being predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Availability {
    /// Catalog and plan facts; knowable before any run.
    PrerunStatic,
    /// Facts about runs that already finished.
    PrerunHistorical,
    /// Facts that only exist once the predicted run itself finished.
    /// Any feature reading these is target leakage.
    PostrunCurrent,
}

impl fmt::Display for Availability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Availability::PrerunStatic => "prerun_static",
            Availability::PrerunHistorical => "prerun_historical",
            Availability::PostrunCurrent => "postrun_current",
        };
        f.write_str(s)
    }
}

/// How a descriptor's availability resolves at a concrete call site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvailabilitySpec {
    /// Same class regardless of arguments.
    Fixed(Availability),
    /// `postrun_current` when the string argument at `param_index` names the
    /// run being predicted, `prerun_historical` otherwise.
    CurrentRunSensitive { param_index: usize },
}

impl AvailabilitySpec {
    /// Static (argument-independent) upper bound used for display.
    pub fn static_class(&self) -> Availability {
        match self {
            AvailabilitySpec::Fixed(a) => *a,
            AvailabilitySpec::CurrentRunSensitive { .. } => Availability::PrerunHistorical,
        }
    }
}

/// Cost/latency class of a tool. Sandbox probes are the expensive ones and
/// are what the per-job call budget meters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolCategory {
    Metadata,
    Log,
    Sandbox,
}

/// Ordered parameter declaration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
}

/// Ordered field declarations of a record output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSchema {
    pub fields: Vec<(String, FieldKind)>,
}

impl RecordSchema {
    pub fn kind_of(&self, field: &str) -> Option<FieldKind> {
        self.fields.iter().find(|(n, _)| n == field).map(|(_, k)| *k)
    }
}

/// A tool returns one record or a list of records of one schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSchema {
    Record(RecordSchema),
    RecordList(RecordSchema),
}

impl OutputSchema {
    pub fn record_schema(&self) -> &RecordSchema {
        match self {
            OutputSchema::Record(s) | OutputSchema::RecordList(s) => s,
        }
    }

    pub fn is_list(&self) -> bool {
        matches!(self, OutputSchema::RecordList(_))
    }
}

/// Everything a caller can know about a tool without invoking it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    /// Dotted name, e.g. `meta.table_stats`.
    pub name: String,
    pub params: Vec<ParamSpec>,
    pub output: OutputSchema,
    pub availability: AvailabilitySpec,
    pub category: ToolCategory,
    pub cost_estimate_ms: u64,
    pub version: String,
}

/// A concrete argument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgValue {
    Num(f64),
    Str(String),
    Bool(bool),
}

impl ArgValue {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ArgValue::Num(_) => "num",
            ArgValue::Str(_) => "str",
            ArgValue::Bool(_) => "bool",
        }
    }

    pub fn matches(&self, kind: ParamKind) -> bool {
        matches!(
            (self, kind),
            (ArgValue::Num(_), ParamKind::Num)
                | (ArgValue::Str(_), ParamKind::Str)
                | (ArgValue::Bool(_), ParamKind::Bool)
        )
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ArgValue::Str(s) => Some(s),
            _ => None,
        }
    }
}

/// A field inside a returned record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldValue {
    Num(f64),
    Str(String),
    Bool(bool),
    NumList(Vec<f64>),
}

impl FieldValue {
    pub fn kind(&self) -> FieldKind {
        match self {
            FieldValue::Num(_) => FieldKind::Num,
            FieldValue::Str(_) => FieldKind::Str,
            FieldValue::Bool(_) => FieldKind::Bool,
            FieldValue::NumList(_) => FieldKind::NumList,
        }
    }
}

/// One returned record; field order follows the schema via BTreeMap iteration
/// being irrelevant to consumers (access is by name).
pub type Record = BTreeMap<String, FieldValue>;

/// Typed tool output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolValue {
    Record(Record),
    Records(Vec<Record>),
}

/// Output of one call, with provenance flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolResult {
    pub value: ToolValue,
    pub availability: Availability,
    pub elapsed_ms: u64,
    pub from_cache: bool,
}

/// Per-request execution limits. An empty allowlist denies everything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPolicy {
    pub max_sandbox_calls_per_job: u32,
    pub per_call_timeout_ms: u64,
    pub tool_allowlist: BTreeSet<String>,
}

impl ExecutionPolicy {
    pub fn allows(&self, tool: &str) -> bool {
        self.tool_allowlist.contains(tool)
    }
}

/// Identity of a cached answer: same job signature, data snapshot, feature
/// set version, and toolset version mean the answer may be reused; changing
/// any component misses.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub job_signature: String,
    pub data_snapshot_id: String,
    pub feature_version: String,
    pub tool_version: String,
}

impl CacheKey {
    /// Hashes job identity (id, script text, config) into a signature.
    pub fn job_signature(job_id: &str, sql_text: &str, config: &ClusterConfig) -> String {
        let mut hasher = Sha256::new();
        hasher.update(job_id.as_bytes());
        hasher.update([0]);
        hasher.update(sql_text.as_bytes());
        hasher.update([0]);
        hasher.update(serde_json::to_string(config).expect("config serializes").as_bytes());
        hex::encode(&hasher.finalize()[..16])
    }
}

/// Mutable sandbox-call counter for one materialization request.
#[derive(Debug, Default, Clone)]
pub struct BudgetState {
    pub used_sandbox_calls: u32,
}

/// One line of the traceability log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CallLogEntry {
    /// Wall-clock milliseconds since the Unix epoch.
    pub ts: u64,
    pub tool: String,
    pub args_hash: String,
    pub elapsed_ms: u64,
    pub from_cache: bool,
}

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("tool `{tool}` is not registered")]
    UnknownTool { tool: String },
    #[error("tool `{tool}` is already registered")]
    DuplicateTool { tool: String },
    #[error("tool `{tool}` denied by execution policy")]
    Denied { tool: String },
    #[error("tool `{tool}` expects {expected} args, got {got}")]
    Arity { tool: String, expected: usize, got: usize },
    #[error("tool `{tool}` param `{param}` expects {expected:?}, got {got}")]
    ArgType {
        tool: String,
        param: String,
        expected: ParamKind,
        got: &'static str,
    },
    #[error("tool `{tool}` exceeded {limit_ms} ms (took {elapsed_ms} ms)")]
    Timeout {
        tool: String,
        elapsed_ms: u64,
        limit_ms: u64,
    },
    #[error("sandbox call budget of {limit} exhausted at tool `{tool}`")]
    BudgetExhausted { tool: String, limit: u32 },
    #[error("tool `{tool}` failed: {message}")]
    Failed { tool: String, message: String },
    #[error("tool `{tool}` returned a value violating its output schema: {message}")]
    SchemaViolation { tool: String, message: String },
    #[error("invalid descriptor for `{tool}`: {message}")]
    InvalidDescriptor { tool: String, message: String },
    #[error("cache io: {0}")]
    CacheIo(#[from] std::io::Error),
}

/// Per-request context tool implementations may consult. Carries the job
/// identity, the config under evaluation (candidate configs substitute
/// here), and the scheduling horizon that bounds visible history.
#[derive(Debug, Clone)]
pub struct RequestScope {
    pub job_id: String,
    pub sql_text: String,
    pub config: ClusterConfig,
    /// Run the prediction is for, when it exists in the log.
    pub current_run_id: Option<String>,
    /// Unix seconds; only runs started strictly earlier are visible history.
    pub scheduling_time: i64,
}

/// A tool implementation: pure read of world + scope. Errors are surfaced as
/// [`ToolError::Failed`] with the returned message.
pub type ToolFn = Arc<dyn Fn(&[ArgValue], &RequestScope) -> Result<ToolValue, String> + Send + Sync>;

struct RegisteredTool {
    descriptor: ToolDescriptor,
    imp: ToolFn,
}

struct CacheEntry {
    value: ToolValue,
    availability: Availability,
    bytes: usize,
    last_used: u64,
}

struct CacheState {
    map: HashMap<String, CacheEntry>,
    clock: u64,
    total_bytes: usize,
}

/// Default LRU capacity: plenty for desk-scale corpora.
const DEFAULT_CACHE_BYTES: usize = 64 * 1024 * 1024;

/// The tool registry: descriptors, implementations, result cache, call log.
pub struct ToolRegistry {
    tools: BTreeMap<String, RegisteredTool>,
    cache: Mutex<CacheState>,
    byte_cap: usize,
    log: Mutex<Vec<CallLogEntry>>,
    log_sink: Mutex<Option<std::io::BufWriter<fs::File>>>,
}

impl Default for ToolRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::with_byte_cap(DEFAULT_CACHE_BYTES)
    }

    /// Registry whose result cache evicts least-recently-used entries once
    /// the serialized size passes `byte_cap`.
    pub fn with_byte_cap(byte_cap: usize) -> Self {
        ToolRegistry {
            tools: BTreeMap::new(),
            cache: Mutex::new(CacheState {
                map: HashMap::new(),
                clock: 0,
                total_bytes: 0,
            }),
            byte_cap,
            log: Mutex::new(Vec::new()),
            log_sink: Mutex::new(None),
        }
    }

    /// Registers a tool. Duplicate names are an error.
    pub fn register(&mut self, descriptor: ToolDescriptor, imp: ToolFn) -> Result<(), ToolError> {
        if !descriptor.name.contains('.') {
            return Err(ToolError::InvalidDescriptor {
                tool: descriptor.name.clone(),
                message: "name must be dotted (namespace.tool)".into(),
            });
        }
        if let AvailabilitySpec::CurrentRunSensitive { param_index } = descriptor.availability {
            match descriptor.params.get(param_index) {
                Some(p) if p.kind == ParamKind::Str => {}
                _ => {
                    return Err(ToolError::InvalidDescriptor {
                        tool: descriptor.name.clone(),
                        message: "current-run-sensitive param must exist and be a string".into(),
                    })
                }
            }
        }
        if self.tools.contains_key(&descriptor.name) {
            return Err(ToolError::DuplicateTool {
                tool: descriptor.name,
            });
        }
        self.tools
            .insert(descriptor.name.clone(), RegisteredTool { descriptor, imp });
        Ok(())
    }

    pub fn descriptor(&self, name: &str) -> Option<&ToolDescriptor> {
        self.tools.get(name).map(|t| &t.descriptor)
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &ToolDescriptor> {
        self.tools.values().map(|t| &t.descriptor)
    }

    /// Stable fingerprint of the registered toolset (names and versions);
    /// callers pin it into [`CacheKey::tool_version`].
    pub fn toolset_version(&self) -> String {
        let mut hasher = Sha256::new();
        for tool in self.tools.values() {
            hasher.update(tool.descriptor.name.as_bytes());
            hasher.update([0]);
            hasher.update(tool.descriptor.version.as_bytes());
            hasher.update([0]);
        }
        hex::encode(&hasher.finalize()[..8])
    }

    /// Mirrors every subsequent call-log entry into a JSONL file.
    pub fn set_call_log_path(&self, path: &Path) -> std::io::Result<()> {
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        *self.log_sink.lock().expect("log sink lock") = Some(std::io::BufWriter::new(file));
        Ok(())
    }

    pub fn call_log(&self) -> Vec<CallLogEntry> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn cache_entries(&self) -> usize {
        self.cache.lock().expect("cache lock").map.len()
    }

    /// Resolves the availability of a concrete call.
    pub fn resolve_availability(
        descriptor: &ToolDescriptor,
        args: &[ArgValue],
        current_run_id: Option<&str>,
    ) -> Availability {
        match descriptor.availability {
            AvailabilitySpec::Fixed(a) => a,
            AvailabilitySpec::CurrentRunSensitive { param_index } => {
                let arg = args.get(param_index).and_then(|a| a.as_str());
                match (arg, current_run_id) {
                    (Some(arg), Some(current)) if arg == current => Availability::PostrunCurrent,
                    _ => Availability::PrerunHistorical,
                }
            }
        }
    }

    /// Invokes a tool under the policy, consulting and filling the cache.
    ///
    /// Cache hits return the stored value without executing the tool or
    /// consuming sandbox budget. Timeouts are detected after execution (tools
    /// run in-process) and are not cached.
    pub fn call(
        &self,
        name: &str,
        args: &[ArgValue],
        policy: &ExecutionPolicy,
        cache_key: &CacheKey,
        scope: &RequestScope,
        budget: &mut BudgetState,
    ) -> Result<ToolResult, ToolError> {
        let tool = self.tools.get(name).ok_or_else(|| ToolError::UnknownTool {
            tool: name.to_string(),
        })?;
        if !policy.allows(name) {
            return Err(ToolError::Denied {
                tool: name.to_string(),
            });
        }
        let descriptor = &tool.descriptor;
        if args.len() != descriptor.params.len() {
            return Err(ToolError::Arity {
                tool: name.to_string(),
                expected: descriptor.params.len(),
                got: args.len(),
            });
        }
        for (arg, param) in args.iter().zip(&descriptor.params) {
            if !arg.matches(param.kind) {
                return Err(ToolError::ArgType {
                    tool: name.to_string(),
                    param: param.name.clone(),
                    expected: param.kind,
                    got: arg.kind_name(),
                });
            }
        }

        let availability = Self::resolve_availability(descriptor, args, scope.current_run_id.as_deref());
        let entry_key = Self::entry_key(cache_key, name, args);

        if let Some(hit) = self.cache_lookup(&entry_key) {
            self.log_call(name, args, 0, true);
            return Ok(ToolResult {
                value: hit,
                availability,
                elapsed_ms: 0,
                from_cache: true,
            });
        }

        if descriptor.category == ToolCategory::Sandbox {
            if budget.used_sandbox_calls >= policy.max_sandbox_calls_per_job {
                return Err(ToolError::BudgetExhausted {
                    tool: name.to_string(),
                    limit: policy.max_sandbox_calls_per_job,
                });
            }
            budget.used_sandbox_calls += 1;
        }

        let start = Instant::now();
        let value = (tool.imp)(args, scope).map_err(|message| ToolError::Failed {
            tool: name.to_string(),
            message,
        })?;
        let elapsed_ms = start.elapsed().as_millis() as u64;
        if elapsed_ms > policy.per_call_timeout_ms {
            return Err(ToolError::Timeout {
                tool: name.to_string(),
                elapsed_ms,
                limit_ms: policy.per_call_timeout_ms,
            });
        }
        Self::check_schema(descriptor, &value).map_err(|message| ToolError::SchemaViolation {
            tool: name.to_string(),
            message,
        })?;

        self.cache_insert(entry_key, &value, availability);
        self.log_call(name, args, elapsed_ms, false);
        Ok(ToolResult {
            value,
            availability,
            elapsed_ms,
            from_cache: false,
        })
    }

    fn entry_key(cache_key: &CacheKey, name: &str, args: &[ArgValue]) -> String {
        let mut hasher = Sha256::new();
        for part in [
            &cache_key.job_signature,
            &cache_key.data_snapshot_id,
            &cache_key.feature_version,
            &cache_key.tool_version,
        ] {
            hasher.update(part.as_bytes());
            hasher.update([0]);
        }
        hasher.update(name.as_bytes());
        hasher.update([0]);
        hasher.update(serde_json::to_string(args).expect("args serialize").as_bytes());
        hex::encode(hasher.finalize())
    }

    fn cache_lookup(&self, entry_key: &str) -> Option<ToolValue> {
        let mut cache = self.cache.lock().expect("cache lock");
        cache.clock += 1;
        let clock = cache.clock;
        let entry = cache.map.get_mut(entry_key)?;
        entry.last_used = clock;
        Some(entry.value.clone())
    }

    fn cache_insert(&self, entry_key: String, value: &ToolValue, availability: Availability) {
        let bytes = serde_json::to_string(value).map(|s| s.len()).unwrap_or(0);
        let mut cache = self.cache.lock().expect("cache lock");
        cache.clock += 1;
        let clock = cache.clock;
        if let Some(old) = cache.map.insert(
            entry_key,
            CacheEntry {
                value: value.clone(),
                availability,
                bytes,
                last_used: clock,
            },
        ) {
            cache.total_bytes -= old.bytes;
        }
        cache.total_bytes += bytes;
        while cache.total_bytes > self.byte_cap && cache.map.len() > 1 {
            let oldest = cache
                .map
                .iter()
                .min_by_key(|(_, e)| e.last_used)
                .map(|(k, _)| k.clone())
                .expect("cache non-empty");
            if let Some(evicted) = cache.map.remove(&oldest) {
                cache.total_bytes -= evicted.bytes;
            }
        }
    }

    /// Writes the cache to `dir/tool_cache.jsonl`.
    pub fn persist_cache(&self, dir: &Path) -> Result<(), ToolError> {
        fs::create_dir_all(dir)?;
        let cache = self.cache.lock().expect("cache lock");
        let mut entries: Vec<(&String, &CacheEntry)> = cache.map.iter().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = std::io::BufWriter::new(fs::File::create(dir.join("tool_cache.jsonl"))?);
        for (key, entry) in entries {
            let line = serde_json::json!({
                "key": key,
                "availability": entry.availability,
                "value": entry.value,
            });
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Loads entries persisted by [`ToolRegistry::persist_cache`].
    pub fn load_cache(&self, dir: &Path) -> Result<usize, ToolError> {
        let path = dir.join("tool_cache.jsonl");
        let reader = BufReader::new(fs::File::open(&path)?);
        let mut loaded = 0;
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: serde_json::Value =
                serde_json::from_str(&line).map_err(std::io::Error::other)?;
            let key = parsed["key"].as_str().unwrap_or_default().to_string();
            let availability: Availability =
                serde_json::from_value(parsed["availability"].clone()).map_err(std::io::Error::other)?;
            let value: ToolValue =
                serde_json::from_value(parsed["value"].clone()).map_err(std::io::Error::other)?;
            self.cache_insert(key, &value, availability);
            loaded += 1;
        }
        Ok(loaded)
    }

    fn check_schema(descriptor: &ToolDescriptor, value: &ToolValue) -> Result<(), String> {
        let check_record = |record: &Record| -> Result<(), String> {
            let schema = descriptor.output.record_schema();
            if record.len() != schema.fields.len() {
                return Err(format!(
                    "expected {} fields, got {}",
                    schema.fields.len(),
                    record.len()
                ));
            }
            for (name, kind) in &schema.fields {
                match record.get(name) {
                    None => return Err(format!("missing field `{name}`")),
                    Some(v) if v.kind() != *kind => {
                        return Err(format!(
                            "field `{name}` expected {kind:?}, got {:?}",
                            v.kind()
                        ))
                    }
                    Some(_) => {}
                }
            }
            Ok(())
        };
        match (value, descriptor.output.is_list()) {
            (ToolValue::Record(r), false) => check_record(r),
            (ToolValue::Records(rs), true) => rs.iter().try_for_each(check_record),
            (ToolValue::Record(_), true) => Err("expected a record list, got a record".into()),
            (ToolValue::Records(_), false) => Err("expected a record, got a record list".into()),
        }
    }

    fn log_call(&self, tool: &str, args: &[ArgValue], elapsed_ms: u64, from_cache: bool) {
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(args).expect("args serialize").as_bytes());
        let entry = CallLogEntry {
            ts,
            tool: tool.to_string(),
            args_hash: hex::encode(&hasher.finalize()[..8]),
            elapsed_ms,
            from_cache,
        };
        if let Some(sink) = self.log_sink.lock().expect("log sink lock").as_mut() {
            let _ = serde_json::to_writer(&mut *sink, &entry);
            let _ = sink.write_all(b"\n");
            let _ = sink.flush();
        }
        self.log.lock().expect("log lock").push(entry);
    }
}
