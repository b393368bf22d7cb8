//! The two hard safety gates in front of every extractor program:
//! completion checking (parse, types, allowlist, declared output) and
//! leakage checking (static taint analysis over availability classes).
//! A program is executable only when both gates pass; the evaluator's
//! input type is constructible only from two passing verdicts.

#[cfg(test)]
mod tests;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analyzer::FeatureSpec;
use crate::dsl::{
    parse, typecheck, Binding, BindingRhs, Expr, ExtractorProgram, PathExpr, TypeErrorKind,
    TypedProgram, AMBIENT_NAMES,
};
use crate::toolchain::{Availability, AvailabilitySpec, ExecutionPolicy, ToolRegistry};

/// Which gate produced a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Cc,
    Dl,
}

impl std::fmt::Display for GateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateKind::Cc => "cc",
            GateKind::Dl => "dl",
        })
    }
}

/// One machine-readable rejection reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateReason {
    pub code: String,
    pub message: String,
    /// `line:col` of the offending construct, or `-`.
    pub location: String,
}

/// Outcome of one gate on one program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateVerdict {
    pub gate: GateKind,
    pub pass: bool,
    pub reasons: Vec<GateReason>,
}

impl GateVerdict {
    fn passed(gate: GateKind) -> Self {
        GateVerdict { gate, pass: true, reasons: Vec::new() }
    }

    /// A failing verdict always carries at least one reason.
    fn failed(gate: GateKind, reasons: Vec<GateReason>) -> Self {
        assert!(!reasons.is_empty(), "failing verdict without reasons");
        GateVerdict { gate, pass: false, reasons }
    }
}

/// Field names that constitute the prediction target or aliases of it.
pub const DENYLISTED_FIELDS: [&str; 3] = ["duration_seconds", "execution_time", "y"];

/// Availability resolution for every call site plus the target denylist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityMap {
    /// Binding index of each call site to its gate-effective class.
    pub call_sites: BTreeMap<usize, Availability>,
    /// Field names treated as the label when read off the current run.
    pub denylist: BTreeSet<String>,
}

impl AvailabilityMap {
    /// Resolves every call site conservatively: a tool whose class
    /// depends on its run argument counts as postrun-current, because
    /// the program cannot statically prove the argument names a
    /// finished historical run.
    pub fn for_program(tp: &TypedProgram) -> Self {
        let call_sites = tp
            .calls
            .iter()
            .map(|site| {
                let class = match site.availability {
                    AvailabilitySpec::Fixed(a) => a,
                    AvailabilitySpec::CurrentRunSensitive { .. } => Availability::PostrunCurrent,
                };
                (site.binding, class)
            })
            .collect();
        AvailabilityMap {
            call_sites,
            denylist: DENYLISTED_FIELDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Completion gate: the program must typecheck against the registry,
/// call only allowlisted tools, and return the spec's declared type.
/// Returns the typed program on success so the leakage gate can reuse it.
pub fn check_completion(
    program: &ExtractorProgram,
    registry: &ToolRegistry,
    policy: &ExecutionPolicy,
    spec: &FeatureSpec,
) -> (GateVerdict, Option<TypedProgram>) {
    let typed = match typecheck(program, registry, spec.expected_type()) {
        Ok(tp) => tp,
        Err(errors) => {
            let reasons = errors
                .iter()
                .map(|e| GateReason {
                    code: match e.kind {
                        TypeErrorKind::UnknownTool => "TOOL_NOT_ALLOWLISTED",
                        TypeErrorKind::Undefined => "UNDEFINED",
                        TypeErrorKind::ReturnTypeMismatch => "RETURN_TYPE",
                        _ => "TYPECHECK",
                    }
                    .into(),
                    message: e.message.clone(),
                    location: e.span.to_string(),
                })
                .collect();
            return (GateVerdict::failed(GateKind::Cc, reasons), None);
        }
    };
    let mut reasons = Vec::new();
    for site in &typed.calls {
        if !policy.allows(&site.tool) {
            let span = program.bindings[site.binding].span;
            reasons.push(GateReason {
                code: "TOOL_NOT_ALLOWLISTED".into(),
                message: format!("tool '{}' is not in the execution allowlist", site.tool),
                location: span.to_string(),
            });
        }
    }
    if reasons.is_empty() {
        (GateVerdict::passed(GateKind::Cc), Some(typed))
    } else {
        (GateVerdict::failed(GateKind::Cc, reasons), Some(typed))
    }
}

/// Taint state while sweeping the bindings in order.
struct Taint<'a> {
    tp: &'a TypedProgram,
    avail: &'a AvailabilityMap,
    /// Origin reason per tainted binding.
    tainted: Vec<Option<GateReason>>,
    /// Bindings whose value identifies or derives from the current run.
    carries_current: Vec<bool>,
    /// Call bindings invoked with a current-run-derived argument,
    /// mapped to their tool name.
    current_referencing: BTreeMap<usize, String>,
    name_to_index: BTreeMap<&'a str, usize>,
}

impl<'a> Taint<'a> {
    fn new(tp: &'a TypedProgram, avail: &'a AvailabilityMap) -> Self {
        let n = tp.program.bindings.len();
        Taint {
            tp,
            avail,
            tainted: vec![None; n],
            carries_current: vec![false; n],
            current_referencing: BTreeMap::new(),
            name_to_index: tp
                .program
                .bindings
                .iter()
                .enumerate()
                .map(|(i, b)| (b.name.as_str(), i))
                .collect(),
        }
    }

    /// Taint reasons and current-run carriage of one path read.
    fn path_taint(&self, path: &PathExpr) -> (Vec<GateReason>, bool) {
        if let Some(&idx) = self.name_to_index.get(path.root.as_str()) {
            if let Some(reason) = &self.tainted[idx] {
                return (vec![reason.clone()], true);
            }
            if let Some(tool) = self.current_referencing.get(&idx) {
                if let Some(field) = path.fields.first() {
                    if self.avail.denylist.contains(field) {
                        return (
                            vec![GateReason {
                                code: "TARGET_FIELD".into(),
                                message: format!(
                                    "field '{field}' of '{}' (called on the current run) is the \
                                     prediction target or an alias of it",
                                    tool
                                ),
                                location: path.span.to_string(),
                            }],
                            true,
                        );
                    }
                }
                // Non-denylisted fields of a current-run call are clean
                // values but still identify the current run.
                return (Vec::new(), true);
            }
            return (Vec::new(), self.carries_current[idx]);
        }
        // Ambient name: the current-run id itself is clean but carries.
        debug_assert!(AMBIENT_NAMES.contains(&path.root.as_str()));
        (Vec::new(), path.root == "current_run")
    }

    fn expr_taint(&self, expr: &Expr) -> (Vec<GateReason>, bool) {
        match expr {
            Expr::Num(_) | Expr::Str(_) | Expr::Bool(_) => (Vec::new(), false),
            Expr::Path(p) => self.path_taint(p),
            Expr::Neg { operand, .. } => self.expr_taint(operand),
            Expr::Binary { lhs, rhs, .. } => {
                let (mut r, a) = self.expr_taint(lhs);
                let (r2, b) = self.expr_taint(rhs);
                r.extend(r2);
                (r, a || b)
            }
            // A tainted condition taints the result: branch selection
            // leaks the compared value (implicit flow).
            Expr::If { cond, then, otherwise, .. } => {
                let (mut r, a) = self.expr_taint(cond);
                let (r2, b) = self.expr_taint(then);
                let (r3, c) = self.expr_taint(otherwise);
                r.extend(r2);
                r.extend(r3);
                (r, a || b || c)
            }
            Expr::Aggregate { path, .. } => self.path_taint(path),
            Expr::Contains { path, .. } => self.path_taint(path),
        }
    }

    fn visit_binding(&mut self, index: usize, binding: &Binding) {
        match &binding.rhs {
            BindingRhs::Expr(expr) => {
                let (reasons, carries) = self.expr_taint(expr);
                self.tainted[index] = reasons.into_iter().next();
                self.carries_current[index] = carries;
            }
            BindingRhs::Call { tool, span, .. } => {
                let site = self
                    .tp
                    .calls
                    .iter()
                    .find(|c| c.binding == index)
                    .expect("typed program lists every call site");
                let class = self.avail.call_sites[&index];
                let mut origin = None;
                if class == Availability::PostrunCurrent {
                    origin = Some(GateReason {
                        code: "POSTRUN_CURRENT".into(),
                        message: format!(
                            "call to '{tool}' resolves to postrun_current availability; its \
                             output does not exist before the run finishes"
                        ),
                        location: span.to_string(),
                    });
                }
                let refs_current = site.arg_ambient.contains("current_run")
                    || site.arg_bindings.iter().any(|&b| self.carries_current[b]);
                if refs_current {
                    self.current_referencing.insert(index, tool.clone());
                    self.carries_current[index] = true;
                }
                if origin.is_none() {
                    if let Some(&tb) =
                        site.arg_bindings.iter().find(|&&b| self.tainted[b].is_some())
                    {
                        let inner = self.tainted[tb].clone().expect("checked is_some");
                        origin = Some(GateReason {
                            code: inner.code,
                            message: format!(
                                "argument binding '{}' is tainted ({}); the call result \
                                 inherits the taint",
                                self.tp.program.bindings[tb].name, inner.message
                            ),
                            location: span.to_string(),
                        });
                    }
                }
                self.tainted[index] = origin;
            }
        }
    }
}

/// Leakage gate: static taint analysis. A value is tainted when it
/// originates from a postrun-current call site or from a denylisted
/// field read off a current-run call; taint propagates through every
/// expression form including branch conditions. PASS iff the return
/// expression is untainted. Historical runs' duration fields are not
/// tainted.
pub fn check_leakage(tp: &TypedProgram, avail: &AvailabilityMap) -> GateVerdict {
    let mut taint = Taint::new(tp, avail);
    for (index, binding) in tp.program.bindings.iter().enumerate() {
        taint.visit_binding(index, binding);
    }
    let (mut reasons, _) = taint.expr_taint(&tp.program.ret);
    reasons.dedup();
    if reasons.is_empty() {
        GateVerdict::passed(GateKind::Dl)
    } else {
        for reason in &mut reasons {
            reason.message.push_str("; the tainted value reaches the return expression");
        }
        GateVerdict::failed(GateKind::Dl, reasons)
    }
}

/// A program that has passed both gates. The evaluator accepts only this
/// type, so an unchecked program cannot be materialized by construction.
#[derive(Debug, Clone)]
pub struct GatedProgram {
    typed: TypedProgram,
    completion: GateVerdict,
    leakage: GateVerdict,
}

impl GatedProgram {
    pub fn typed(&self) -> &TypedProgram {
        &self.typed
    }

    pub fn verdicts(&self) -> (&GateVerdict, &GateVerdict) {
        (&self.completion, &self.leakage)
    }

    /// Test-harness constructor that fabricates passing verdicts without
    /// running the leakage gate. Exists solely so the leakage-necessity
    /// demonstration can materialize a forbidden feature and show the
    /// damage; never call it in pipeline code.
    #[doc(hidden)]
    pub fn assume_checked_for_harness(typed: TypedProgram) -> Self {
        GatedProgram {
            typed,
            completion: GateVerdict::passed(GateKind::Cc),
            leakage: GateVerdict::passed(GateKind::Dl),
        }
    }
}

/// Runs both gates over a feature's extraction plan. On failure returns
/// every verdict that was computed (completion first).
pub fn gate_program(
    spec: &FeatureSpec,
    registry: &ToolRegistry,
    policy: &ExecutionPolicy,
) -> Result<GatedProgram, Vec<GateVerdict>> {
    let program = match parse(&spec.extraction_plan) {
        Ok(p) => p,
        Err(errors) => {
            let reasons = errors
                .iter()
                .map(|e| GateReason {
                    code: "PARSE".into(),
                    message: e.message.clone(),
                    location: e.span.to_string(),
                })
                .collect();
            return Err(vec![GateVerdict::failed(GateKind::Cc, reasons)]);
        }
    };
    let (completion, typed) = check_completion(&program, registry, policy, spec);
    if !completion.pass {
        return Err(vec![completion]);
    }
    let typed = typed.expect("passing completion verdict carries the typed program");
    let avail = AvailabilityMap::for_program(&typed);
    let leakage = check_leakage(&typed, &avail);
    if !leakage.pass {
        return Err(vec![completion, leakage]);
    }
    Ok(GatedProgram { typed, completion, leakage })
}

/// One line of the verdict audit log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerdictLogEntry {
    pub program_sha256: String,
    pub gate: GateKind,
    pub pass: bool,
    pub reasons: Vec<GateReason>,
}

/// Appends one JSONL line per verdict, keyed by the program hash.
pub fn append_verdict_log(
    path: &Path,
    source: &str,
    verdicts: &[GateVerdict],
) -> std::io::Result<()> {
    let hash = hex::encode(Sha256::digest(source.as_bytes()));
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for verdict in verdicts {
        let entry = VerdictLogEntry {
            program_sha256: hash.clone(),
            gate: verdict.gate,
            pass: verdict.pass,
            reasons: verdict.reasons.clone(),
        };
        let line = serde_json::to_string(&entry).expect("verdict entries serialize");
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// One deliberately leaking program and the reason code the leakage gate
/// must reject it with. The completion gate accepts every entry; rejection
/// is the leakage gate's job alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdversarialProgram {
    pub name: &'static str,
    pub source: &'static str,
    pub expected_code: &'static str,
}

/// Leaking programs covering direct target reads, arithmetic laundering,
/// conditional laundering (both condition and branch values), aggregates
/// over current-run stages, mixes with benign signals, and laundering the
/// current-run id through intermediate bindings.
pub const ADVERSARIAL_LEAKAGE_SUITE: [AdversarialProgram; 24] = [
    AdversarialProgram {
        name: "direct_target_field",
        source: "let r = log.run_summary(current_run);\nreturn r.duration_seconds;",
        expected_code: "TARGET_FIELD",
    },
    AdversarialProgram {
        name: "stage_wall_sum",
        source: "let m = log.stage_metrics(current_run);\nreturn sum(m.wall_seconds);",
        expected_code: "POSTRUN_CURRENT",
    },
    AdversarialProgram {
        name: "stage_shuffle_sum",
        source: "let m = log.stage_metrics(current_run);\nreturn sum(m.shuffle_bytes);",
        expected_code: "POSTRUN_CURRENT",
    },
    AdversarialProgram {
        name: "stage_task_max",
        source: "let m = log.stage_metrics(current_run);\nreturn max(m.task_seconds_max);",
        expected_code: "POSTRUN_CURRENT",
    },
    AdversarialProgram {
        name: "arith_identity_mult",
        source: "let m = log.stage_metrics(current_run);\nlet t = sum(m.wall_seconds);\nreturn t * 1;",
        expected_code: "POSTRUN_CURRENT",
    },
    AdversarialProgram {
        name: "arith_identity_sub",
        source: "let m = log.stage_metrics(current_run);\nlet t = sum(m.wall_seconds);\nreturn t - 0;",
        expected_code: "POSTRUN_CURRENT",
    },
    AdversarialProgram {
        name: "target_scaled",
        source: "let r = log.run_summary(current_run);\nreturn r.duration_seconds * 0.001;",
        expected_code: "TARGET_FIELD",
    },
    AdversarialProgram {
        name: "alias_chain",
        source: "let r = log.run_summary(current_run);\nlet a = r.duration_seconds;\nlet b = a + 0;\nreturn b;",
        expected_code: "TARGET_FIELD",
    },
    AdversarialProgram {
        name: "agg_count_product",
        source: "let m = log.stage_metrics(current_run);\nreturn mean(m.wall_seconds) * count(m.wall_seconds);",
        expected_code: "POSTRUN_CURRENT",
    },
    AdversarialProgram {
        name: "threshold_flag",
        source: "let m = log.stage_metrics(current_run);\nreturn if sum(m.wall_seconds) > 100 then 1 else 0;",
        expected_code: "POSTRUN_CURRENT",
    },
    AdversarialProgram {
        name: "banded_target",
        source: "let r = log.run_summary(current_run);\nreturn if r.duration_seconds > 30 then 100 else 5;",
        expected_code: "TARGET_FIELD",
    },
    AdversarialProgram {
        name: "stage_count_flag",
        source: "let m = log.stage_metrics(current_run);\nlet flag = if count(m.wall_seconds) > 2 then 1 else 0;\nreturn flag;",
        expected_code: "POSTRUN_CURRENT",
    },
    AdversarialProgram {
        name: "stage_stddev",
        source: "let m = log.stage_metrics(current_run);\nreturn stddev(m.task_seconds_total);",
        expected_code: "POSTRUN_CURRENT",
    },
    AdversarialProgram {
        name: "stage_minmax",
        source: "let m = log.stage_metrics(current_run);\nreturn min(m.wall_seconds) + max(m.wall_seconds);",
        expected_code: "POSTRUN_CURRENT",
    },
    AdversarialProgram {
        name: "branch_value_then",
        source: "let m = log.stage_metrics(current_run);\nreturn if 1 > 0 then sum(m.wall_seconds) else 0;",
        expected_code: "POSTRUN_CURRENT",
    },
    AdversarialProgram {
        name: "branch_value_else",
        source: "let m = log.stage_metrics(current_run);\nreturn if 1 > 2 then 0 else sum(m.task_seconds_max);",
        expected_code: "POSTRUN_CURRENT",
    },
    AdversarialProgram {
        name: "zero_weight_mix",
        source: "let h = log.history(job, 1);\nlet m = log.stage_metrics(current_run);\nreturn mean(h.duration_seconds) + 0 * sum(m.wall_seconds);",
        expected_code: "POSTRUN_CURRENT",
    },
    AdversarialProgram {
        name: "ratio_mix",
        source: "let s = meta.table_stats(table1);\nlet m = log.stage_metrics(current_run);\nreturn s.total_bytes / sum(m.wall_seconds);",
        expected_code: "POSTRUN_CURRENT",
    },
    AdversarialProgram {
        name: "laundered_run_id",
        source: "let r = log.run_summary(current_run);\nlet id = r.run_id;\nlet m = log.stage_metrics(id);\nreturn sum(m.shuffle_bytes);",
        expected_code: "POSTRUN_CURRENT",
    },
    AdversarialProgram {
        name: "summary_rebound",
        source: "let r = log.run_summary(current_run);\nlet id = r.run_id;\nlet again = log.run_summary(id);\nreturn again.duration_seconds;",
        expected_code: "TARGET_FIELD",
    },
    AdversarialProgram {
        name: "sum_with_benign_field",
        source: "let r = log.run_summary(current_run);\nreturn r.duration_seconds + r.started_at;",
        expected_code: "TARGET_FIELD",
    },
    AdversarialProgram {
        name: "implicit_then_scale",
        source: "let r = log.run_summary(current_run);\nlet d = if r.duration_seconds > 10 then 2 else 3;\nreturn d * 7;",
        expected_code: "TARGET_FIELD",
    },
    AdversarialProgram {
        name: "negated_roundtrip",
        source: "let m = log.stage_metrics(current_run);\nlet t = -sum(m.wall_seconds);\nreturn -t;",
        expected_code: "POSTRUN_CURRENT",
    },
    AdversarialProgram {
        name: "nested_if_laundering",
        source: "let m = log.stage_metrics(current_run);\nlet a = min(m.n_tasks);\nreturn if a > 4 then if a > 8 then 2 else 1 else 0;",
        expected_code: "POSTRUN_CURRENT",
    },
];
