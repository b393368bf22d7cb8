//! The built-in template planner: a fixed catalog of extractor programs
//! organized into families, emitted when their trigger conditions hold.

use std::collections::BTreeSet;

use crate::corpus::JobArtifact;
use crate::evaluation::FeedbackPacket;
use crate::knowledge::RetrievedContext;

use super::{DefaultValue, FeatureSource, FeatureSpec, FeatureType, Planner, Refresh};

/// Version stamped on every template-derived spec.
pub const TEMPLATE_VERSION: &str = "1";

/// Fine-grained families in canonical emission order.
const FAMILIES: [&str; 7] =
    ["history", "metadata", "config", "selectivity", "plan", "scan", "shuffle"];

fn make(
    name: &str,
    family: &str,
    source: FeatureSource,
    refresh: Refresh,
    cost_ms: u64,
    plan: String,
) -> FeatureSpec {
    FeatureSpec {
        name: name.into(),
        ftype: FeatureType::Numerical,
        source,
        extraction_plan: plan,
        expected_cost_ms: cost_ms,
        refresh,
        default_value: DefaultValue::Num(0.0),
        provenance: format!("template/{family}"),
        version: TEMPLATE_VERSION.into(),
    }
}

fn history_specs() -> Vec<FeatureSpec> {
    let lag = |name: &str, field: &str| {
        make(
            name,
            "history",
            FeatureSource::Log,
            Refresh::PerRun,
            11,
            format!("let h = log.history(job, 1);\nreturn mean(h.{field});\n"),
        )
    };
    vec![
        lag("duration_seconds_lag_1", "duration_seconds"),
        lag("vcpu_lag_1", "vcpu"),
        lag("Memory_lag_1", "memory_gb"),
        lag("DBU_lag_1", "dbu"),
        make(
            "duration_seconds_shifted_avg_last_3_runs",
            "history",
            FeatureSource::Log,
            Refresh::PerRun,
            11,
            "let h = log.history(job, 3);\nreturn mean(h.duration_seconds);\n".into(),
        ),
    ]
}

fn metadata_specs() -> Vec<FeatureSpec> {
    let mut specs = Vec::new();
    for slot in ["table1", "table2", "table3"] {
        for field in ["total_bytes", "row_count", "partition_count"] {
            // Guarded so an absent table slot yields 0 instead of a
            // missing value: the call may fail but its result is only
            // read when the slot is populated.
            specs.push(make(
                &format!("{slot}_{field}"),
                "metadata",
                FeatureSource::Metadata,
                Refresh::Daily,
                6,
                format!(
                    "let s = meta.table_stats({slot});\nreturn if {slot} == \"\" then 0 else s.{field};\n"
                ),
            ));
        }
    }
    specs
}

fn config_specs() -> Vec<FeatureSpec> {
    let conf = |name: &str, ret: &str| {
        make(
            name,
            "config",
            FeatureSource::Metadata,
            Refresh::PerRun,
            6,
            format!("let c = meta.cluster_config(job);\nreturn {ret};\n"),
        )
    };
    vec![
        conf("workers", "c.workers"),
        conf("photon_flag", "if c.photon_factor > 1 then 1 else 0"),
        conf("price_per_second", "c.price_per_second"),
    ]
}

fn selectivity_specs() -> Vec<FeatureSpec> {
    ["table1", "table2", "table3"]
        .iter()
        .map(|slot| {
            make(
                &format!("{slot}_estimated_selectivity"),
                "selectivity",
                FeatureSource::Code,
                Refresh::Daily,
                81,
                format!(
                    "let e = sql.estimate_selectivity(sql, {slot});\nreturn if {slot} == \"\" then 0 else e.selectivity;\n"
                ),
            )
        })
        .collect()
}

fn plan_specs() -> Vec<FeatureSpec> {
    let plan = |name: &str, field: &str| {
        make(
            name,
            "plan",
            FeatureSource::Code,
            Refresh::Static,
            121,
            format!("let p = sql.plan_summary(sql);\nreturn p.{field};\n"),
        )
    };
    vec![plan("plan_n_joins", "n_joins"), plan("plan_n_group_by", "n_group_by")]
}

/// Shared body of the byte-volume estimators: per-slot guarded
/// `bytes * selectivity` terms.
fn scan_terms() -> String {
    let mut body = String::new();
    for (i, slot) in ["table1", "table2", "table3"].iter().enumerate() {
        body.push_str(&format!("let s{n} = meta.table_stats({slot});\n", n = i + 1));
    }
    for (i, slot) in ["table1", "table2", "table3"].iter().enumerate() {
        body.push_str(&format!(
            "let e{n} = sql.estimate_selectivity(sql, {slot});\n",
            n = i + 1
        ));
    }
    for (i, slot) in ["table1", "table2", "table3"].iter().enumerate() {
        body.push_str(&format!(
            "let b{n} = if {slot} == \"\" then 0 else s{n}.total_bytes * e{n}.selectivity;\n",
            n = i + 1
        ));
    }
    body
}

fn scan_specs() -> Vec<FeatureSpec> {
    vec![make(
        "scan_bytes_estimate",
        "scan",
        FeatureSource::Code,
        Refresh::Daily,
        256,
        format!("{}return b1 + b2 + b3;\n", scan_terms()),
    )]
}

fn shuffle_specs() -> Vec<FeatureSpec> {
    vec![make(
        "shuffle_estimate",
        "shuffle",
        FeatureSource::Code,
        Refresh::Daily,
        376,
        format!(
            "{}let p = sql.plan_summary(sql);\nlet amp = 0.9 * (if p.n_joins > 0 then 1 else 0) + 0.6 * p.n_group_by;\nreturn (b1 + b2 + b3) * amp;\n",
            scan_terms()
        ),
    )]
}

fn family_specs(family: &str) -> Vec<FeatureSpec> {
    match family {
        "history" => history_specs(),
        "metadata" => metadata_specs(),
        "config" => config_specs(),
        "selectivity" => selectivity_specs(),
        "plan" => plan_specs(),
        "scan" => scan_specs(),
        "shuffle" => shuffle_specs(),
        _ => Vec::new(),
    }
}

/// Every template in canonical order; the benign reference set for the
/// safety gates.
pub fn template_catalog() -> Vec<FeatureSpec> {
    FAMILIES.iter().flat_map(|f| family_specs(f)).collect()
}

/// Fine-grained family of a spec, parsed from its provenance.
pub fn template_family(spec: &FeatureSpec) -> Option<&str> {
    spec.provenance.strip_prefix("template/")
}

/// Collapses fine families to ablation groups: everything extracted by
/// sandboxed analysis counts as one group.
pub fn coarse_family(fine: &str) -> &'static str {
    match fine {
        "history" => "history",
        "metadata" => "metadata",
        "config" => "config",
        _ => "sandbox",
    }
}

fn resolve_family(name: &str) -> Vec<&'static str> {
    match name {
        "sandbox" => vec!["selectivity", "plan", "scan", "shuffle"],
        other => FAMILIES.iter().copied().filter(|f| *f == other).collect(),
    }
}

/// Applies a feedback packet to a proposal: forced families are added
/// first (set-wise, no duplicates), then dropped features are removed.
/// Applying the same packet twice leaves the result unchanged.
pub fn apply_feedback(mut specs: Vec<FeatureSpec>, packet: &FeedbackPacket) -> Vec<FeatureSpec> {
    for family in &packet.add_templates {
        for fine in resolve_family(family) {
            for template in family_specs(fine) {
                if !specs.iter().any(|s| s.name == template.name) {
                    specs.push(template);
                }
            }
        }
    }
    let dropped: BTreeSet<&str> = packet.drop.iter().map(|(name, _)| name.as_str()).collect();
    specs.retain(|s| !dropped.contains(s.name.as_str()));
    specs
}

/// Deterministic template planner.
///
/// Triggers: history templates need at least one prior run; metadata and
/// config templates always fire; each sandbox family needs a retrieval
/// hit carrying its tag. Feedback is applied last.
pub fn plan_from_templates(
    artifact: &JobArtifact,
    context: &RetrievedContext,
    feedback: Option<&FeedbackPacket>,
) -> Vec<FeatureSpec> {
    let mut enabled: BTreeSet<&str> = BTreeSet::new();
    if !artifact.prior_runs.is_empty() {
        enabled.insert("history");
    }
    enabled.insert("metadata");
    enabled.insert("config");
    for tag in ["selectivity", "plan", "scan", "shuffle"] {
        if context.has_tag(tag) {
            enabled.insert(tag);
        }
    }
    let specs = FAMILIES
        .iter()
        .filter(|f| enabled.contains(**f))
        .flat_map(|f| family_specs(f))
        .collect();
    match feedback {
        Some(packet) => apply_feedback(specs, packet),
        None => specs,
    }
}

/// The built-in planner behind the proposal seam.
pub struct TemplatePlanner;

impl Planner for TemplatePlanner {
    fn propose(
        &self,
        artifact: &JobArtifact,
        context: &RetrievedContext,
        feedback: Option<&FeedbackPacket>,
    ) -> Vec<FeatureSpec> {
        plan_from_templates(artifact, context, feedback)
    }
}
