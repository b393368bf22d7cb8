use std::sync::Arc;

use super::*;
use crate::analyzer::{
    template_catalog, DefaultValue, FeatureSource, FeatureSpec, FeatureType, Refresh,
};
use crate::corpus::CorpusSpec;
use crate::toolchain::{builtin_registry, register_run_summary, standard_policy};

fn fixture() -> (ToolRegistry, ExecutionPolicy) {
    let dataset = Arc::new(
        CorpusSpec { seed: 11, n_tables: 4, n_jobs: 3, runs_per_job: 2, noiseless: true }
            .generate()
            .unwrap(),
    );
    let mut registry = builtin_registry(dataset.clone());
    register_run_summary(&mut registry, dataset);
    let policy = standard_policy(&registry);
    (registry, policy)
}

fn numeric_spec(source: &str) -> FeatureSpec {
    FeatureSpec {
        name: "probe".into(),
        ftype: FeatureType::Numerical,
        source: FeatureSource::Code,
        extraction_plan: source.into(),
        expected_cost_ms: 0,
        refresh: Refresh::PerRun,
        default_value: DefaultValue::Num(0.0),
        provenance: "test".into(),
        version: "1".into(),
    }
}

fn gate(source: &str) -> Result<GatedProgram, Vec<GateVerdict>> {
    let (registry, policy) = fixture();
    gate_program(&numeric_spec(source), &registry, &policy)
}


#[test]
fn adversarial_suite_is_fully_rejected_by_the_leakage_gate() {
    for AdversarialProgram { name, source, expected_code } in ADVERSARIAL_LEAKAGE_SUITE {
        let verdicts = gate(source).err().unwrap_or_else(|| panic!("{name} passed the gates"));
        // The completion gate must accept these; the leakage gate alone
        // does the rejection.
        assert_eq!(verdicts[0].gate, GateKind::Cc, "{name}");
        assert!(verdicts[0].pass, "{name} failed the completion gate instead");
        let dl = &verdicts[1];
        assert_eq!(dl.gate, GateKind::Dl, "{name}");
        assert!(!dl.pass, "{name}");
        assert!(!dl.reasons.is_empty(), "{name}: failing verdict without reasons");
        assert!(
            dl.reasons.iter().any(|r| r.code == expected_code),
            "{name}: expected {expected_code}, got {:?}",
            dl.reasons
        );
    }
}

#[test]
fn benign_template_catalog_passes_both_gates() {
    let (registry, policy) = fixture();
    for spec in template_catalog() {
        let gated = gate_program(&spec, &registry, &policy)
            .unwrap_or_else(|v| panic!("{} rejected: {v:?}", spec.name));
        let (cc, dl) = gated.verdicts();
        assert!(cc.pass && dl.pass, "{}", spec.name);
    }
}

#[test]
fn benign_edge_cases_pass() {
    // A constant has no taint source.
    assert!(gate("return 42;").is_ok());
    // Historical lag of the label is explicitly allowed.
    assert!(gate("let h = log.history(job, 1);\nreturn mean(h.duration_seconds);").is_ok());
    // Reading a non-denylisted field of a current-run call is clean:
    // the start timestamp exists before the run finishes.
    assert!(gate("let r = log.run_summary(current_run);\nreturn r.started_at;").is_ok());
    // The run id itself is assigned at scheduling time.
    let spec = FeatureSpec {
        ftype: FeatureType::Categorical,
        ..numeric_spec("return current_run;")
    };
    let (registry, policy) = fixture();
    assert!(gate_program(&spec, &registry, &policy).is_ok());
}

#[test]
fn completion_gate_rejects_unknown_tools() {
    let err = gate("let x = secret.dump(job);\nreturn x.v;").unwrap_err();
    assert_eq!(err.len(), 1);
    assert!(!err[0].pass);
    assert_eq!(err[0].gate, GateKind::Cc);
    assert!(err[0].reasons.iter().any(|r| r.code == "TOOL_NOT_ALLOWLISTED"));
}

#[test]
fn completion_gate_rejects_undefined_identifiers() {
    let err = gate("return nope;").unwrap_err();
    assert!(err[0].reasons.iter().any(|r| r.code == "UNDEFINED"));
}

#[test]
fn completion_gate_rejects_parse_failures() {
    let err = gate("return").unwrap_err();
    assert_eq!(err.len(), 1);
    assert!(err[0].reasons.iter().any(|r| r.code == "PARSE"));
}

#[test]
fn completion_gate_rejects_return_type_mismatches() {
    let err = gate("return \"fast\";").unwrap_err();
    assert!(err[0].reasons.iter().any(|r| r.code == "RETURN_TYPE"));
    // Unwrapped booleans are not numerals.
    let err = gate("return 1 > 0;").unwrap_err();
    assert!(err[0].reasons.iter().any(|r| r.code == "RETURN_TYPE"));
}

#[test]
fn completion_gate_enforces_the_policy_allowlist() {
    let (registry, mut policy) = fixture();
    policy.tool_allowlist.remove("sql.plan_summary");
    let spec = numeric_spec("let p = sql.plan_summary(sql);\nreturn p.n_joins;");
    let err = gate_program(&spec, &registry, &policy).unwrap_err();
    assert_eq!(err.len(), 1);
    assert!(!err[0].pass);
    let reason = &err[0].reasons[0];
    assert_eq!(reason.code, "TOOL_NOT_ALLOWLISTED");
    assert!(reason.message.contains("sql.plan_summary"));
}

#[test]
fn availability_map_covers_every_call_site() {
    let (registry, _) = fixture();
    let source = "let h = log.history(job, 1);\nlet m = log.stage_metrics(current_run);\nreturn mean(h.duration_seconds) + sum(m.wall_seconds);";
    let program = parse(source).unwrap();
    let spec = numeric_spec(source);
    let typed = typecheck(&program, &registry, spec.expected_type()).unwrap();
    let map = AvailabilityMap::for_program(&typed);
    assert_eq!(map.call_sites.len(), 2);
    assert_eq!(map.call_sites[&0], Availability::PrerunHistorical);
    // Run-sensitive tools resolve conservatively to postrun-current.
    assert_eq!(map.call_sites[&1], Availability::PostrunCurrent);
    for field in DENYLISTED_FIELDS {
        assert!(map.denylist.contains(field));
    }
}

#[test]
fn leakage_reasons_describe_the_path() {
    let err = gate(
        "let m = log.stage_metrics(current_run);\nlet t = sum(m.wall_seconds);\nreturn t * 1;",
    )
    .unwrap_err();
    let reason = &err[1].reasons[0];
    assert!(reason.message.contains("log.stage_metrics"));
    assert!(reason.message.contains("return"));
    assert_eq!(reason.location, "1:9");
}

#[test]
fn harness_bypass_constructs_passing_verdicts() {
    let (registry, _) = fixture();
    let source = "let m = log.stage_metrics(current_run);\nreturn sum(m.wall_seconds);";
    let typed = typecheck(
        &parse(source).unwrap(),
        &registry,
        crate::dsl::ValueType::Num,
    )
    .unwrap();
    let gated = GatedProgram::assume_checked_for_harness(typed);
    let (cc, dl) = gated.verdicts();
    assert!(cc.pass && dl.pass);
    assert_eq!(gated.typed().calls.len(), 1);
}

#[test]
fn verdicts_append_to_a_jsonl_audit_log() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gates.jsonl");
    let source = "let m = log.stage_metrics(current_run);\nreturn sum(m.wall_seconds);";
    let verdicts = gate(source).unwrap_err();
    append_verdict_log(&path, source, &verdicts).unwrap();
    append_verdict_log(&path, "return 42;", &[GateVerdict::passed(GateKind::Cc)]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let first: VerdictLogEntry = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(first.program_sha256.len(), 64);
    assert!(first.pass);
    let second: VerdictLogEntry = serde_json::from_str(lines[1]).unwrap();
    assert!(!second.pass);
    assert_eq!(second.gate, GateKind::Dl);
    assert!(!second.reasons.is_empty());
    let third: VerdictLogEntry = serde_json::from_str(lines[2]).unwrap();
    assert_ne!(third.program_sha256, first.program_sha256);
}
