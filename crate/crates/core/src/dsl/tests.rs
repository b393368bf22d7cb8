use std::sync::Arc;

use proptest::prelude::*;

use crate::corpus::{
    ClusterConfig, HistoryDataset, JobScript, RunTrace, ScannedTable, TableMeta,
};
use crate::toolchain::{
    builtin_registry, standard_policy, Availability, AvailabilitySpec, BudgetState, CacheKey,
    ExecutionPolicy, FieldKind, OutputSchema, RecordSchema, RequestScope, ToolCategory,
    ToolDescriptor, ToolValue,
};

use super::*;

fn fixture() -> (Arc<HistoryDataset>, RequestScope, AmbientBindings) {
    let config = ClusterConfig {
        instance_name: "m5.xlarge".into(),
        workers: 4,
        per_worker_throughput_bps: 5e7,
        network_bw_bps: 1e8,
        photon_factor: 1.0,
        price_per_second: 0.005,
    };
    let dataset = HistoryDataset {
        catalog: vec![TableMeta {
            name: "t1".into(),
            total_bytes: 5_000_000_000,
            row_count: 1000,
            partition_count: 10,
            partition_column: "ds".into(),
            key_cardinality: 5,
            zipf_exponent: 1.0,
        }],
        fleet: vec![config.clone()],
        jobs: vec![JobScript {
            job_id: "j1".into(),
            sql_text: "select k, count(1) from t1 where ds = '2025-01-01' group by k".into(),
            scanned_tables: vec![ScannedTable { table: "t1".into(), selectivity: 0.01 }],
            has_group_by: true,
            has_join: false,
            amplification: 0.5,
            skew_table: None,
        }],
        runs: vec![RunTrace {
            run_id: "j1_r0".into(),
            job_id: "j1".into(),
            config: config.clone(),
            started_at: 1_000,
            duration_seconds: 27.19,
            stage_metrics: vec![],
            shuffle_read_bytes: 0,
            shuffle_write_bytes: 0,
            spill_bytes: 0,
        }],
    };
    let scope = RequestScope {
        job_id: "j1".into(),
        sql_text: dataset.jobs[0].sql_text.clone(),
        config,
        current_run_id: None,
        scheduling_time: 2_000,
    };
    let ambient = AmbientBindings {
        job: "j1".into(),
        sql: dataset.jobs[0].sql_text.clone(),
        current_run: String::new(),
        tables: ["t1".into(), String::new(), String::new()],
    };
    (Arc::new(dataset), scope, ambient)
}

fn key() -> CacheKey {
    CacheKey {
        job_signature: "sig".into(),
        data_snapshot_id: "snap".into(),
        feature_version: "fs".into(),
        tool_version: "ts".into(),
    }
}

fn run_program(
    source: &str,
    expected: ValueType,
    policy_override: Option<ExecutionPolicy>,
) -> FeatureValue {
    let (dataset, scope, ambient) = fixture();
    let registry = builtin_registry(dataset);
    let policy = policy_override.unwrap_or_else(|| standard_policy(&registry));
    let program = parse(source).expect("parses");
    let tp = typecheck(&program, &registry, expected).expect("typechecks");
    let mut budget = BudgetState::default();
    evaluate(&tp, &registry, &policy, &key(), &scope, &ambient, &mut budget)
}

// -------------------------------------------------------------------------
// Parsing

#[test]
fn minimal_program_parses() {
    let program = parse("let s = meta.table_stats(\"t1\"); return s.row_count").unwrap();
    assert_eq!(program.bindings.len(), 1);
    assert_eq!(program.bindings[0].name, "s");
    assert!(matches!(
        program.bindings[0].rhs,
        BindingRhs::Call { ref tool, .. } if tool == "meta.table_stats"
    ));
    assert!(matches!(program.ret, Expr::Path(_)));
}

#[test]
fn missing_return_is_reported() {
    let errs = parse("let s = meta.table_stats(\"t1\");").unwrap_err();
    assert!(errs[0].message.contains("missing return"), "{}", errs[0]);
}

#[test]
fn trailing_operator_is_reported_at_position() {
    let errs = parse("return 1 + ").unwrap_err();
    assert!(errs[0].message.contains("expected an expression"));
    assert_eq!(errs[0].span.line, 1);
    assert_eq!(errs[0].span.col, 12);
}

#[test]
fn error_positions_track_lines() {
    let errs = parse("let a = 1;\nreturn a +").unwrap_err();
    assert_eq!(errs[0].span.line, 2);
}

#[test]
fn calls_in_expressions_are_rejected() {
    let errs = parse("return meta.table_stats(\"t1\").row_count").unwrap_err();
    assert!(errs[0].message.contains("only allowed as a binding"), "{}", errs[0]);
}

#[test]
fn missing_semicolon_is_reported() {
    let errs = parse("let x = 5 return x").unwrap_err();
    assert!(errs[0].message.contains("`;`"), "{}", errs[0]);
}

#[test]
fn unterminated_string_is_reported() {
    let errs = parse("return \"oops").unwrap_err();
    assert!(errs[0].message.contains("unterminated"));
}

// -------------------------------------------------------------------------
// Type checking

fn check(source: &str, expected: ValueType) -> Result<TypedProgram, Vec<TypeError>> {
    let (dataset, _, _) = fixture();
    let registry = builtin_registry(dataset);
    typecheck(&parse(source).unwrap(), &registry, expected)
}

#[test]
fn undefined_identifier_is_reported() {
    let errs = check("return x + 1", ValueType::Num).unwrap_err();
    assert_eq!(errs[0].kind, TypeErrorKind::Undefined);
    assert!(errs[0].message.contains("`x`"));
}

#[test]
fn wrong_arity_is_reported() {
    let errs = check("let s = meta.table_stats(); return 1", ValueType::Num).unwrap_err();
    assert_eq!(errs[0].kind, TypeErrorKind::Arity);
}

#[test]
fn aggregate_over_scalar_is_reported() {
    let errs = check(
        "let s = meta.table_stats(\"t1\"); return mean(s.row_count)",
        ValueType::Num,
    )
    .unwrap_err();
    assert_eq!(errs[0].kind, TypeErrorKind::AggOnScalar);
}

#[test]
fn return_type_must_match_declaration() {
    let errs = check("return sql", ValueType::Num).unwrap_err();
    assert_eq!(errs[0].kind, TypeErrorKind::ReturnTypeMismatch);
    // Bare booleans are not a feature type; wrap in if-then-else.
    let errs = check("return 1 < 2", ValueType::Num).unwrap_err();
    assert_eq!(errs[0].kind, TypeErrorKind::ReturnTypeMismatch);
    assert!(check("return if 1 < 2 then 1 else 0", ValueType::Num).is_ok());
}

#[test]
fn argument_type_mismatch_is_reported() {
    let errs = check("let s = meta.table_stats(7); return 1", ValueType::Num).unwrap_err();
    assert_eq!(errs[0].kind, TypeErrorKind::ArgType);
}

#[test]
fn unknown_field_and_tool_are_reported() {
    let errs = check(
        "let s = meta.table_stats(\"t1\"); return s.nope",
        ValueType::Num,
    )
    .unwrap_err();
    assert_eq!(errs[0].kind, TypeErrorKind::UnknownField);
    let errs = check("let s = meta.nope(\"t1\"); return 1", ValueType::Num).unwrap_err();
    assert_eq!(errs[0].kind, TypeErrorKind::UnknownTool);
}

#[test]
fn rebinding_names_is_reported() {
    let errs = check("let a = 1; let a = 2; return a", ValueType::Num).unwrap_err();
    assert_eq!(errs[0].kind, TypeErrorKind::DuplicateBinding);
    let errs = check("let sql = 1; return sql", ValueType::Num).unwrap_err();
    assert_eq!(errs[0].kind, TypeErrorKind::DuplicateBinding);
}

#[test]
fn branch_and_condition_types_are_enforced() {
    let errs = check("return if 1 then 2 else 3", ValueType::Num).unwrap_err();
    assert_eq!(errs[0].kind, TypeErrorKind::CondNotBool);
    let errs = check("return if true then 2 else sql", ValueType::Num).unwrap_err();
    assert_eq!(errs[0].kind, TypeErrorKind::BranchMismatch);
}

#[test]
fn typed_program_reports_dataflow_and_calls() {
    let tp = check(
        "let m = log.stage_metrics(current_run); return sum(m.wall_seconds)",
        ValueType::Num,
    )
    .unwrap();
    assert_eq!(tp.calls.len(), 1);
    let call = &tp.calls[0];
    assert_eq!(call.tool, "log.stage_metrics");
    assert!(call.arg_ambient.contains("current_run"));
    assert!(matches!(call.availability, AvailabilitySpec::CurrentRunSensitive { .. }));
    assert!(tp.return_reads.bindings.contains(&0));
    assert!(tp.return_reads.binding_fields.contains(&(0, "wall_seconds".to_string())));
}

#[test]
fn tool_costs_sum_over_call_sites() {
    let tp = check(
        "let e = sql.estimate_selectivity(sql, \"t1\");\
         let p = sql.plan_summary(sql);\
         return e.selectivity + p.n_joins",
        ValueType::Num,
    )
    .unwrap();
    assert_eq!(tp.tool_cost_ms(), 200);
}

#[test]
fn multiple_errors_are_collected() {
    let errs = check(
        "let a = meta.table_stats(); let a = nope; return a",
        ValueType::Num,
    )
    .unwrap_err();
    assert!(errs.len() >= 2, "{errs:?}");
}

// -------------------------------------------------------------------------
// Evaluation

#[test]
fn table_stats_field_evaluates_to_fixture_value() {
    let got = run_program(
        "let s = meta.table_stats(\"t1\"); return s.row_count",
        ValueType::Num,
        None,
    );
    assert_eq!(got, FeatureValue::Num(1000.0));
}

#[test]
fn division_by_zero_yields_missing() {
    let got = run_program("return 1/0", ValueType::Num, None);
    assert_eq!(got, FeatureValue::Missing(MissingReason::DivByZero));
}

#[test]
fn history_mean_evaluates_prior_duration() {
    let got = run_program(
        "let h = log.history(job, 1); return mean(h.duration_seconds)",
        ValueType::Num,
        None,
    );
    assert_eq!(got, FeatureValue::Num(27.19));
}

#[test]
fn guarded_missing_table_falls_back_lazily() {
    // table2 is empty for this job; the tool call fails but the guard's
    // then-branch never touches the poisoned binding.
    let got = run_program(
        "let s2 = meta.table_stats(table2);\
         return if table2 == \"\" then 0 else s2.row_count",
        ValueType::Num,
        None,
    );
    assert_eq!(got, FeatureValue::Num(0.0));
    // Reading the poisoned binding does surface the tool failure.
    let got = run_program(
        "let s2 = meta.table_stats(table2); return s2.row_count",
        ValueType::Num,
        None,
    );
    assert_eq!(got, FeatureValue::Missing(MissingReason::ToolError));
}

#[test]
fn empty_aggregate_yields_missing() {
    // Scheduling before the only run leaves an empty visible history.
    let (dataset, mut scope, ambient) = fixture();
    scope.scheduling_time = 500;
    let registry = builtin_registry(dataset);
    let policy = standard_policy(&registry);
    for source in [
        "let h = log.history(job, 3); return mean(h.duration_seconds)",
        "let h = log.history(job, 3); return count(h)",
    ] {
        let tp = typecheck(&parse(source).unwrap(), &registry, ValueType::Num).unwrap();
        let mut budget = BudgetState::default();
        let got = evaluate(&tp, &registry, &policy, &key(), &scope, &ambient, &mut budget);
        assert_eq!(got, FeatureValue::Missing(MissingReason::EmptyList), "{source}");
    }
    // An unknown job is a tool failure, not an empty list.
    let got = run_program(
        "let h = log.history(\"no_such_job\", 3); return count(h)",
        ValueType::Num,
        None,
    );
    assert_eq!(got, FeatureValue::Missing(MissingReason::ToolError));
}

#[test]
fn stddev_of_single_value_is_zero() {
    let got = run_program(
        "let h = log.history(job, 1); return stddev(h.duration_seconds)",
        ValueType::Num,
        None,
    );
    assert_eq!(got, FeatureValue::Num(0.0));
}

#[test]
fn contains_inspects_script_text() {
    let got = run_program(
        "return if contains(sql, \"group by\") then 1 else 0",
        ValueType::Num,
        None,
    );
    assert_eq!(got, FeatureValue::Num(1.0));
    let got = run_program(
        "return if contains(sql, \"window\") then 1 else 0",
        ValueType::Num,
        None,
    );
    assert_eq!(got, FeatureValue::Num(0.0));
}

#[test]
fn exhausted_budget_yields_missing_budget() {
    let (dataset, _, _) = fixture();
    let registry = builtin_registry(dataset);
    let mut policy = standard_policy(&registry);
    policy.max_sandbox_calls_per_job = 0;
    let got = run_program(
        "let e = sql.estimate_selectivity(sql, \"t1\"); return e.selectivity",
        ValueType::Num,
        Some(policy),
    );
    assert_eq!(got, FeatureValue::Missing(MissingReason::Budget));
}

#[test]
fn timed_out_tool_yields_missing_timeout() {
    let (dataset, scope, ambient) = fixture();
    let mut registry = builtin_registry(dataset);
    registry
        .register(
            ToolDescriptor {
                name: "test.slow".into(),
                params: vec![],
                output: OutputSchema::Record(RecordSchema {
                    fields: vec![("x".into(), FieldKind::Num)],
                }),
                availability: AvailabilitySpec::Fixed(Availability::PrerunStatic),
                category: ToolCategory::Metadata,
                cost_estimate_ms: 1,
                version: "1".into(),
            },
            Arc::new(|_, _| {
                std::thread::sleep(std::time::Duration::from_millis(25));
                Ok(ToolValue::Record(
                    [("x".to_string(), crate::toolchain::FieldValue::Num(1.0))]
                        .into_iter()
                        .collect(),
                ))
            }),
        )
        .unwrap();
    let mut policy = standard_policy(&registry);
    policy.tool_allowlist.insert("test.slow".into());
    policy.per_call_timeout_ms = 5;
    let program = parse("let s = test.slow(); return s.x").unwrap();
    let tp = typecheck(&program, &registry, ValueType::Num).unwrap();
    let mut budget = BudgetState::default();
    let got = evaluate(&tp, &registry, &policy, &key(), &scope, &ambient, &mut budget);
    assert_eq!(got, FeatureValue::Missing(MissingReason::Timeout));
}

#[test]
fn evaluation_is_pure_given_cached_tools() {
    let (dataset, scope, ambient) = fixture();
    let registry = builtin_registry(dataset);
    let policy = standard_policy(&registry);
    let program = parse(
        "let s = meta.table_stats(table1);\
         let e = sql.estimate_selectivity(sql, table1);\
         return s.total_bytes * e.selectivity",
    )
    .unwrap();
    let tp = typecheck(&program, &registry, ValueType::Num).unwrap();
    let mut budget = BudgetState::default();
    let first = evaluate(&tp, &registry, &policy, &key(), &scope, &ambient, &mut budget);
    let second = evaluate(&tp, &registry, &policy, &key(), &scope, &ambient, &mut budget);
    assert_eq!(first, second);
    assert_eq!(first, FeatureValue::Num(5_000_000_000.0 * 0.01));
}

#[test]
fn ambient_bindings_come_from_the_artifact() {
    let spec = crate::corpus::CorpusSpec {
        n_tables: 5,
        n_jobs: 8,
        runs_per_job: 2,
        ..Default::default()
    };
    let dataset = spec.generate().unwrap();
    let run_id = dataset.runs[1].run_id.clone();
    let artifact = crate::corpus::JobArtifact::for_run(&dataset, &run_id).unwrap();
    let ambient = AmbientBindings::for_artifact(&artifact);
    assert_eq!(ambient.job, artifact.job.job_id);
    assert_eq!(ambient.current_run, run_id);
    assert_eq!(ambient.tables[0], artifact.job.scanned_tables[0].table);
}

// -------------------------------------------------------------------------
// Pretty printing

#[test]
fn printing_normalizes_spacing_and_parentheses() {
    let program = parse("return 1+2*3").unwrap();
    assert_eq!(pretty_print(&program), "return 1 + 2 * 3;\n");
    let program = parse("return (1+2)*3").unwrap();
    assert_eq!(pretty_print(&program), "return (1 + 2) * 3;\n");
    let program = parse("return 1 - (2 - 3)").unwrap();
    assert_eq!(pretty_print(&program), "return 1 - (2 - 3);\n");
    let program = parse("let s = meta.table_stats(\"t1\");return s.row_count;").unwrap();
    assert_eq!(
        pretty_print(&program),
        "let s = meta.table_stats(\"t1\");\nreturn s.row_count;\n"
    );
}

#[test]
fn string_escapes_round_trip() {
    let source = "return \"a\\\"b\\\\c\\nd\\te\"";
    let program = parse(source).unwrap();
    let printed = pretty_print(&program);
    let reparsed = parse(&printed).unwrap();
    assert_eq!(program.ret, reparsed.ret);
}

#[test]
fn nested_conditionals_round_trip() {
    let source = "return if if true then false else true then 1 else if false then 2 else 3";
    let program = parse(source).unwrap();
    let printed = pretty_print(&program);
    let reparsed = parse(&printed).unwrap();
    assert_eq!(pretty_print(&reparsed), printed);
    assert_eq!(strip_ret(&program), strip_ret(&reparsed));
}

fn strip_ret(p: &ExtractorProgram) -> Expr {
    // Spans differ between the original and printed layouts; compare the
    // return expressions with spans erased.
    fn strip(e: &Expr) -> Expr {
        match e {
            Expr::Num(_) | Expr::Str(_) | Expr::Bool(_) => e.clone(),
            Expr::Path(p) => Expr::Path(PathExpr { span: Span::default(), ..p.clone() }),
            Expr::Neg { operand, .. } => {
                Expr::Neg { operand: Box::new(strip(operand)), span: Span::default() }
            }
            Expr::Binary { op, lhs, rhs, .. } => Expr::Binary {
                op: *op,
                lhs: Box::new(strip(lhs)),
                rhs: Box::new(strip(rhs)),
                span: Span::default(),
            },
            Expr::If { cond, then, otherwise, .. } => Expr::If {
                cond: Box::new(strip(cond)),
                then: Box::new(strip(then)),
                otherwise: Box::new(strip(otherwise)),
                span: Span::default(),
            },
            Expr::Aggregate { agg, path, .. } => Expr::Aggregate {
                agg: *agg,
                path: PathExpr { span: Span::default(), ..path.clone() },
                span: Span::default(),
            },
            Expr::Contains { path, needle, .. } => Expr::Contains {
                path: PathExpr { span: Span::default(), ..path.clone() },
                needle: needle.clone(),
                span: Span::default(),
            },
        }
    }
    strip(&p.ret)
}

// -------------------------------------------------------------------------
// Property: print-parse fixpoint

const KEYWORDS: [&str; 7] = ["let", "return", "if", "then", "else", "true", "false"];

fn arb_ident() -> impl Strategy<Value = String> {
    "[a-w][a-z0-9_]{0,6}".prop_filter("keyword", |s| !KEYWORDS.contains(&s.as_str()))
}

fn arb_string() -> impl Strategy<Value = String> {
    // Printable ASCII plus the characters the printer escapes.
    proptest::collection::vec(
        prop_oneof![
            proptest::char::range(' ', '~'),
            Just('"'),
            Just('\\'),
            Just('\n'),
            Just('\t'),
        ],
        0..10,
    )
    .prop_map(|cs| cs.into_iter().collect())
}

fn arb_path() -> impl Strategy<Value = PathExpr> {
    (arb_ident(), proptest::collection::vec(arb_ident(), 0..3)).prop_map(|(root, fields)| {
        PathExpr { root, fields, span: Span::default() }
    })
}

fn arb_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (0.0f64..1e9).prop_map(Expr::Num),
        arb_string().prop_map(Expr::Str),
        any::<bool>().prop_map(Expr::Bool),
        arb_path().prop_map(Expr::Path),
    ];
    leaf.prop_recursive(4, 24, 3, |inner| {
        let agg = prop_oneof![
            Just(AggFn::Sum),
            Just(AggFn::Mean),
            Just(AggFn::Max),
            Just(AggFn::Min),
            Just(AggFn::Count),
            Just(AggFn::Stddev),
        ];
        let op = prop_oneof![
            Just(BinOp::Add),
            Just(BinOp::Sub),
            Just(BinOp::Mul),
            Just(BinOp::Div),
            Just(BinOp::Eq),
            Just(BinOp::Ne),
            Just(BinOp::Lt),
            Just(BinOp::Le),
            Just(BinOp::Gt),
            Just(BinOp::Ge),
        ];
        prop_oneof![
            inner.clone().prop_map(|operand| Expr::Neg {
                operand: Box::new(operand),
                span: Span::default(),
            }),
            (op, inner.clone(), inner.clone()).prop_map(|(op, lhs, rhs)| Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
                span: Span::default(),
            }),
            (inner.clone(), inner.clone(), inner.clone()).prop_map(|(c, t, e)| Expr::If {
                cond: Box::new(c),
                then: Box::new(t),
                otherwise: Box::new(e),
                span: Span::default(),
            }),
            (agg, arb_path()).prop_map(|(agg, path)| Expr::Aggregate {
                agg,
                path,
                span: Span::default(),
            }),
            (arb_path(), arb_string()).prop_map(|(path, needle)| Expr::Contains {
                path,
                needle,
                span: Span::default(),
            }),
        ]
    })
}

fn arb_call() -> impl Strategy<Value = BindingRhs> {
    let tool = prop_oneof![
        Just("meta.table_stats".to_string()),
        Just("log.history".to_string()),
        Just("sql.plan_summary".to_string()),
        Just("x.y.z".to_string()),
    ];
    let arg = prop_oneof![
        (0.0f64..1e6).prop_map(CallArg::Num),
        arb_string().prop_map(CallArg::Str),
        any::<bool>().prop_map(CallArg::Bool),
        arb_ident().prop_map(|name| CallArg::Ident { name, span: Span::default() }),
    ];
    (tool, proptest::collection::vec(arg, 0..3)).prop_map(|(tool, args)| BindingRhs::Call {
        tool,
        args,
        span: Span::default(),
    })
}

fn arb_program() -> impl Strategy<Value = ExtractorProgram> {
    let rhs = prop_oneof![arb_expr().prop_map(BindingRhs::Expr), arb_call()];
    (
        proptest::collection::vec((arb_ident(), rhs), 0..4),
        arb_expr(),
    )
        .prop_map(|(raw, ret)| {
            let bindings = raw
                .into_iter()
                .enumerate()
                .map(|(i, (name, rhs))| Binding {
                    // Suffix to keep names unique; uniqueness is a typecheck
                    // concern but keeps the programs realistic.
                    name: format!("{name}_{i}"),
                    rhs,
                    span: Span::default(),
                })
                .collect();
            ExtractorProgram { source: String::new(), bindings, ret, declared_output_type: None }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn print_parse_fixpoint(program in arb_program()) {
        let printed = pretty_print(&program);
        let parsed = parse(&printed).unwrap_or_else(|e| {
            panic!("printed program failed to parse: {e:?}\n{printed}")
        });
        let reprinted = pretty_print(&parsed);
        prop_assert_eq!(&printed, &reprinted);
        let reparsed = parse(&reprinted).unwrap();
        prop_assert_eq!(parsed, reparsed);
    }
}
