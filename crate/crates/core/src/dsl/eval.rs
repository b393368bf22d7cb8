//! Evaluation of type-checked programs against the tool runtime.
//!
//! Bindings evaluate eagerly in order; if-branches evaluate lazily, so a
//! guarded binding whose tool call failed never poisons the taken branch.
//! All data conditions produce MISSING values instead of errors.

use std::collections::BTreeMap;

use crate::corpus::JobArtifact;
use crate::toolchain::{
    ArgValue, BudgetState, CacheKey, ExecutionPolicy, FieldValue, Record, RequestScope, ToolError,
    ToolRegistry, ToolValue,
};

use super::{AggFn, BinOp, BindingRhs, CallArg, Expr, FeatureValue, MissingReason, PathExpr, TypedProgram};

/// Values of the six ambient names programs may reference without binding.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbientBindings {
    pub job: String,
    pub sql: String,
    /// Empty string when no concrete run exists yet (pure scheduling mode).
    pub current_run: String,
    /// Names of the first three scanned tables; empty when absent.
    pub tables: [String; 3],
}

impl AmbientBindings {
    pub fn for_artifact(artifact: &JobArtifact) -> Self {
        let mut tables = [String::new(), String::new(), String::new()];
        for (i, scanned) in artifact.job.scanned_tables.iter().take(3).enumerate() {
            tables[i] = scanned.table.clone();
        }
        AmbientBindings {
            job: artifact.job.job_id.clone(),
            sql: artifact.job.sql_text.clone(),
            current_run: artifact.current_run_id.clone().unwrap_or_default(),
            tables,
        }
    }

    fn get(&self, name: &str) -> Option<&str> {
        match name {
            "job" => Some(&self.job),
            "sql" => Some(&self.sql),
            "current_run" => Some(&self.current_run),
            "table1" => Some(&self.tables[0]),
            "table2" => Some(&self.tables[1]),
            "table3" => Some(&self.tables[2]),
            _ => None,
        }
    }
}

/// Runtime values; `Missing` carries the first reason encountered.
#[derive(Debug, Clone, PartialEq)]
enum Value {
    Num(f64),
    Str(String),
    Bool(bool),
    Record(Record),
    Records(Vec<Record>),
    NumList(Vec<f64>),
    StrList(Vec<String>),
    BoolList(Vec<bool>),
    Missing(MissingReason),
}

/// Evaluates a program for one request. Tool calls route through
/// `registry.call` under `policy`; failures surface as MISSING reasons.
pub fn evaluate(
    tp: &TypedProgram,
    registry: &ToolRegistry,
    policy: &ExecutionPolicy,
    key: &CacheKey,
    scope: &RequestScope,
    ambient: &AmbientBindings,
    budget: &mut BudgetState,
) -> FeatureValue {
    let mut env: BTreeMap<&str, Value> = BTreeMap::new();
    for binding in &tp.program.bindings {
        let value = match &binding.rhs {
            BindingRhs::Call { tool, args, .. } => {
                eval_call(tool, args, &env, ambient, registry, policy, key, scope, budget)
            }
            BindingRhs::Expr(expr) => eval_expr(expr, &env, ambient),
        };
        env.insert(binding.name.as_str(), value);
    }
    match eval_expr(&tp.program.ret, &env, ambient) {
        Value::Num(n) => FeatureValue::Num(n),
        Value::Str(s) => FeatureValue::Str(s),
        Value::Bool(b) => FeatureValue::Bool(b),
        Value::Missing(reason) => FeatureValue::Missing(reason),
        // The checker guarantees a scalar return type.
        other => unreachable!("non-scalar return value {other:?}"),
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_call(
    tool: &str,
    args: &[CallArg],
    env: &BTreeMap<&str, Value>,
    ambient: &AmbientBindings,
    registry: &ToolRegistry,
    policy: &ExecutionPolicy,
    key: &CacheKey,
    scope: &RequestScope,
    budget: &mut BudgetState,
) -> Value {
    let mut arg_values = Vec::with_capacity(args.len());
    for arg in args {
        let value = match arg {
            CallArg::Num(n) => ArgValue::Num(*n),
            CallArg::Str(s) => ArgValue::Str(s.clone()),
            CallArg::Bool(b) => ArgValue::Bool(*b),
            CallArg::Ident { name, .. } => match env.get(name.as_str()) {
                Some(Value::Num(n)) => ArgValue::Num(*n),
                Some(Value::Str(s)) => ArgValue::Str(s.clone()),
                Some(Value::Bool(b)) => ArgValue::Bool(*b),
                Some(Value::Missing(reason)) => return Value::Missing(*reason),
                Some(other) => unreachable!("non-scalar call argument {other:?}"),
                None => match ambient.get(name) {
                    Some(s) => ArgValue::Str(s.to_string()),
                    None => unreachable!("unbound argument `{name}` past typecheck"),
                },
            },
        };
        arg_values.push(value);
    }
    match registry.call(tool, &arg_values, policy, key, scope, budget) {
        Ok(result) => match result.value {
            ToolValue::Record(r) => Value::Record(r),
            ToolValue::Records(rs) => Value::Records(rs),
        },
        Err(ToolError::BudgetExhausted { .. }) => Value::Missing(MissingReason::Budget),
        Err(ToolError::Timeout { .. }) => Value::Missing(MissingReason::Timeout),
        Err(_) => Value::Missing(MissingReason::ToolError),
    }
}

fn field_to_value(field: &FieldValue) -> Value {
    match field {
        FieldValue::Num(n) => Value::Num(*n),
        FieldValue::Str(s) => Value::Str(s.clone()),
        FieldValue::Bool(b) => Value::Bool(*b),
        FieldValue::NumList(ns) => Value::NumList(ns.clone()),
    }
}

fn eval_path(path: &PathExpr, env: &BTreeMap<&str, Value>, ambient: &AmbientBindings) -> Value {
    let mut value = match env.get(path.root.as_str()) {
        Some(v) => v.clone(),
        None => match ambient.get(&path.root) {
            Some(s) => Value::Str(s.to_string()),
            None => unreachable!("unbound path root `{}` past typecheck", path.root),
        },
    };
    for field in &path.fields {
        value = match value {
            Value::Missing(reason) => Value::Missing(reason),
            Value::Record(record) => match record.get(field) {
                Some(f) => field_to_value(f),
                None => Value::Missing(MissingReason::ToolError),
            },
            Value::Records(records) => {
                let fields: Option<Vec<&FieldValue>> =
                    records.iter().map(|r| r.get(field)).collect();
                match fields {
                    None => Value::Missing(MissingReason::ToolError),
                    Some(fs) => {
                        if fs.iter().all(|f| matches!(f, FieldValue::Num(_))) {
                            Value::NumList(
                                fs.iter()
                                    .map(|f| match f {
                                        FieldValue::Num(n) => *n,
                                        _ => unreachable!(),
                                    })
                                    .collect(),
                            )
                        } else if fs.iter().all(|f| matches!(f, FieldValue::Str(_))) {
                            Value::StrList(
                                fs.iter()
                                    .map(|f| match f {
                                        FieldValue::Str(s) => s.clone(),
                                        _ => unreachable!(),
                                    })
                                    .collect(),
                            )
                        } else if fs.iter().all(|f| matches!(f, FieldValue::Bool(_))) {
                            Value::BoolList(
                                fs.iter()
                                    .map(|f| match f {
                                        FieldValue::Bool(b) => *b,
                                        _ => unreachable!(),
                                    })
                                    .collect(),
                            )
                        } else {
                            Value::Missing(MissingReason::ToolError)
                        }
                    }
                }
            }
            _ => unreachable!("field access on scalar past typecheck"),
        };
    }
    value
}

fn eval_expr(expr: &Expr, env: &BTreeMap<&str, Value>, ambient: &AmbientBindings) -> Value {
    match expr {
        Expr::Num(n) => Value::Num(*n),
        Expr::Str(s) => Value::Str(s.clone()),
        Expr::Bool(b) => Value::Bool(*b),
        Expr::Path(path) => eval_path(path, env, ambient),
        Expr::Neg { operand, .. } => match eval_expr(operand, env, ambient) {
            Value::Num(n) => Value::Num(-n),
            Value::Missing(reason) => Value::Missing(reason),
            other => unreachable!("negation of {other:?} past typecheck"),
        },
        Expr::Binary { op, lhs, rhs, .. } => {
            let left = eval_expr(lhs, env, ambient);
            if let Value::Missing(reason) = left {
                return Value::Missing(reason);
            }
            let right = eval_expr(rhs, env, ambient);
            if let Value::Missing(reason) = right {
                return Value::Missing(reason);
            }
            eval_binary(*op, left, right)
        }
        Expr::If { cond, then, otherwise, .. } => match eval_expr(cond, env, ambient) {
            Value::Bool(true) => eval_expr(then, env, ambient),
            Value::Bool(false) => eval_expr(otherwise, env, ambient),
            Value::Missing(reason) => Value::Missing(reason),
            other => unreachable!("non-bool condition {other:?} past typecheck"),
        },
        Expr::Aggregate { agg, path, .. } => {
            let value = eval_path(path, env, ambient);
            match value {
                Value::Missing(reason) => Value::Missing(reason),
                Value::NumList(ns) => aggregate(*agg, &ns),
                Value::StrList(ss) => {
                    debug_assert!(matches!(agg, AggFn::Count));
                    count_or_missing(ss.len())
                }
                Value::BoolList(bs) => {
                    debug_assert!(matches!(agg, AggFn::Count));
                    count_or_missing(bs.len())
                }
                Value::Records(rs) => {
                    debug_assert!(matches!(agg, AggFn::Count));
                    count_or_missing(rs.len())
                }
                other => unreachable!("aggregate over {other:?} past typecheck"),
            }
        }
        Expr::Contains { path, needle, .. } => match eval_path(path, env, ambient) {
            Value::Str(s) => Value::Bool(s.contains(needle)),
            Value::StrList(ss) => Value::Bool(ss.iter().any(|s| s.contains(needle))),
            Value::Missing(reason) => Value::Missing(reason),
            other => unreachable!("contains over {other:?} past typecheck"),
        },
    }
}

fn eval_binary(op: BinOp, left: Value, right: Value) -> Value {
    match op {
        BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div => {
            let (Value::Num(a), Value::Num(b)) = (&left, &right) else {
                unreachable!("arithmetic on non-num past typecheck");
            };
            match op {
                BinOp::Add => Value::Num(a + b),
                BinOp::Sub => Value::Num(a - b),
                BinOp::Mul => Value::Num(a * b),
                BinOp::Div => {
                    if *b == 0.0 {
                        Value::Missing(MissingReason::DivByZero)
                    } else {
                        Value::Num(a / b)
                    }
                }
                _ => unreachable!(),
            }
        }
        BinOp::Eq | BinOp::Ne => {
            let equal = match (&left, &right) {
                (Value::Num(a), Value::Num(b)) => a == b,
                (Value::Str(a), Value::Str(b)) => a == b,
                (Value::Bool(a), Value::Bool(b)) => a == b,
                _ => unreachable!("mixed equality past typecheck"),
            };
            Value::Bool(if op == BinOp::Eq { equal } else { !equal })
        }
        BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
            let (Value::Num(a), Value::Num(b)) = (&left, &right) else {
                unreachable!("ordering on non-num past typecheck");
            };
            Value::Bool(match op {
                BinOp::Lt => a < b,
                BinOp::Le => a <= b,
                BinOp::Gt => a > b,
                BinOp::Ge => a >= b,
                _ => unreachable!(),
            })
        }
    }
}

fn count_or_missing(len: usize) -> Value {
    if len == 0 {
        Value::Missing(MissingReason::EmptyList)
    } else {
        Value::Num(len as f64)
    }
}

fn aggregate(agg: AggFn, values: &[f64]) -> Value {
    if values.is_empty() {
        return Value::Missing(MissingReason::EmptyList);
    }
    let n = values.len() as f64;
    let result = match agg {
        AggFn::Sum => values.iter().sum(),
        AggFn::Mean => values.iter().sum::<f64>() / n,
        AggFn::Max => values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        AggFn::Min => values.iter().cloned().fold(f64::INFINITY, f64::min),
        AggFn::Count => n,
        AggFn::Stddev => {
            // Population standard deviation: defined (0) for a single value.
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            var.sqrt()
        }
    };
    Value::Num(result)
}
