//! The sandboxed feature-extraction language.
//!
//! Every generated extractor is a program in this small DSL: a sequence of
//! `let` bindings (the only place tool calls may appear) followed by a
//! `return` expression. The grammar admits no loops, recursion, or
//! user-defined functions, so evaluation always terminates and the safety
//! gates can analyze programs exactly. Data conditions (division by zero,
//! empty aggregates, tool failures) never abort evaluation; they surface as
//! typed MISSING values with a reason.

mod eval;
mod lexer;
mod parser;
mod print;
mod typecheck;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toolchain::{AvailabilitySpec, ToolCategory};

pub use eval::{evaluate, AmbientBindings};
pub use parser::parse;
pub use print::pretty_print;
pub use typecheck::typecheck;

/// Line/column of a token, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Span {
    pub line: usize,
    pub col: usize,
}

impl std::fmt::Display for Span {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

/// A syntax error with its position.
#[derive(Debug, Clone, Error)]
#[error("syntax error at {span}: {message}")]
pub struct SyntaxError {
    pub span: Span,
    pub message: String,
}

/// What went wrong during type checking, with its position.
#[derive(Debug, Clone, Error)]
#[error("type error at {span}: {message}")]
pub struct TypeError {
    pub span: Span,
    pub kind: TypeErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TypeErrorKind {
    Undefined,
    DuplicateBinding,
    UnknownTool,
    Arity,
    ArgType,
    UnknownField,
    FieldOnScalar,
    AggOnScalar,
    AggElementNotNum,
    OperandType,
    CondNotBool,
    BranchMismatch,
    ComparisonType,
    ContainsType,
    ReturnTypeMismatch,
    CallOutsideBinding,
}

/// Scalar type an extractor may return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueType {
    Num,
    Str,
    Bool,
}

impl std::fmt::Display for ValueType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ValueType::Num => "num",
            ValueType::Str => "str",
            ValueType::Bool => "bool",
        };
        f.write_str(s)
    }
}

/// Types the checker assigns to bindings and expressions.
#[derive(Debug, Clone, PartialEq)]
pub enum DslType {
    Num,
    Str,
    Bool,
    /// One record of the named tool's schema.
    Record(crate::toolchain::RecordSchema),
    /// A list of records of one schema.
    RecordList(crate::toolchain::RecordSchema),
    NumList,
    StrList,
    BoolList,
    /// Assigned after an error to suppress cascading diagnostics.
    Error,
}

impl DslType {
    pub fn scalar(&self) -> Option<ValueType> {
        match self {
            DslType::Num => Some(ValueType::Num),
            DslType::Str => Some(ValueType::Str),
            DslType::Bool => Some(ValueType::Bool),
            _ => None,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            DslType::Num => "num",
            DslType::Str => "str",
            DslType::Bool => "bool",
            DslType::Record(_) => "record",
            DslType::RecordList(_) => "record list",
            DslType::NumList => "num list",
            DslType::StrList => "str list",
            DslType::BoolList => "bool list",
            DslType::Error => "error",
        }
    }
}

/// Why a feature value is absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingReason {
    DivByZero,
    ToolError,
    EmptyList,
    Budget,
    Timeout,
}

impl std::fmt::Display for MissingReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MissingReason::DivByZero => "div_by_zero",
            MissingReason::ToolError => "tool_error",
            MissingReason::EmptyList => "empty_list",
            MissingReason::Budget => "budget",
            MissingReason::Timeout => "timeout",
        };
        f.write_str(s)
    }
}

/// The result of evaluating one extractor for one job: a scalar or a typed
/// MISSING sentinel. Default substitution happens downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureValue {
    Num(f64),
    Str(String),
    Bool(bool),
    Missing(MissingReason),
}

impl FeatureValue {
    pub fn is_missing(&self) -> bool {
        matches!(self, FeatureValue::Missing(_))
    }

    pub fn as_num(&self) -> Option<f64> {
        match self {
            FeatureValue::Num(n) => Some(*n),
            _ => None,
        }
    }
}

/// Aggregate functions over list paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggFn {
    Sum,
    Mean,
    Max,
    Min,
    Count,
    Stddev,
}

impl AggFn {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            AggFn::Sum => "sum",
            AggFn::Mean => "mean",
            AggFn::Max => "max",
            AggFn::Min => "min",
            AggFn::Count => "count",
            AggFn::Stddev => "stddev",
        }
    }

    pub(crate) fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sum" => AggFn::Sum,
            "mean" => AggFn::Mean,
            "max" => AggFn::Max,
            "min" => AggFn::Min,
            "count" => AggFn::Count,
            "stddev" => AggFn::Stddev,
            _ => return None,
        })
    }
}

/// Binary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl BinOp {
    pub(crate) fn symbol(&self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
        }
    }

    pub(crate) fn is_comparison(&self) -> bool {
        matches!(
            self,
            BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge
        )
    }
}

/// A dotted access starting at a binding or ambient name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathExpr {
    pub root: String,
    pub fields: Vec<String>,
    pub span: Span,
}

/// Expressions. Tool calls are deliberately absent: they only occur as a
/// binding's right-hand side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Num(f64),
    Str(String),
    Bool(bool),
    Path(PathExpr),
    Neg { operand: Box<Expr>, span: Span },
    Binary { op: BinOp, lhs: Box<Expr>, rhs: Box<Expr>, span: Span },
    If { cond: Box<Expr>, then: Box<Expr>, otherwise: Box<Expr>, span: Span },
    Aggregate { agg: AggFn, path: PathExpr, span: Span },
    Contains { path: PathExpr, needle: String, span: Span },
}

impl Expr {
    pub(crate) fn span(&self) -> Span {
        match self {
            Expr::Num(_) | Expr::Str(_) | Expr::Bool(_) => Span::default(),
            Expr::Path(p) => p.span,
            Expr::Neg { span, .. }
            | Expr::Binary { span, .. }
            | Expr::If { span, .. }
            | Expr::Aggregate { span, .. }
            | Expr::Contains { span, .. } => *span,
        }
    }
}

/// A literal or identifier handed to a tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CallArg {
    Num(f64),
    Str(String),
    Bool(bool),
    Ident { name: String, span: Span },
}

/// A binding's right-hand side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BindingRhs {
    Call { tool: String, args: Vec<CallArg>, span: Span },
    Expr(Expr),
}

/// One `let` binding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    pub name: String,
    pub rhs: BindingRhs,
    pub span: Span,
}

/// A parsed extractor program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorProgram {
    pub source: String,
    pub bindings: Vec<Binding>,
    pub ret: Expr,
    /// Output type the owning feature spec declares; filled by the checker.
    pub declared_output_type: Option<ValueType>,
}

/// What one binding's right-hand side (or the return expression) reads.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Reads {
    /// Indices of earlier bindings referenced anywhere.
    pub bindings: BTreeSet<usize>,
    /// (binding index, field name) pairs for direct field accesses.
    pub binding_fields: BTreeSet<(usize, String)>,
    /// Ambient names referenced (job, sql, current_run, table1..3).
    pub ambient: BTreeSet<String>,
}

/// One tool call site with everything the gates need to judge it.
#[derive(Debug, Clone, PartialEq)]
pub struct CallSite {
    /// Index of the binding holding this call's result.
    pub binding: usize,
    pub tool: String,
    pub availability: AvailabilitySpec,
    pub category: ToolCategory,
    pub cost_estimate_ms: u64,
    /// Binding indices appearing among the arguments.
    pub arg_bindings: BTreeSet<usize>,
    /// Ambient names appearing among the arguments.
    pub arg_ambient: BTreeSet<String>,
}

/// A type-checked program plus the dataflow facts gate analyses consume.
#[derive(Debug, Clone, PartialEq)]
pub struct TypedProgram {
    pub program: ExtractorProgram,
    pub binding_types: Vec<DslType>,
    pub output_type: ValueType,
    /// Per-binding reads; index-aligned with `program.bindings`.
    pub binding_reads: Vec<Reads>,
    pub return_reads: Reads,
    pub calls: Vec<CallSite>,
}

impl TypedProgram {
    /// Sum of declared tool costs across all call sites.
    pub fn tool_cost_ms(&self) -> u64 {
        self.calls.iter().map(|c| c.cost_estimate_ms).sum()
    }
}

/// Ambient names every program may reference without binding them.
pub const AMBIENT_NAMES: [&str; 6] = ["job", "sql", "current_run", "table1", "table2", "table3"];

#[cfg(test)]
mod tests;
