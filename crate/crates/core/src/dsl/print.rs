//! Canonical source rendering. Re-parsing a printed program yields an
//! identical AST.

use std::fmt::Write;

use super::{BindingRhs, CallArg, Expr, ExtractorProgram};

/// Precedence levels used to decide where parentheses are required.
const PREC_IF: u8 = 0;
const PREC_CMP: u8 = 1;
const PREC_ADD: u8 = 2;
const PREC_MUL: u8 = 3;
const PREC_UNARY: u8 = 4;
const PREC_ATOM: u8 = 5;

/// Renders a program as canonical source text.
pub fn pretty_print(program: &ExtractorProgram) -> String {
    let mut out = String::new();
    for binding in &program.bindings {
        match &binding.rhs {
            BindingRhs::Call { tool, args, .. } => {
                let rendered: Vec<String> = args.iter().map(render_arg).collect();
                writeln!(out, "let {} = {tool}({});", binding.name, rendered.join(", "))
                    .expect("string write");
            }
            BindingRhs::Expr(expr) => {
                writeln!(out, "let {} = {};", binding.name, render(expr, PREC_IF))
                    .expect("string write");
            }
        }
    }
    writeln!(out, "return {};", render(&program.ret, PREC_IF)).expect("string write");
    out
}

fn render_arg(arg: &CallArg) -> String {
    match arg {
        CallArg::Num(n) => format_num(*n),
        CallArg::Str(s) => quote(s),
        CallArg::Bool(b) => b.to_string(),
        CallArg::Ident { name, .. } => name.clone(),
    }
}

/// `min_prec` is the loosest precedence allowed without parentheses.
fn render(expr: &Expr, min_prec: u8) -> String {
    let (text, prec) = match expr {
        Expr::Num(n) => (format_num(*n), PREC_ATOM),
        Expr::Str(s) => (quote(s), PREC_ATOM),
        Expr::Bool(b) => (b.to_string(), PREC_ATOM),
        Expr::Path(path) => (render_path(path), PREC_ATOM),
        Expr::Neg { operand, .. } => (format!("-{}", render(operand, PREC_UNARY)), PREC_UNARY),
        Expr::Binary { op, lhs, rhs, .. } => {
            let prec = if op.is_comparison() {
                PREC_CMP
            } else if matches!(op, super::BinOp::Add | super::BinOp::Sub) {
                PREC_ADD
            } else {
                PREC_MUL
            };
            // Arithmetic is left-associative: the right child needs strictly
            // higher precedence to print bare. Comparisons are
            // non-associative, so both children need it.
            let lhs_prec = if op.is_comparison() { prec + 1 } else { prec };
            let text = format!(
                "{} {} {}",
                render(lhs, lhs_prec),
                op.symbol(),
                render(rhs, prec + 1)
            );
            (text, prec)
        }
        Expr::If { cond, then, otherwise, .. } => (
            format!(
                "if {} then {} else {}",
                render(cond, PREC_CMP),
                render(then, PREC_CMP),
                render(otherwise, PREC_IF)
            ),
            PREC_IF,
        ),
        Expr::Aggregate { agg, path, .. } => {
            (format!("{}({})", agg.name(), render_path(path)), PREC_ATOM)
        }
        Expr::Contains { path, needle, .. } => (
            format!("contains({}, {})", render_path(path), quote(needle)),
            PREC_ATOM,
        ),
    };
    if prec < min_prec {
        format!("({text})")
    } else {
        text
    }
}

fn render_path(path: &super::PathExpr) -> String {
    let mut out = path.root.clone();
    for field in &path.fields {
        out.push('.');
        out.push_str(field);
    }
    out
}

fn format_num(n: f64) -> String {
    // f64 Display prints the shortest digits that round-trip exactly.
    format!("{n}")
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            other => out.push(other),
        }
    }
    out.push('"');
    out
}
