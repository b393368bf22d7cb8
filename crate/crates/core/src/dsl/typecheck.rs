//! Type checking and dataflow extraction for parsed programs.

use std::collections::BTreeMap;

use crate::toolchain::{FieldKind, OutputSchema, ParamKind, ToolRegistry};

use super::{
    AggFn, BinOp, BindingRhs, CallArg, CallSite, DslType, Expr, ExtractorProgram, PathExpr, Reads,
    Span, TypeError, TypeErrorKind, TypedProgram, ValueType, AMBIENT_NAMES,
};

/// Checks a program against the registry's tool schemas and the expected
/// return type. On success the result carries binding types, per-binding
/// reads, and one entry per tool call site.
pub fn typecheck(
    program: &ExtractorProgram,
    registry: &ToolRegistry,
    expected: ValueType,
) -> Result<TypedProgram, Vec<TypeError>> {
    let mut checker = Checker {
        registry,
        env: BTreeMap::new(),
        order: Vec::new(),
        errors: Vec::new(),
    };
    let mut binding_types = Vec::new();
    let mut binding_reads = Vec::new();
    let mut calls = Vec::new();

    for (index, binding) in program.bindings.iter().enumerate() {
        if checker.env.contains_key(binding.name.as_str())
            || AMBIENT_NAMES.contains(&binding.name.as_str())
        {
            checker.push(
                binding.span,
                TypeErrorKind::DuplicateBinding,
                format!("`{}` is already bound", binding.name),
            );
        }
        let mut reads = Reads::default();
        let ty = match &binding.rhs {
            BindingRhs::Call { tool, args, span } => {
                checker.check_call(index, tool, args, *span, &mut reads, &mut calls)
            }
            BindingRhs::Expr(expr) => checker.infer(expr, &mut reads),
        };
        checker.env.insert(binding.name.clone(), (index, ty.clone()));
        checker.order.push(binding.name.clone());
        binding_types.push(ty);
        binding_reads.push(reads);
    }

    let mut return_reads = Reads::default();
    let ret_ty = checker.infer(&program.ret, &mut return_reads);
    match ret_ty.scalar() {
        Some(found) if found == expected => {}
        Some(found) => checker.push(
            program.ret.span(),
            TypeErrorKind::ReturnTypeMismatch,
            format!("program returns {found} but the feature declares {expected}"),
        ),
        None => {
            if ret_ty != DslType::Error {
                checker.push(
                    program.ret.span(),
                    TypeErrorKind::ReturnTypeMismatch,
                    format!(
                        "program returns a {} but the feature declares {expected}",
                        ret_ty.name()
                    ),
                );
            }
        }
    }

    if !checker.errors.is_empty() {
        return Err(checker.errors);
    }
    let mut program = program.clone();
    program.declared_output_type = Some(expected);
    Ok(TypedProgram {
        program,
        binding_types,
        output_type: expected,
        binding_reads,
        return_reads,
        calls,
    })
}

struct Checker<'a> {
    registry: &'a ToolRegistry,
    /// name -> (binding index, type); ambient names are absent and resolve
    /// to `Str` in `resolve`.
    env: BTreeMap<String, (usize, DslType)>,
    order: Vec<String>,
    errors: Vec<TypeError>,
}

impl Checker<'_> {
    fn push(&mut self, span: Span, kind: TypeErrorKind, message: String) {
        self.errors.push(TypeError { span, kind, message });
    }

    fn resolve(&self, name: &str) -> Option<(Option<usize>, DslType)> {
        if let Some((index, ty)) = self.env.get(name) {
            return Some((Some(*index), ty.clone()));
        }
        if AMBIENT_NAMES.contains(&name) {
            return Some((None, DslType::Str));
        }
        None
    }

    fn note_root(&self, name: &str, reads: &mut Reads) {
        if let Some((index, _)) = self.env.get(name) {
            reads.bindings.insert(*index);
        } else if AMBIENT_NAMES.contains(&name) {
            reads.ambient.insert(name.to_string());
        }
    }

    fn check_call(
        &mut self,
        binding_index: usize,
        tool: &str,
        args: &[CallArg],
        span: Span,
        reads: &mut Reads,
        calls: &mut Vec<CallSite>,
    ) -> DslType {
        let Some(descriptor) = self.registry.descriptor(tool) else {
            self.push(span, TypeErrorKind::UnknownTool, format!("unknown tool `{tool}`"));
            return DslType::Error;
        };
        let descriptor = descriptor.clone();
        if args.len() != descriptor.params.len() {
            self.push(
                span,
                TypeErrorKind::Arity,
                format!(
                    "`{tool}` expects {} argument(s), got {}",
                    descriptor.params.len(),
                    args.len()
                ),
            );
            return DslType::Error;
        }
        let mut site = CallSite {
            binding: binding_index,
            tool: tool.to_string(),
            availability: descriptor.availability,
            category: descriptor.category,
            cost_estimate_ms: descriptor.cost_estimate_ms,
            arg_bindings: Default::default(),
            arg_ambient: Default::default(),
        };
        for (arg, param) in args.iter().zip(&descriptor.params) {
            let given = match arg {
                CallArg::Num(_) => Some(DslType::Num),
                CallArg::Str(_) => Some(DslType::Str),
                CallArg::Bool(_) => Some(DslType::Bool),
                CallArg::Ident { name, span } => match self.resolve(name) {
                    Some((index, ty)) => {
                        if let Some(i) = index {
                            reads.bindings.insert(i);
                            site.arg_bindings.insert(i);
                        } else {
                            reads.ambient.insert(name.clone());
                            site.arg_ambient.insert(name.clone());
                        }
                        Some(ty)
                    }
                    None => {
                        self.push(
                            *span,
                            TypeErrorKind::Undefined,
                            format!("undefined identifier `{name}`"),
                        );
                        None
                    }
                },
            };
            let Some(given) = given else { continue };
            let ok = matches!(
                (&given, param.kind),
                (DslType::Num, ParamKind::Num)
                    | (DslType::Str, ParamKind::Str)
                    | (DslType::Bool, ParamKind::Bool)
                    | (DslType::Error, _)
            );
            if !ok {
                self.push(
                    span,
                    TypeErrorKind::ArgType,
                    format!(
                        "`{tool}` parameter `{}` expects {:?}, got {}",
                        param.name,
                        param.kind,
                        given.name()
                    ),
                );
            }
        }
        calls.push(site);
        match &descriptor.output {
            OutputSchema::Record(s) => DslType::Record(s.clone()),
            OutputSchema::RecordList(s) => DslType::RecordList(s.clone()),
        }
    }

    fn path_type(&mut self, path: &PathExpr, reads: &mut Reads) -> DslType {
        let Some((index, mut ty)) = self.resolve(&path.root) else {
            self.push(
                path.span,
                TypeErrorKind::Undefined,
                format!("undefined identifier `{}`", path.root),
            );
            return DslType::Error;
        };
        self.note_root(&path.root, reads);
        for field in &path.fields {
            ty = match ty {
                DslType::Record(schema) => {
                    if let Some(i) = index {
                        reads.binding_fields.insert((i, field.clone()));
                    }
                    match schema.kind_of(field) {
                        Some(FieldKind::Num) => DslType::Num,
                        Some(FieldKind::Str) => DslType::Str,
                        Some(FieldKind::Bool) => DslType::Bool,
                        Some(FieldKind::NumList) => DslType::NumList,
                        None => {
                            self.push(
                                path.span,
                                TypeErrorKind::UnknownField,
                                format!("record has no field `{field}`"),
                            );
                            DslType::Error
                        }
                    }
                }
                DslType::RecordList(schema) => {
                    if let Some(i) = index {
                        reads.binding_fields.insert((i, field.clone()));
                    }
                    match schema.kind_of(field) {
                        Some(FieldKind::Num) => DslType::NumList,
                        Some(FieldKind::Str) => DslType::StrList,
                        Some(FieldKind::Bool) => DslType::BoolList,
                        Some(FieldKind::NumList) => {
                            self.push(
                                path.span,
                                TypeErrorKind::FieldOnScalar,
                                format!("field `{field}` is a list of lists; not addressable"),
                            );
                            DslType::Error
                        }
                        None => {
                            self.push(
                                path.span,
                                TypeErrorKind::UnknownField,
                                format!("records have no field `{field}`"),
                            );
                            DslType::Error
                        }
                    }
                }
                DslType::Error => DslType::Error,
                other => {
                    self.push(
                        path.span,
                        TypeErrorKind::FieldOnScalar,
                        format!("cannot access field `{field}` on a {}", other.name()),
                    );
                    DslType::Error
                }
            };
        }
        ty
    }

    fn infer(&mut self, expr: &Expr, reads: &mut Reads) -> DslType {
        match expr {
            Expr::Num(_) => DslType::Num,
            Expr::Str(_) => DslType::Str,
            Expr::Bool(_) => DslType::Bool,
            Expr::Path(path) => self.path_type(path, reads),
            Expr::Neg { operand, span } => {
                let ty = self.infer(operand, reads);
                if !matches!(ty, DslType::Num | DslType::Error) {
                    self.push(
                        *span,
                        TypeErrorKind::OperandType,
                        format!("negation needs a num, got {}", ty.name()),
                    );
                    return DslType::Error;
                }
                DslType::Num
            }
            Expr::Binary { op, lhs, rhs, span } => {
                let lt = self.infer(lhs, reads);
                let rt = self.infer(rhs, reads);
                if lt == DslType::Error || rt == DslType::Error {
                    return DslType::Error;
                }
                if op.is_comparison() {
                    let ordered = matches!(op, BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge);
                    let ok = if ordered {
                        lt == DslType::Num && rt == DslType::Num
                    } else {
                        lt == rt && lt.scalar().is_some()
                    };
                    if !ok {
                        self.push(
                            *span,
                            TypeErrorKind::ComparisonType,
                            format!(
                                "`{}` cannot compare {} with {}",
                                op.symbol(),
                                lt.name(),
                                rt.name()
                            ),
                        );
                        return DslType::Error;
                    }
                    DslType::Bool
                } else {
                    if lt != DslType::Num || rt != DslType::Num {
                        self.push(
                            *span,
                            TypeErrorKind::OperandType,
                            format!(
                                "`{}` needs num operands, got {} and {}",
                                op.symbol(),
                                lt.name(),
                                rt.name()
                            ),
                        );
                        return DslType::Error;
                    }
                    DslType::Num
                }
            }
            Expr::If { cond, then, otherwise, span } => {
                let ct = self.infer(cond, reads);
                if !matches!(ct, DslType::Bool | DslType::Error) {
                    self.push(
                        *span,
                        TypeErrorKind::CondNotBool,
                        format!("if-condition must be bool, got {}", ct.name()),
                    );
                }
                let tt = self.infer(then, reads);
                let et = self.infer(otherwise, reads);
                if tt == DslType::Error || et == DslType::Error {
                    return DslType::Error;
                }
                if tt != et {
                    self.push(
                        *span,
                        TypeErrorKind::BranchMismatch,
                        format!("if-branches disagree: {} vs {}", tt.name(), et.name()),
                    );
                    return DslType::Error;
                }
                tt
            }
            Expr::Aggregate { agg, path, span } => {
                let ty = self.path_type(path, reads);
                match (agg, &ty) {
                    (_, DslType::Error) => DslType::Error,
                    (AggFn::Count, DslType::NumList)
                    | (AggFn::Count, DslType::StrList)
                    | (AggFn::Count, DslType::BoolList)
                    | (AggFn::Count, DslType::RecordList(_)) => DslType::Num,
                    (_, DslType::NumList) => DslType::Num,
                    (_, DslType::StrList) | (_, DslType::BoolList) | (_, DslType::RecordList(_)) => {
                        self.push(
                            *span,
                            TypeErrorKind::AggElementNotNum,
                            format!("{} needs a list of num, got {}", agg.name(), ty.name()),
                        );
                        DslType::Error
                    }
                    _ => {
                        self.push(
                            *span,
                            TypeErrorKind::AggOnScalar,
                            format!("{} needs a list, got scalar {}", agg.name(), ty.name()),
                        );
                        DslType::Error
                    }
                }
            }
            Expr::Contains { path, span, .. } => {
                let ty = self.path_type(path, reads);
                match ty {
                    DslType::Str | DslType::StrList | DslType::Error => DslType::Bool,
                    other => {
                        self.push(
                            *span,
                            TypeErrorKind::ContainsType,
                            format!("contains needs a str or str list, got {}", other.name()),
                        );
                        DslType::Error
                    }
                }
            }
        }
    }
}
