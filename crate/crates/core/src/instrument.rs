//! Inserts runtime calls into an annotated program.
//!
//! Sensitive functions get `register_stack` at the end of the prologue and
//! `unregister_stack` before every return. Annotated variables are
//! registered right after `register_stack`; pointer annotations also
//! register the pointee right after each statement that gives the pointer a
//! value. Every call to an untrusted function is bracketed by
//! `start_protect` / `stop_protect`. A local whose address is passed to an
//! untrusted function is treated as not sensitive and, in whole-frame
//! functions, gets its `register_memory_exception` just before the first
//! such call.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::program::{
    ApiRow, Arg, FnAnnotation, FunctionDesc, Lists, MemTarget, Program, Provenance, SizeExpr,
    SlotClass, Stmt, Value, VarAnnotation, VarDesc, VaultCall,
};
use crate::vault::Syscall;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sensitivity {
    #[default]
    None,
    Whole,
    Finegrained,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trust {
    #[default]
    Trusted,
    Untrusted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstrumentedFunction {
    pub name: String,
    #[serde(default)]
    pub sensitivity: Sensitivity,
    #[serde(default)]
    pub trust: Trust,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub external: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub params: Vec<VarDesc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub locals: Vec<VarDesc>,
    #[serde(default)]
    pub body: Vec<Stmt>,
}

impl InstrumentedFunction {
    pub fn vars(&self) -> impl Iterator<Item = &VarDesc> {
        self.params.iter().chain(&self.locals)
    }

    pub fn var(&self, name: &str) -> Option<&VarDesc> {
        self.vars().find(|v| v.name == name)
    }

    pub fn is_untrusted(&self) -> bool {
        self.trust == Trust::Untrusted
    }

    /// Frame size: all variables plus frame metadata.
    pub fn frame_size(&self) -> u64 {
        self.vars().map(|v| v.size).sum::<u64>() + crate::memory::FRAME_METADATA
    }

    /// Inserted calls and untrusted call sites in body order, rendered as
    /// `register_stack(all=True)`, `lib_func(&age)` and so on.
    pub fn call_sequence(&self, untrusted: &dyn Fn(&str) -> bool) -> Vec<String> {
        self.body
            .iter()
            .filter_map(|s| match s {
                Stmt::Vault { call, .. } => Some(call.to_string()),
                Stmt::Call { callee, args } if untrusted(callee) => Some(render_call(callee, args)),
                _ => None,
            })
            .collect()
    }
}

fn render_call(callee: &str, args: &[Arg]) -> String {
    let args: Vec<String> = args
        .iter()
        .map(|a| match a {
            Arg::Var(v) => v.clone(),
            Arg::AddrOf(v) => format!("&{v}"),
            Arg::Const(c) => c.to_string(),
        })
        .collect();
    format!("{callee}({})", args.join(", "))
}

/// An annotation whose mapping row inserts nothing in this context.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoOp {
    pub function: String,
    pub subject: String,
    pub row: ApiRow,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstrumentedProgram {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub consts: BTreeMap<String, u64>,
    #[serde(default)]
    pub functions: Vec<InstrumentedFunction>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub no_ops: Vec<NoOp>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl InstrumentedProgram {
    pub fn function(&self, name: &str) -> Option<&InstrumentedFunction> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn is_untrusted(&self, name: &str) -> bool {
        self.function(name).is_some_and(|f| f.is_untrusted())
    }

    /// Every inserted call with the function it sits in.
    pub fn inserted(&self) -> impl Iterator<Item = (&str, &VaultCall, &Provenance)> {
        self.functions.iter().flat_map(|f| {
            f.body.iter().filter_map(move |s| match s {
                Stmt::Vault { call, provenance } => Some((f.name.as_str(), call, provenance)),
                _ => None,
            })
        })
    }

    /// Inserted calls per mapping row.
    pub fn provenance_counts(&self) -> BTreeMap<ApiRow, usize> {
        let mut out = BTreeMap::new();
        for (_, _, p) in self.inserted() {
            *out.entry(p.row).or_default() += 1;
        }
        out
    }

    /// Back to a plain program; inserted calls stay in the bodies.
    pub fn to_program(&self) -> Program {
        Program {
            consts: self.consts.clone(),
            functions: self
                .functions
                .iter()
                .map(|f| FunctionDesc {
                    name: f.name.clone(),
                    annotation: match f.sensitivity {
                        Sensitivity::None => None,
                        Sensitivity::Whole => Some(FnAnnotation::Sensitive),
                        Sensitivity::Finegrained => Some(FnAnnotation::SensitiveFinegrained),
                    },
                    external: f.external,
                    params: f.params.clone(),
                    locals: f.locals.clone(),
                    body: f.body.clone(),
                })
                .collect(),
        }
    }

    /// Inserted calls with their mapping rows, and the untrusted calls they
    /// bracket, per function.
    pub fn listing(&self) -> String {
        let mut out = String::new();
        for f in &self.functions {
            if f.is_untrusted() {
                continue;
            }
            let mut lines = Vec::new();
            for s in &f.body {
                match s {
                    Stmt::Vault { call, provenance } => lines.push(format!(
                        "  {:<48} row {} ({})",
                        call.to_string(),
                        provenance.row.number(),
                        provenance.subject
                    )),
                    Stmt::Call { callee, args } if self.is_untrusted(callee) => {
                        lines.push(format!("  {}", render_call(callee, args)))
                    }
                    _ => {}
                }
            }
            if lines.is_empty() {
                continue;
            }
            let _ = writeln!(out, "{}:", f.name);
            for l in lines {
                let _ = writeln!(out, "{l}");
            }
        }
        for n in &self.no_ops {
            let _ = writeln!(
                out,
                "no-op {}.{} row {}: {}",
                n.function,
                n.subject,
                n.row.number(),
                n.reason
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

pub fn emit(program: &InstrumentedProgram) -> String {
    let mut out = serde_json::to_string_pretty(program).expect("program serializes");
    out.push('\n');
    out
}

pub fn parse_instrumented(source: &str) -> Result<InstrumentedProgram, serde_json::Error> {
    serde_json::from_str(source)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InstrumentError {
    #[error(
        "function `{function}` already contains runtime calls; instrumenting twice is not allowed"
    )]
    AlreadyInstrumented { function: String },
    #[error("`{0}` is a reserved runtime call name")]
    ReservedName(String),
    #[error("function `{0}` is described twice")]
    DuplicateFunction(String),
    #[error("`{0}` is annotated sensitive but listed as untrusted")]
    SensitiveAndUntrusted(String),
    #[error("unresolved callees (external or undescribed, not on the UntrustedList): {}", .0.join(", "))]
    UnresolvedCallees(Vec<String>),
    #[error("{function}: `{callee}` takes {expected} arguments, called with {found}")]
    Arity {
        function: String,
        callee: String,
        expected: usize,
        found: usize,
    },
    #[error("{function}: unknown variable `{var}`")]
    UnknownVariable { function: String, var: String },
    #[error("{function}: variable `{var}` declared twice")]
    DuplicateVariable { function: String, var: String },
    #[error("{function}.{var}: {message}")]
    Annotation {
        function: String,
        var: String,
        message: String,
    },
    #[error("{function}.{var}: cannot resolve pointee size")]
    PointeeSize { function: String, var: String },
    #[error("{function}: unknown constant `{name}`")]
    UnknownConst { function: String, name: String },
    #[error("{function}: statement {index}: {message}")]
    Statement {
        function: String,
        index: usize,
        message: String,
    },
}

impl InstrumentError {
    /// Function and variable the error is about, for locating it in source.
    pub fn location(&self) -> (Option<&str>, Option<&str>) {
        match self {
            InstrumentError::AlreadyInstrumented { function }
            | InstrumentError::Arity { function, .. }
            | InstrumentError::UnknownConst { function, .. }
            | InstrumentError::Statement { function, .. } => (Some(function), None),
            InstrumentError::DuplicateFunction(f) | InstrumentError::SensitiveAndUntrusted(f) => {
                (Some(f), None)
            }
            InstrumentError::UnknownVariable { function, var }
            | InstrumentError::DuplicateVariable { function, var }
            | InstrumentError::Annotation { function, var, .. }
            | InstrumentError::PointeeSize { function, var } => (Some(function), Some(var)),
            InstrumentError::ReservedName(_) | InstrumentError::UnresolvedCallees(_) => {
                (None, None)
            }
        }
    }
}

struct Ctx<'a> {
    program: &'a Program,
    lists: &'a Lists,
    by_name: BTreeMap<&'a str, &'a FunctionDesc>,
}

impl<'a> Ctx<'a> {
    fn untrusted(&self, name: &str) -> bool {
        self.lists.is_untrusted(name)
    }

    fn sensitivity(&self, f: &FunctionDesc) -> Sensitivity {
        match f.annotation {
            Some(FnAnnotation::Sensitive) => Sensitivity::Whole,
            Some(FnAnnotation::SensitiveFinegrained) => Sensitivity::Finegrained,
            None if self.lists.sensitive.contains(&f.name) => Sensitivity::Whole,
            None => Sensitivity::None,
        }
    }

    fn resolve(&self, f: &FunctionDesc, size: &SizeExpr) -> Result<u64, InstrumentError> {
        size.resolve(&self.program.consts)
            .ok_or_else(|| InstrumentError::UnknownConst {
                function: f.name.clone(),
                name: size.to_string(),
            })
    }
}

fn is_reserved(name: &str) -> bool {
    Syscall::from_name(name).is_some()
}

pub fn instrument(
    program: &Program,
    lists: &Lists,
) -> Result<InstrumentedProgram, InstrumentError> {
    let mut by_name = BTreeMap::new();
    for f in &program.functions {
        if is_reserved(&f.name) {
            return Err(InstrumentError::ReservedName(f.name.clone()));
        }
        if by_name.insert(f.name.as_str(), f).is_some() {
            return Err(InstrumentError::DuplicateFunction(f.name.clone()));
        }
    }
    let ctx = Ctx {
        program,
        lists,
        by_name,
    };

    let mut unresolved = BTreeSet::new();
    for f in &program.functions {
        check_function(&ctx, f, &mut unresolved)?;
    }
    if !unresolved.is_empty() {
        return Err(InstrumentError::UnresolvedCallees(
            unresolved.into_iter().collect(),
        ));
    }

    let mut out = InstrumentedProgram {
        consts: program.consts.clone(),
        ..Default::default()
    };
    for name in &lists.sensitive {
        if !ctx.by_name.contains_key(name.as_str()) {
            out.warnings.push(format!(
                "SensitiveList names `{name}`, which the program does not describe"
            ));
        }
    }
    for f in &program.functions {
        let func = instrument_function(&ctx, f, &mut out.no_ops, &mut out.warnings)?;
        out.functions.push(func);
    }
    out.functions.extend(stubs(&ctx)?);
    Ok(out)
}

/// Empty external bodies for listed untrusted callees the program calls but
/// does not describe.
fn stubs(ctx: &Ctx<'_>) -> Result<Vec<InstrumentedFunction>, InstrumentError> {
    let mut arity: BTreeMap<&str, usize> = BTreeMap::new();
    for f in &ctx.program.functions {
        for s in &f.body {
            let Stmt::Call { callee, args } = s else {
                continue;
            };
            if ctx.by_name.contains_key(callee.as_str()) || !ctx.untrusted(callee) {
                continue;
            }
            let expected = *arity.entry(callee).or_insert(args.len());
            if expected != args.len() {
                return Err(InstrumentError::Arity {
                    function: f.name.clone(),
                    callee: callee.clone(),
                    expected,
                    found: args.len(),
                });
            }
        }
    }
    Ok(arity
        .into_iter()
        .map(|(name, n)| InstrumentedFunction {
            name: name.to_string(),
            sensitivity: Sensitivity::None,
            trust: Trust::Untrusted,
            external: true,
            params: (0..n).map(|i| VarDesc::pointer(format!("a{i}"))).collect(),
            locals: Vec::new(),
            body: Vec::new(),
        })
        .collect())
}

fn check_function(
    ctx: &Ctx<'_>,
    f: &FunctionDesc,
    unresolved: &mut BTreeSet<String>,
) -> Result<(), InstrumentError> {
    let untrusted = ctx.untrusted(&f.name);
    let sensitivity = ctx.sensitivity(f);
    if untrusted && sensitivity != Sensitivity::None {
        return Err(InstrumentError::SensitiveAndUntrusted(f.name.clone()));
    }
    if f.external && !untrusted {
        // its body is written in untrusted terms; report it with the rest
        unresolved.insert(f.name.clone());
        return Ok(());
    }
    if let Some(Some(arity)) = ctx.lists.untrusted.get(&f.name) {
        if *arity != f.params.len() {
            return Err(InstrumentError::Arity {
                function: f.name.clone(),
                callee: f.name.clone(),
                expected: *arity,
                found: f.params.len(),
            });
        }
    }

    let mut seen = BTreeSet::new();
    for v in f.vars() {
        if !seen.insert(v.name.as_str()) {
            return Err(InstrumentError::DuplicateVariable {
                function: f.name.clone(),
                var: v.name.clone(),
            });
        }
        let annotation_err = |message: &str| InstrumentError::Annotation {
            function: f.name.clone(),
            var: v.name.clone(),
            message: message.to_string(),
        };
        if v.size == 0 {
            return Err(annotation_err("variables need a non-zero size"));
        }
        let Some(a) = &v.annotation else { continue };
        if untrusted {
            return Err(annotation_err(
                "untrusted functions cannot carry variable annotations",
            ));
        }
        if sensitivity == Sensitivity::None {
            return Err(annotation_err(
                "variable annotations are only allowed in sensitive functions",
            ));
        }
        if a.is_pointer() {
            if !v.pointer {
                return Err(annotation_err(&format!(
                    "`{a}` needs a pointer-typed variable"
                )));
            }
            let size = v.pointee().ok_or_else(|| InstrumentError::PointeeSize {
                function: f.name.clone(),
                var: v.name.clone(),
            })?;
            if size.resolve(&ctx.program.consts).is_none_or(|n| n == 0) {
                return Err(InstrumentError::PointeeSize {
                    function: f.name.clone(),
                    var: v.name.clone(),
                });
            }
        }
    }

    let stmt_err = |index: usize, message: String| InstrumentError::Statement {
        function: f.name.clone(),
        index,
        message,
    };
    let known = |name: &str| -> Result<&VarDesc, InstrumentError> {
        f.var(name).ok_or_else(|| InstrumentError::UnknownVariable {
            function: f.name.clone(),
            var: name.to_string(),
        })
    };
    let check_value = |index: usize, value: &Value| -> Result<(), InstrumentError> {
        if let Value::AddrOf(v) = value {
            known(v)?;
        }
        if let Value::Bytes(hex) = value {
            if hex::decode(hex).is_err() {
                return Err(InstrumentError::Statement {
                    function: f.name.clone(),
                    index,
                    message: format!("`{hex}` is not hex"),
                });
            }
        }
        Ok(())
    };
    if f.external
        && !f
            .body
            .iter()
            .all(|s| matches!(s, Stmt::Probe { .. } | Stmt::Call { .. } | Stmt::Return))
    {
        return Err(stmt_err(
            0,
            "external functions may only contain probes, calls and return".into(),
        ));
    }
    for (i, stmt) in f.body.iter().enumerate() {
        match stmt {
            Stmt::Vault { .. } => {
                return Err(InstrumentError::AlreadyInstrumented {
                    function: f.name.clone(),
                })
            }
            Stmt::Return if i + 1 != f.body.len() => {
                return Err(stmt_err(i, "return must be the last statement".into()));
            }
            Stmt::Return => {}
            Stmt::Probe { .. } if !untrusted => {
                return Err(stmt_err(
                    i,
                    "probes are only allowed in untrusted functions".into(),
                ));
            }
            Stmt::Probe { .. } => {}
            Stmt::Assign { var, value } => {
                known(var)?;
                check_value(i, value)?;
            }
            Stmt::HeapAlloc { ptr, size } => {
                if !known(ptr)?.pointer {
                    return Err(stmt_err(i, format!("heap_alloc into non-pointer `{ptr}`")));
                }
                ctx.resolve(f, size)?;
            }
            Stmt::Store { ptr, value } => {
                if !known(ptr)?.pointer {
                    return Err(stmt_err(i, format!("store through non-pointer `{ptr}`")));
                }
                check_value(i, value)?;
            }
            Stmt::Call { callee, args } => {
                if is_reserved(callee) {
                    return Err(InstrumentError::AlreadyInstrumented {
                        function: f.name.clone(),
                    });
                }
                for a in args {
                    if let Arg::Var(v) | Arg::AddrOf(v) = a {
                        known(v)?;
                    }
                }
                let described = ctx.by_name.get(callee.as_str());
                let callee_untrusted = ctx.untrusted(callee);
                match described {
                    Some(c) if c.external && !callee_untrusted => {
                        unresolved.insert(callee.clone());
                    }
                    None if !callee_untrusted => {
                        unresolved.insert(callee.clone());
                    }
                    _ => {}
                }
                let expected = match (described, ctx.lists.untrusted.get(callee)) {
                    (Some(c), _) => Some(c.params.len()),
                    (None, Some(arity)) => *arity,
                    (None, None) => None,
                };
                if let Some(expected) = expected {
                    if expected != args.len() {
                        return Err(InstrumentError::Arity {
                            function: f.name.clone(),
                            callee: callee.clone(),
                            expected,
                            found: args.len(),
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

fn vault(call: VaultCall, row: ApiRow, subject: &str) -> Stmt {
    Stmt::Vault {
        call,
        provenance: Provenance::new(row, subject),
    }
}

fn instrument_function(
    ctx: &Ctx<'_>,
    f: &FunctionDesc,
    no_ops: &mut Vec<NoOp>,
    warnings: &mut Vec<String>,
) -> Result<InstrumentedFunction, InstrumentError> {
    let untrusted = ctx.untrusted(&f.name);
    let sensitivity = ctx.sensitivity(f);
    let mut out = InstrumentedFunction {
        name: f.name.clone(),
        sensitivity,
        trust: if untrusted {
            Trust::Untrusted
        } else {
            Trust::Trusted
        },
        external: f.external,
        params: f.params.clone(),
        locals: f.locals.clone(),
        body: Vec::new(),
    };
    if untrusted {
        out.body = f.body.clone();
        return Ok(out);
    }
    let mut no_op = |subject: &str, row: ApiRow, reason: &str| {
        no_ops.push(NoOp {
            function: f.name.clone(),
            subject: subject.to_string(),
            row,
            reason: reason.to_string(),
        })
    };

    let all = sensitivity == Sensitivity::Whole;
    let frame_row = if all {
        ApiRow::SensitiveFunction
    } else {
        ApiRow::FinegrainedFunction
    };

    // locals whose address reaches untrusted code
    let mut exposed = BTreeSet::new();
    for s in &f.body {
        if let Stmt::Call { callee, args } = s {
            if ctx.untrusted(callee) {
                for a in args {
                    if let Arg::AddrOf(v) = a {
                        exposed.insert(v.as_str());
                    }
                }
            }
        }
    }

    if sensitivity != Sensitivity::None {
        out.body
            .push(vault(VaultCall::RegisterStack { all }, frame_row, &f.name));
        for v in f.vars() {
            let Some(a) = &v.annotation else { continue };
            if exposed.contains(v.name.as_str()) {
                if a.slot_class() != SlotClass::NotSensitive {
                    warnings.push(format!(
                        "{}.{}: address passed to untrusted code, `{a}` treated as not_sensitive",
                        f.name, v.name
                    ));
                }
                continue;
            }
            let len = SizeExpr::Bytes(v.size);
            let target = MemTarget::AddrOf(v.name.clone());
            match (a.slot_class(), all) {
                (SlotClass::Sensitive, false) => out.body.push(vault(
                    VaultCall::RegisterMemory {
                        target,
                        len,
                        read_only: false,
                    },
                    ApiRow::SensitiveVar,
                    &v.name,
                )),
                (SlotClass::Sensitive, true) => no_op(
                    &v.name,
                    ApiRow::SensitiveVar,
                    "whole frame already protected",
                ),
                (SlotClass::NotSensitive, true) => out.body.push(vault(
                    VaultCall::RegisterMemoryException {
                        target,
                        len,
                        read_only: false,
                    },
                    ApiRow::NotSensitiveVar,
                    &v.name,
                )),
                (SlotClass::NotSensitive, false) => no_op(
                    &v.name,
                    ApiRow::NotSensitiveVar,
                    "unregistered bytes stay visible in finegrained frames",
                ),
                (SlotClass::WriteSensitive, false) => out.body.push(vault(
                    VaultCall::RegisterMemory {
                        target,
                        len,
                        read_only: true,
                    },
                    ApiRow::WriteSensitiveFinegrained,
                    &v.name,
                )),
                (SlotClass::WriteSensitive, true) => out.body.push(vault(
                    VaultCall::RegisterMemoryException {
                        target,
                        len,
                        read_only: true,
                    },
                    ApiRow::WriteSensitiveWhole,
                    &v.name,
                )),
            }
        }
    }

    let pointee_row = |v: &VarDesc| match v.annotation {
        Some(VarAnnotation::SensitivePointer(_)) => Some((ApiRow::SensitivePointerPointee, false)),
        Some(VarAnnotation::WriteSensitivePointer(_)) => {
            Some((ApiRow::WriteSensitivePointerPointee, true))
        }
        _ => None,
    };
    let mut pointee_done = BTreeSet::new();
    let mut excepted = BTreeSet::new();
    for stmt in &f.body {
        match stmt {
            Stmt::Return => {
                if sensitivity != Sensitivity::None {
                    out.body
                        .push(vault(VaultCall::UnregisterStack, frame_row, &f.name));
                }
                out.body.push(Stmt::Return);
            }
            Stmt::Call { callee, args } if ctx.untrusted(callee) => {
                for a in args {
                    let Arg::AddrOf(v) = a else { continue };
                    if sensitivity == Sensitivity::None || !excepted.insert(v.clone()) {
                        continue;
                    }
                    if all {
                        let size = f.var(v).expect("checked").size;
                        out.body.push(vault(
                            VaultCall::RegisterMemoryException {
                                target: MemTarget::AddrOf(v.clone()),
                                len: SizeExpr::Bytes(size),
                                read_only: false,
                            },
                            ApiRow::NotSensitiveVar,
                            v,
                        ));
                    } else {
                        no_op(
                            v,
                            ApiRow::NotSensitiveVar,
                            "address passed to untrusted code; finegrained frame leaves it visible",
                        );
                    }
                }
                out.body.push(vault(
                    VaultCall::StartProtect,
                    ApiRow::UntrustedCall,
                    callee,
                ));
                out.body.push(stmt.clone());
                out.body
                    .push(vault(VaultCall::StopProtect, ApiRow::UntrustedCall, callee));
            }
            Stmt::Assign { var, .. } | Stmt::HeapAlloc { ptr: var, .. } => {
                out.body.push(stmt.clone());
                let v = f.var(var).expect("checked");
                if let Some((row, read_only)) = pointee_row(v) {
                    let len = v.pointee().expect("checked").clone();
                    out.body.push(vault(
                        VaultCall::RegisterMemory {
                            target: MemTarget::Pointee(v.name.clone()),
                            len,
                            read_only,
                        },
                        row,
                        &v.name,
                    ));
                    pointee_done.insert(v.name.clone());
                }
            }
            _ => out.body.push(stmt.clone()),
        }
    }
    if sensitivity != Sensitivity::None && !matches!(f.body.last(), Some(Stmt::Return)) {
        out.body
            .push(vault(VaultCall::UnregisterStack, frame_row, &f.name));
    }
    for v in f.vars() {
        if let Some((row, _)) = pointee_row(v) {
            if !pointee_done.contains(&v.name) {
                no_op(&v.name, row, "pointer never assigned");
            }
        }
    }
    Ok(out)
}
