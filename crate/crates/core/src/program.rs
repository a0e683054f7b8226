//! Annotated program descriptions and the UntrustedList / SensitiveList
//! files.
//!
//! A program is a JSON document:
//!
//! ```json
//! {
//!   "consts": { "len": 64 },
//!   "functions": [
//!     {
//!       "name": "pwdgenerator",
//!       "annotation": "sensitive",
//!       "locals": [
//!         { "name": "passwd", "size": 256 },
//!         { "name": "id", "size": 8, "pointer": true, "annotation": "sensitive_pointer_len" },
//!         { "name": "age", "size": 4, "annotation": "not_sensitive" }
//!       ],
//!       "body": [
//!         { "op": "heap_alloc", "ptr": "id", "size": "len" },
//!         { "op": "call", "callee": "lib_func", "args": [{ "addr_of": "age" }] },
//!         { "op": "return" }
//!       ]
//!     }
//!   ]
//! }
//! ```
//!
//! Function annotations: `sensitive`, `sensitive_finegrained`. Variable
//! annotations: `sensitive`, `not_sensitive`, `write_sensitive`,
//! `sensitive_pointer[_x]`, `write_sensitive_pointer[_x]` where `x` is a byte
//! count or the name of an entry in `consts`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Program {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub consts: BTreeMap<String, u64>,
    #[serde(default)]
    pub functions: Vec<FunctionDesc>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionDesc {
    pub name: String,
    /// Inline sensitivity directive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<FnAnnotation>,
    /// Library code with no trusted body; must be on the UntrustedList.
    #[serde(default, skip_serializing_if = "is_false")]
    pub external: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub params: Vec<VarDesc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub locals: Vec<VarDesc>,
    #[serde(default)]
    pub body: Vec<Stmt>,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl FunctionDesc {
    pub fn new(name: impl Into<String>) -> Self {
        FunctionDesc {
            name: name.into(),
            annotation: None,
            external: false,
            params: Vec::new(),
            locals: Vec::new(),
            body: Vec::new(),
        }
    }

    /// Parameters then locals, in frame layout order.
    pub fn vars(&self) -> impl Iterator<Item = &VarDesc> {
        self.params.iter().chain(&self.locals)
    }

    pub fn var(&self, name: &str) -> Option<&VarDesc> {
        self.vars().find(|v| v.name == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FnAnnotation {
    Sensitive,
    SensitiveFinegrained,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarDesc {
    pub name: String,
    pub size: u64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub pointer: bool,
    /// Size of the object the pointer refers to, when the annotation does
    /// not carry one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointee_size: Option<SizeExpr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<VarAnnotation>,
}

impl VarDesc {
    pub fn new(name: impl Into<String>, size: u64) -> Self {
        VarDesc {
            name: name.into(),
            size,
            pointer: false,
            pointee_size: None,
            annotation: None,
        }
    }

    pub fn pointer(name: impl Into<String>) -> Self {
        VarDesc {
            pointer: true,
            ..VarDesc::new(name, 8)
        }
    }

    pub fn annotated(mut self, annotation: VarAnnotation) -> Self {
        self.annotation = Some(annotation);
        self
    }

    /// Pointee size from the annotation suffix, else from `pointee_size`.
    pub fn pointee(&self) -> Option<&SizeExpr> {
        match &self.annotation {
            Some(
                VarAnnotation::SensitivePointer(Some(s))
                | VarAnnotation::WriteSensitivePointer(Some(s)),
            ) => Some(s),
            _ => self.pointee_size.as_ref(),
        }
    }
}

/// Byte count, literal or named.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SizeExpr {
    Bytes(u64),
    Const(String),
}

impl SizeExpr {
    pub fn resolve(&self, consts: &BTreeMap<String, u64>) -> Option<u64> {
        match self {
            SizeExpr::Bytes(n) => Some(*n),
            SizeExpr::Const(name) => consts.get(name).copied(),
        }
    }
}

impl fmt::Display for SizeExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SizeExpr::Bytes(n) => write!(f, "{n}"),
            SizeExpr::Const(name) => f.write_str(name),
        }
    }
}

impl From<u64> for SizeExpr {
    fn from(n: u64) -> Self {
        SizeExpr::Bytes(n)
    }
}

impl From<&str> for SizeExpr {
    fn from(s: &str) -> Self {
        match s.parse() {
            Ok(n) => SizeExpr::Bytes(n),
            Err(_) => SizeExpr::Const(s.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum VarAnnotation {
    Sensitive,
    NotSensitive,
    WriteSensitive,
    SensitivePointer(Option<SizeExpr>),
    WriteSensitivePointer(Option<SizeExpr>),
}

impl VarAnnotation {
    pub fn is_pointer(&self) -> bool {
        matches!(
            self,
            VarAnnotation::SensitivePointer(_) | VarAnnotation::WriteSensitivePointer(_)
        )
    }

    /// How the variable's own stack slot is handled.
    pub fn slot_class(&self) -> SlotClass {
        match self {
            VarAnnotation::Sensitive | VarAnnotation::SensitivePointer(_) => SlotClass::Sensitive,
            VarAnnotation::NotSensitive => SlotClass::NotSensitive,
            VarAnnotation::WriteSensitive | VarAnnotation::WriteSensitivePointer(_) => {
                SlotClass::WriteSensitive
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotClass {
    Sensitive,
    NotSensitive,
    WriteSensitive,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown annotation `{0}`")]
pub struct AnnotationParseError(pub String);

impl FromStr for VarAnnotation {
    type Err = AnnotationParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let sized = |rest: &str| -> Result<Option<SizeExpr>, AnnotationParseError> {
            if rest.is_empty() {
                return Ok(None);
            }
            match rest.strip_prefix('_') {
                Some(x) if !x.is_empty() => Ok(Some(SizeExpr::from(x))),
                _ => Err(AnnotationParseError(s.to_string())),
            }
        };
        match s {
            "sensitive" => Ok(VarAnnotation::Sensitive),
            "not_sensitive" => Ok(VarAnnotation::NotSensitive),
            "write_sensitive" => Ok(VarAnnotation::WriteSensitive),
            _ => {
                if let Some(rest) = s.strip_prefix("write_sensitive_pointer") {
                    sized(rest).map(VarAnnotation::WriteSensitivePointer)
                } else if let Some(rest) = s.strip_prefix("sensitive_pointer") {
                    sized(rest).map(VarAnnotation::SensitivePointer)
                } else {
                    Err(AnnotationParseError(s.to_string()))
                }
            }
        }
    }
}

impl TryFrom<String> for VarAnnotation {
    type Error = AnnotationParseError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl fmt::Display for VarAnnotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (base, size) = match self {
            VarAnnotation::Sensitive => ("sensitive", None),
            VarAnnotation::NotSensitive => ("not_sensitive", None),
            VarAnnotation::WriteSensitive => ("write_sensitive", None),
            VarAnnotation::SensitivePointer(s) => ("sensitive_pointer", s.as_ref()),
            VarAnnotation::WriteSensitivePointer(s) => ("write_sensitive_pointer", s.as_ref()),
        };
        match size {
            Some(s) => write!(f, "{base}_{s}"),
            None => f.write_str(base),
        }
    }
}

impl From<VarAnnotation> for String {
    fn from(a: VarAnnotation) -> String {
        a.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Stmt {
    Assign {
        var: String,
        value: Value,
    },
    HeapAlloc {
        ptr: String,
        size: SizeExpr,
    },
    /// Write through a pointer variable into the object it refers to.
    Store {
        ptr: String,
        value: Value,
    },
    Call {
        callee: String,
        #[serde(default)]
        args: Vec<Arg>,
    },
    Probe {
        probe: Probe,
    },
    Return,
    /// Runtime call inserted by the instrumenter.
    Vault {
        call: VaultCall,
        provenance: Provenance,
    },
}

impl Stmt {
    pub fn call(callee: &str, args: Vec<Arg>) -> Stmt {
        Stmt::Call {
            callee: callee.to_string(),
            args,
        }
    }

    pub fn assign(var: &str, value: Value) -> Stmt {
        Stmt::Assign {
            var: var.to_string(),
            value,
        }
    }

    pub fn heap_alloc(ptr: &str, size: impl Into<SizeExpr>) -> Stmt {
        Stmt::HeapAlloc {
            ptr: ptr.to_string(),
            size: size.into(),
        }
    }

    pub fn probe(probe: Probe) -> Stmt {
        Stmt::Probe { probe }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Value {
    /// Repeat one byte over the whole destination.
    Fill(u8),
    Repeat {
        byte: u8,
        len: u64,
    },
    /// Hex-encoded bytes.
    Bytes(String),
    Text(String),
    /// Little-endian integer, truncated to the destination size.
    U64(u64),
    AddrOf(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arg {
    Var(String),
    AddrOf(String),
    Const(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Probe {
    Read {
        target: Target,
        len: u64,
    },
    Write {
        target: Target,
        value: Value,
    },
    /// Runtime call issued directly by untrusted code.
    Forge {
        call: VaultCall,
    },
}

/// Address computed at run time inside the executing function.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Target {
    Abs(u64),
    /// Pointer value held in parameter `index`, plus `offset`.
    Arg {
        index: usize,
        #[serde(default)]
        offset: i64,
    },
    /// Own frame base plus `offset`; positive offsets reach into callers.
    Frame {
        offset: i64,
    },
    Var {
        name: String,
        #[serde(default)]
        offset: i64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemTarget {
    AddrOf(String),
    /// The object a pointer variable refers to.
    Pointee(String),
    At(Target),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "syscall", rename_all = "snake_case", deny_unknown_fields)]
pub enum VaultCall {
    RegisterStack {
        all: bool,
    },
    UnregisterStack,
    RegisterMemory {
        target: MemTarget,
        len: SizeExpr,
        read_only: bool,
    },
    RegisterMemoryException {
        target: MemTarget,
        len: SizeExpr,
        read_only: bool,
    },
    StartProtect,
    StopProtect,
}

impl VaultCall {
    pub fn syscall(&self) -> crate::vault::Syscall {
        use crate::vault::Syscall;
        match self {
            VaultCall::RegisterStack { .. } => Syscall::RegisterStack,
            VaultCall::UnregisterStack => Syscall::UnregisterStack,
            VaultCall::RegisterMemory { .. } => Syscall::RegisterMemory,
            VaultCall::RegisterMemoryException { .. } => Syscall::RegisterMemoryException,
            VaultCall::StartProtect => Syscall::StartProtect,
            VaultCall::StopProtect => Syscall::StopProtect,
        }
    }
}

impl fmt::Display for VaultCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let target = |t: &MemTarget| match t {
            MemTarget::AddrOf(v) => format!("&{v}"),
            MemTarget::Pointee(v) => v.clone(),
            MemTarget::At(t) => format!("{t:?}"),
        };
        let flag = |b: bool| if b { "True" } else { "False" };
        match self {
            VaultCall::RegisterStack { all } => write!(f, "register_stack(all={})", flag(*all)),
            VaultCall::UnregisterStack => f.write_str("unregister_stack()"),
            VaultCall::RegisterMemory {
                target: t,
                len,
                read_only,
            } => write!(
                f,
                "register_memory({}, {len}, {})",
                target(t),
                flag(*read_only)
            ),
            VaultCall::RegisterMemoryException {
                target: t,
                len,
                read_only,
            } => write!(
                f,
                "register_memory_exception({}, {len}, {})",
                target(t),
                flag(*read_only)
            ),
            VaultCall::StartProtect => f.write_str("start_protect()"),
            VaultCall::StopProtect => f.write_str("stop_protect()"),
        }
    }
}

/// Rows of the API-to-runtime-call mapping, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiRow {
    UntrustedCall,
    SensitiveFunction,
    FinegrainedFunction,
    SensitiveVar,
    NotSensitiveVar,
    WriteSensitiveFinegrained,
    WriteSensitiveWhole,
    SensitivePointerPointee,
    WriteSensitivePointerPointee,
}

impl ApiRow {
    pub const ALL: [ApiRow; 9] = [
        ApiRow::UntrustedCall,
        ApiRow::SensitiveFunction,
        ApiRow::FinegrainedFunction,
        ApiRow::SensitiveVar,
        ApiRow::NotSensitiveVar,
        ApiRow::WriteSensitiveFinegrained,
        ApiRow::WriteSensitiveWhole,
        ApiRow::SensitivePointerPointee,
        ApiRow::WriteSensitivePointerPointee,
    ];

    /// 1-based row number.
    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn describe(self) -> &'static str {
        match self {
            ApiRow::UntrustedCall => "untrusted function: start/stop_protect before and after call",
            ApiRow::SensitiveFunction => "sensitive function: register/unregister_stack(all=True)",
            ApiRow::FinegrainedFunction => {
                "finegrained function: register/unregister_stack(all=False)"
            }
            ApiRow::SensitiveVar => {
                "sensitive var: register_memory(readOnly=False), all=False only"
            }
            ApiRow::NotSensitiveVar => {
                "not-sensitive var: register_memory_exception(readOnly=False), all=True only"
            }
            ApiRow::WriteSensitiveFinegrained => {
                "write-sensitive var: register_memory(readOnly=True), all=False only"
            }
            ApiRow::WriteSensitiveWhole => {
                "write-sensitive var: register_memory_exception(readOnly=True), all=True only"
            }
            ApiRow::SensitivePointerPointee => {
                "sensitive pointer: register_memory(readOnly=False) for pointee"
            }
            ApiRow::WriteSensitivePointerPointee => {
                "write-sensitive pointer: register_memory(readOnly=True) for pointee"
            }
        }
    }
}

impl fmt::Display for ApiRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row {}", self.number())
    }
}

/// Which mapping row produced an inserted call, and for what.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub row: ApiRow,
    /// Function, variable or callee the call was inserted for.
    pub subject: String,
}

impl Provenance {
    pub fn new(row: ApiRow, subject: impl Into<String>) -> Self {
        Provenance {
            row,
            subject: subject.into(),
        }
    }
}

pub fn parse_program(source: &str) -> Result<Program, serde_json::Error> {
    serde_json::from_str(source)
}

pub fn emit_program(program: &Program) -> String {
    let mut out = serde_json::to_string_pretty(program).expect("program serializes");
    out.push('\n');
    out
}

// ---------------------------------------------------------------------------
// UntrustedList / SensitiveList

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ListKind {
    Untrusted,
    Sensitive,
}

impl fmt::Display for ListKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ListKind::Untrusted => "UntrustedList",
            ListKind::Sensitive => "SensitiveList",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ListError {
    #[error("{list}:{line}: {message}")]
    Parse {
        list: ListKind,
        line: usize,
        message: String,
    },
    #[error("`{0}` is on both lists; a function cannot be both sensitive and untrusted")]
    Conflict(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lists {
    /// Untrusted prototypes: name and arity, if given.
    pub untrusted: BTreeMap<String, Option<usize>>,
    pub sensitive: BTreeSet<String>,
}

impl Lists {
    pub fn is_untrusted(&self, name: &str) -> bool {
        self.untrusted.contains_key(name)
    }
}

fn parse_entry(line: &str) -> Result<(String, Option<usize>), String> {
    let (name, arity) = match line.split_once('(') {
        Some((name, rest)) => {
            let inner = rest
                .strip_suffix(')')
                .ok_or_else(|| format!("missing `)` in `{line}`"))?
                .trim();
            let arity = if inner.is_empty() {
                0
            } else {
                inner
                    .parse()
                    .map_err(|_| format!("arity `{inner}` is not a number"))?
            };
            (name.trim(), Some(arity))
        }
        None => (line, None),
    };
    let valid = !name.is_empty()
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !name.starts_with(|c: char| c.is_ascii_digit());
    if !valid {
        return Err(format!("`{name}` is not a function name"));
    }
    Ok((name.to_string(), arity))
}

fn parse_list(kind: ListKind, doc: &str) -> Result<Vec<(String, Option<usize>)>, ListError> {
    let mut out = Vec::new();
    for (i, raw) in doc.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let entry = parse_entry(line).map_err(|message| ListError::Parse {
            list: kind,
            line: i + 1,
            message,
        })?;
        out.push(entry);
    }
    Ok(out)
}

pub fn parse_lists(untrusted_doc: &str, sensitive_doc: &str) -> Result<Lists, ListError> {
    let mut lists = Lists::default();
    for (name, arity) in parse_list(ListKind::Untrusted, untrusted_doc)? {
        lists.untrusted.insert(name, arity);
    }
    for (name, _) in parse_list(ListKind::Sensitive, sensitive_doc)? {
        if lists.untrusted.contains_key(&name) {
            return Err(ListError::Conflict(name));
        }
        lists.sensitive.insert(name);
    }
    Ok(lists)
}
