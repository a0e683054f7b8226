//! Interprets instrumented programs over simulated memory and a kernel.
//!
//! Every runtime call is issued with a PC synthesized from the executing
//! function's text span, so the kernel derives the caller's identity the
//! same way it would from a real instruction pointer. Untrusted functions
//! run probe scripts; their reads are checked for leaks, and every balanced
//! `stop_protect` is checked for integrity against the executor's own
//! snapshot of the window, independent of the kernel's save storage.

mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

pub use report::{
    describe, stats_table, ExecutionReport, Fault, FaultKind, Mode, Observation, ProbeKind,
    Violation, WindowRecord, REPORT_HEADER,
};

use crate::identity::{FunctionId, IdentityTable};
use crate::instrument::{InstrumentedFunction, InstrumentedProgram, Sensitivity};
use crate::memory::{Address, ProcessMemory, StackFrame};
use crate::oracle::WindowBytes;
use crate::program::{Arg, MemTarget, Probe, SizeExpr, Stmt, Target, Value, VaultCall};
use crate::vault::{Kernel, RegisterEntry, SyscallStats, VaultException, VaultState};

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Stop at the first kernel exception.
    pub strict: bool,
    pub max_call_depth: usize,
    pub max_steps: u64,
    /// Keep probe observations in the report.
    pub record_observations: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            strict: false,
            max_call_depth: 256,
            max_steps: 1_000_000,
            record_observations: true,
        }
    }
}

/// Identity table with one span per described function, sized so every
/// statement gets its own PC.
pub fn synthesize_identity(program: &InstrumentedProgram) -> Arc<IdentityTable> {
    let spans = program
        .functions
        .iter()
        .map(|f| (f.name.as_str(), f.body.len() as u64 + 1));
    Arc::new(IdentityTable::synthesize(spans).expect("synthesized spans are disjoint"))
}

pub struct Outcome<K> {
    pub report: ExecutionReport,
    pub memory: ProcessMemory,
    pub kernel: K,
}

/// Runs `entry` with the kernel enforcing protection.
pub fn run<K: Kernel>(
    program: &InstrumentedProgram,
    identity: Arc<IdentityTable>,
    kernel: K,
    entry: &str,
    options: &RunOptions,
) -> Outcome<K> {
    Executor::new(program, identity, kernel, Mode::Protected, options).run(entry)
}

/// Runs `entry` with no kernel calls at all. Inserted calls only update the
/// executor's record of what would have been protected, so reads of data
/// that protection would have hidden are counted.
pub fn run_native(
    program: &InstrumentedProgram,
    identity: Arc<IdentityTable>,
    entry: &str,
    options: &RunOptions,
) -> Outcome<VaultState> {
    let kernel = VaultState::new(identity.clone());
    Executor::new(program, identity, kernel, Mode::Native, options).run(entry)
}

struct Activation {
    func: usize,
    id: FunctionId,
    frame: StackFrame,
    vars: BTreeMap<String, (Address, u64)>,
}

struct Window {
    id: usize,
    end: usize,
    opened_by: String,
    bytes: WindowBytes,
    snapshot: BTreeMap<u64, u8>,
    dirty: BTreeSet<u64>,
}

enum Flow {
    Next,
    Return,
    Halt,
}

struct Executor<'a, K> {
    program: &'a InstrumentedProgram,
    identity: Arc<IdentityTable>,
    by_name: BTreeMap<&'a str, usize>,
    kernel: K,
    mode: Mode,
    options: RunOptions,
    mem: ProcessMemory,
    stack: Vec<Activation>,
    entries: Vec<RegisterEntry>,
    windows: Vec<Window>,
    next_window: usize,
    steps: u64,
    pending_args: Option<Vec<Vec<u8>>>,
    report: ExecutionReport,
}

impl<'a, K: Kernel> Executor<'a, K> {
    fn new(
        program: &'a InstrumentedProgram,
        identity: Arc<IdentityTable>,
        kernel: K,
        mode: Mode,
        options: &RunOptions,
    ) -> Self {
        let by_name = program
            .functions
            .iter()
            .enumerate()
            .map(|(i, f)| (f.name.as_str(), i))
            .collect();
        Executor {
            program,
            identity,
            by_name,
            kernel,
            mode,
            options: options.clone(),
            mem: ProcessMemory::new(),
            stack: Vec::new(),
            entries: Vec::new(),
            windows: Vec::new(),
            next_window: 1,
            steps: 0,
            pending_args: None,
            report: ExecutionReport {
                mode,
                entry: String::new(),
                violations: Vec::new(),
                observations: Vec::new(),
                faults: Vec::new(),
                notes: Vec::new(),
                stats: SyscallStats::default(),
                provenance: BTreeMap::new(),
                windows: Vec::new(),
                max_nesting: 0,
                secret_bytes_observed: 0,
                forged_calls: 0,
                forged_rejected: 0,
                halted: None,
                memory_digest: String::new(),
            },
        }
    }

    fn run(mut self, entry: &str) -> Outcome<K> {
        self.report.entry = entry.to_string();
        match self.by_name.get(entry) {
            Some(&idx) => {
                self.call(idx, Vec::new(), None);
            }
            None => self.fault(
                FaultKind::Structural,
                entry,
                0,
                format!("entry function `{entry}` is not described"),
            ),
        }
        if self.report.halted.is_none() && !self.windows.is_empty() {
            self.report.notes.push(format!(
                "{} protection window(s) still open at exit",
                self.windows.len()
            ));
        }
        self.report.stats = match self.mode {
            Mode::Protected => self.kernel.stats().clone(),
            Mode::Native => SyscallStats::default(),
        };
        self.report.memory_digest = self.mem.digest();
        Outcome {
            report: self.report,
            memory: self.mem,
            kernel: self.kernel,
        }
    }

    fn func(&self, idx: usize) -> &'a InstrumentedFunction {
        &self.program.functions[idx]
    }

    fn current(&self) -> &Activation {
        self.stack.last().expect("inside a function")
    }

    fn current_name(&self) -> &'a str {
        &self.func(self.current().func).name
    }

    fn fault(&mut self, kind: FaultKind, function: &str, stmt: usize, message: String) {
        self.report.faults.push(Fault {
            kind,
            function: function.to_string(),
            stmt,
            message,
        });
    }

    /// PC for statement `stmt` of the running function: span start plus the
    /// statement index, clamped to the span.
    fn pc(&self, stmt: usize) -> Address {
        let span = self
            .identity
            .span(self.current().id)
            .expect("activation has a span");
        span.lo.add((stmt as u64).min(span.len() - 1))
    }

    /// Calls function `idx`; `caller` is (function name, statement) for
    /// fault reporting.
    fn call(&mut self, idx: usize, args: Vec<Vec<u8>>, caller: Option<(&str, usize)>) -> Flow {
        let f = self.func(idx);
        let (cname, cstmt) = caller.unwrap_or((&f.name, 0));
        let Some(id) = self.identity.id_of(&f.name) else {
            self.fault(
                FaultKind::Structural,
                cname,
                cstmt,
                format!("`{}` has no text span", f.name),
            );
            return Flow::Next;
        };
        if self.stack.len() >= self.options.max_call_depth {
            self.fault(
                FaultKind::Structural,
                cname,
                cstmt,
                "call depth limit reached".into(),
            );
            self.report.halted = Some("call depth limit reached".into());
            return Flow::Halt;
        }
        let frame = match self.mem.push_frame(id, f.frame_size()) {
            Ok(frame) => frame,
            Err(e) => {
                self.fault(
                    FaultKind::Structural,
                    cname,
                    cstmt,
                    format!("calling `{}`: {e}", f.name),
                );
                self.report.halted = Some(e.to_string());
                return Flow::Halt;
            }
        };
        let mut vars = BTreeMap::new();
        let mut cursor = frame.base.sub(crate::memory::FRAME_METADATA);
        for v in f.vars() {
            cursor = cursor.sub(v.size);
            vars.insert(v.name.clone(), (cursor, v.size));
        }
        for (param, mut bytes) in f.params.iter().zip(args) {
            bytes.resize(param.size as usize, 0);
            let addr = vars[&param.name].0;
            self.write(addr, &bytes)
                .expect("parameter slots are in the new frame");
        }
        self.stack.push(Activation {
            func: idx,
            id,
            frame,
            vars,
        });

        let mut flow = Flow::Next;
        for (i, stmt) in f.body.iter().enumerate() {
            self.steps += 1;
            if self.steps > self.options.max_steps {
                self.fault(
                    FaultKind::Structural,
                    &f.name,
                    i,
                    "step limit reached".into(),
                );
                self.report.halted = Some("step limit reached".into());
                flow = Flow::Halt;
                break;
            }
            match self.exec(i, stmt) {
                Flow::Next => {}
                Flow::Return => break,
                Flow::Halt => {
                    flow = Flow::Halt;
                    break;
                }
            }
        }
        self.stack.pop();
        self.mem.pop_frame().expect("frame pushed above");
        match flow {
            Flow::Halt => Flow::Halt,
            _ => Flow::Next,
        }
    }

    fn exec(&mut self, i: usize, stmt: &'a Stmt) -> Flow {
        let fname = self.current_name();
        let result: Result<Flow, String> = match stmt {
            Stmt::Return => return Flow::Return,
            Stmt::Assign { var, value } => (|| {
                let (addr, size) = self.var(var)?;
                let bytes = self.value_bytes(value, Some(size))?;
                self.write(addr, &bytes).map_err(|e| e.to_string())?;
                Ok(Flow::Next)
            })(),
            Stmt::HeapAlloc { ptr, size } => (|| {
                let (addr, _) = self.var(ptr)?;
                let len = self.size(size)?;
                let obj = self.mem.alloc(len).map_err(|e| e.to_string())?;
                self.write(addr, &obj.base.0.to_le_bytes())
                    .map_err(|e| e.to_string())?;
                Ok(Flow::Next)
            })(),
            Stmt::Store { ptr, value } => (|| {
                let target = self.read_u64_var(ptr)?;
                let size = self.pointee_size(ptr, target)?;
                let bytes = self.value_bytes(value, Some(size))?;
                self.write(Address(target), &bytes)
                    .map_err(|e| e.to_string())?;
                Ok(Flow::Next)
            })(),
            Stmt::Call { callee, args } => {
                let args = match self.pending_args.take() {
                    Some(args) => Ok(args),
                    None => self.eval_args(args),
                };
                match args {
                    Ok(args) => Ok(self.call_named(callee, args, i)),
                    Err(e) => Err(e),
                }
            }
            Stmt::Vault { call, provenance } => {
                *self.report.provenance.entry(provenance.row).or_default() += 1;
                if matches!(call, VaultCall::StartProtect) {
                    let f = self.func(self.current().func);
                    if let Some(Stmt::Call { args, .. }) = f.body.get(i + 1) {
                        // argument set-up happens before protection starts
                        match self.eval_args(args) {
                            Ok(a) => self.pending_args = Some(a),
                            Err(e) => {
                                self.fault(FaultKind::Structural, fname, i + 1, e);
                                self.pending_args = Some(Vec::new());
                            }
                        }
                    }
                }
                Ok(self.vault(i, call, false))
            }
            Stmt::Probe { probe } => {
                if !self.func(self.current().func).is_untrusted() {
                    Err("probe in trusted function".to_string())
                } else {
                    return self.probe(i, probe);
                }
            }
        };
        match result {
            Ok(flow) => flow,
            Err(message) => {
                self.fault(FaultKind::Structural, fname, i, message);
                Flow::Next
            }
        }
    }

    fn call_named(&mut self, callee: &str, args: Vec<Vec<u8>>, i: usize) -> Flow {
        let caller = self.current_name();
        let Some(&idx) = self.by_name.get(callee) else {
            self.fault(
                FaultKind::Structural,
                caller,
                i,
                format!("call to `{callee}`, which has no description"),
            );
            return Flow::Next;
        };
        let callee_fn = self.func(idx);
        if self.func(self.current().func).is_untrusted()
            && callee_fn.sensitivity != Sensitivity::None
        {
            self.report
                .notes
                .push(format!("untrusted `{caller}` calls sensitive `{callee}`"));
        }
        self.call(idx, args, Some((caller, i)))
    }

    fn var(&self, name: &str) -> Result<(Address, u64), String> {
        self.current()
            .vars
            .get(name)
            .copied()
            .ok_or_else(|| format!("unknown variable `{name}`"))
    }

    fn size(&self, size: &SizeExpr) -> Result<u64, String> {
        size.resolve(&self.program.consts)
            .ok_or_else(|| format!("unknown constant `{size}`"))
    }

    fn read_u64_var(&self, name: &str) -> Result<u64, String> {
        let (addr, size) = self.var(name)?;
        let mut bytes = self
            .mem
            .read_bytes(addr, size.min(8))
            .map_err(|e| e.to_string())?;
        bytes.resize(8, 0);
        Ok(u64::from_le_bytes(bytes.try_into().expect("8 bytes")))
    }

    /// Bytes from `target` to the end of its heap object, else the declared
    /// pointee size.
    fn pointee_size(&self, ptr: &str, target: u64) -> Result<u64, String> {
        if let Some(obj) = self
            .mem
            .heap_objects()
            .iter()
            .find(|o| target >= o.base.0 && target < o.base.0 + o.len)
        {
            return Ok(obj.base.0 + obj.len - target);
        }
        let f = self.func(self.current().func);
        match f.var(ptr).and_then(|v| v.pointee()) {
            Some(s) => self.size(s),
            None => Err(format!("size of the object `{ptr}` points to is unknown")),
        }
    }

    fn value_bytes(&self, value: &Value, size: Option<u64>) -> Result<Vec<u8>, String> {
        let mut bytes = match value {
            Value::Fill(b) => {
                let n = size.ok_or("fill needs a sized destination")?;
                vec![*b; n as usize]
            }
            Value::Repeat { byte, len } => vec![*byte; *len as usize],
            Value::Bytes(h) => hex::decode(h).map_err(|e| format!("bad hex: {e}"))?,
            Value::Text(t) => t.as_bytes().to_vec(),
            Value::U64(n) => n.to_le_bytes().to_vec(),
            Value::AddrOf(v) => self.var(v)?.0 .0.to_le_bytes().to_vec(),
        };
        if let Some(n) = size {
            bytes.resize(n as usize, 0);
        }
        Ok(bytes)
    }

    fn eval_args(&self, args: &[Arg]) -> Result<Vec<Vec<u8>>, String> {
        args.iter()
            .map(|a| match a {
                Arg::Var(v) => {
                    let (addr, size) = self.var(v)?;
                    self.mem.read_bytes(addr, size).map_err(|e| e.to_string())
                }
                Arg::AddrOf(v) => Ok(self.var(v)?.0 .0.to_le_bytes().to_vec()),
                Arg::Const(c) => Ok(c.to_le_bytes().to_vec()),
            })
            .collect()
    }

    fn target(&self, target: &Target) -> Result<Address, String> {
        let act = self.current();
        match target {
            Target::Abs(a) => Ok(Address(*a)),
            Target::Arg { index, offset } => {
                let f = self.func(act.func);
                let p = f
                    .params
                    .get(*index)
                    .ok_or_else(|| format!("no parameter {index}"))?;
                Ok(Address(self.read_u64_var(&p.name)?).offset(*offset))
            }
            Target::Frame { offset } => Ok(act.frame.base.offset(*offset)),
            Target::Var { name, offset } => Ok(self.var(name)?.0.offset(*offset)),
        }
    }

    fn mem_target(&self, target: &MemTarget) -> Result<Address, String> {
        match target {
            MemTarget::AddrOf(v) => Ok(self.var(v)?.0),
            MemTarget::Pointee(v) => Ok(Address(self.read_u64_var(v)?)),
            MemTarget::At(t) => self.target(t),
        }
    }

    /// Every write goes through here so open windows can tell program
    /// writes from data the kernel failed to hide.
    fn write(&mut self, addr: Address, data: &[u8]) -> Result<(), crate::memory::MemoryError> {
        self.mem.write_bytes(addr, data)?;
        for w in &mut self.windows {
            w.dirty.extend(addr.0..addr.0 + data.len() as u64);
        }
        Ok(())
    }

    fn innermost_window(&self) -> Option<usize> {
        self.windows.last().map(|w| w.id)
    }

    fn probe(&mut self, i: usize, probe: &Probe) -> Flow {
        let fname = self.current_name();
        match probe {
            Probe::Read { target, len } => {
                let addr = match self.target(target) {
                    Ok(a) => a,
                    Err(e) => {
                        self.fault(FaultKind::Structural, fname, i, e);
                        return Flow::Next;
                    }
                };
                let bytes = match self.mem.read_bytes(addr, *len) {
                    Ok(b) => b,
                    Err(e) => {
                        self.fault(FaultKind::Probe, fname, i, e.to_string());
                        return Flow::Next;
                    }
                };
                self.check_leak(fname, addr, &bytes);
                if self.options.record_observations {
                    self.report.observations.push(Observation {
                        probe: ProbeKind::Read,
                        function: fname.to_string(),
                        addr,
                        len: *len,
                        window: self.innermost_window(),
                        bytes: hex::encode(&bytes),
                    });
                }
            }
            Probe::Write { target, value } => {
                let prepared = self
                    .target(target)
                    .and_then(|addr| Ok((addr, self.value_bytes(value, None)?)));
                let (addr, bytes) = match prepared {
                    Ok(p) => p,
                    Err(e) => {
                        self.fault(FaultKind::Structural, fname, i, e);
                        return Flow::Next;
                    }
                };
                if let Err(e) = self.write(addr, &bytes) {
                    self.fault(FaultKind::Probe, fname, i, e.to_string());
                    return Flow::Next;
                }
                if self.options.record_observations {
                    self.report.observations.push(Observation {
                        probe: ProbeKind::Write,
                        function: fname.to_string(),
                        addr,
                        len: bytes.len() as u64,
                        window: self.innermost_window(),
                        bytes: hex::encode(&bytes),
                    });
                }
            }
            Probe::Forge { call } => {
                if self.mode == Mode::Native {
                    return Flow::Next;
                }
                self.report.forged_calls += 1;
                return self.vault(i, call, true);
            }
        }
        Flow::Next
    }

    fn check_leak(&mut self, function: &str, addr: Address, bytes: &[u8]) {
        for w in &self.windows {
            let leaked = bytes
                .iter()
                .enumerate()
                .filter(|&(k, &b)| {
                    let a = addr.0 + k as u64;
                    b != 0 && w.bytes.cleared.contains(&a) && !w.dirty.contains(&a)
                })
                .count() as u64;
            if leaked > 0 {
                self.report.secret_bytes_observed += leaked;
                self.report.violations.push(Violation::Leak {
                    function: function.to_string(),
                    window: w.id,
                    addr,
                    bytes: leaked,
                });
                // one verdict per read, attributed to the outermost window
                break;
            }
        }
    }

    fn vault(&mut self, i: usize, call: &VaultCall, forged: bool) -> Flow {
        let fname = self.current_name();
        let pc = self.pc(i);
        let act = self.current();
        let (owner, frame) = (act.id, act.frame.clone());

        let resolved = match call {
            VaultCall::RegisterMemory { target, len, .. }
            | VaultCall::RegisterMemoryException { target, len, .. } => {
                match self
                    .mem_target(target)
                    .and_then(|a| Ok((a, self.size(len)?)))
                {
                    Ok(r) => Some(r),
                    Err(e) => {
                        self.fault(FaultKind::Structural, fname, i, e);
                        return Flow::Next;
                    }
                }
            }
            _ => None,
        };

        let entry = match (call, resolved) {
            (VaultCall::RegisterStack { all }, _) => Some(RegisterEntry::Stack {
                owner,
                frame_base: frame.base,
                frame_top: frame.top,
                all: *all,
            }),
            (VaultCall::RegisterMemory { read_only, .. }, Some((base, len))) => {
                Some(RegisterEntry::Memory {
                    owner,
                    base,
                    len,
                    read_only: *read_only,
                })
            }
            (VaultCall::RegisterMemoryException { read_only, .. }, Some((base, len))) => {
                Some(RegisterEntry::MemoryException {
                    owner,
                    base,
                    len,
                    read_only: *read_only,
                })
            }
            _ => None,
        };

        if self.mode == Mode::Native {
            match call {
                VaultCall::StartProtect => self.open_window(fname),
                VaultCall::StopProtect => {
                    self.windows.pop();
                }
                VaultCall::UnregisterStack => self.drop_group(),
                _ => self.entries.extend(entry),
            }
            return Flow::Next;
        }

        let result = match call {
            VaultCall::RegisterStack { all } => {
                self.kernel.register_stack(pc, *all, frame.base, frame.top)
            }
            VaultCall::RegisterMemory { read_only, .. } => {
                let (base, len) = resolved.expect("resolved above");
                self.kernel.register_memory(pc, base, len, *read_only)
            }
            VaultCall::RegisterMemoryException { read_only, .. } => {
                let (base, len) = resolved.expect("resolved above");
                self.kernel
                    .register_memory_exception(pc, base, len, *read_only)
            }
            VaultCall::UnregisterStack => {
                let r = self.kernel.unregister_stack(&mut self.mem, pc);
                if r.is_ok() {
                    self.drop_group();
                }
                r
            }
            VaultCall::StartProtect => {
                let before = self.kernel.saved_bytes();
                let window = self.prepare_window(fname);
                let r = self.kernel.start_protect(&mut self.mem, pc);
                if r.is_ok() {
                    let start = self.windows.last().map_or(0, |w| w.end);
                    self.report.windows.push(WindowRecord {
                        id: window.id,
                        opened_by: fname.to_string(),
                        entries: self.entries.len() - start,
                        footprint: self.entries[start..]
                            .iter()
                            .map(RegisterEntry::footprint)
                            .sum(),
                        save_growth: self.kernel.saved_bytes() - before,
                    });
                    self.windows.push(window);
                    self.report.max_nesting = self.report.max_nesting.max(self.windows.len());
                }
                r
            }
            VaultCall::StopProtect => {
                let pre_stop: Vec<(u64, u8)> = self
                    .windows
                    .last()
                    .map(|w| {
                        w.bytes
                            .callee_writable
                            .iter()
                            .map(|&a| (a, self.mem.peek_byte(Address(a))))
                            .collect()
                    })
                    .unwrap_or_default();
                let r = self.kernel.stop_protect(&mut self.mem, pc);
                if r.is_ok() {
                    if let Some(w) = self.windows.pop() {
                        self.check_integrity(&w, &pre_stop);
                    }
                }
                r
            }
        };

        match result {
            Ok(()) => {
                if matches!(
                    call,
                    VaultCall::RegisterStack { .. }
                        | VaultCall::RegisterMemory { .. }
                        | VaultCall::RegisterMemoryException { .. }
                ) {
                    self.entries.extend(entry);
                }
                Flow::Next
            }
            Err(exception) => self.on_exception(fname, forged, exception),
        }
    }

    fn on_exception(&mut self, function: &str, forged: bool, exception: VaultException) -> Flow {
        if forged {
            self.report.forged_rejected += 1;
        }
        let halt = self.options.strict;
        if halt {
            self.report.halted = Some(format!("strict mode: {exception}"));
        }
        self.report.violations.push(Violation::Vault {
            function: function.to_string(),
            forged,
            exception,
        });
        if halt {
            Flow::Halt
        } else {
            Flow::Next
        }
    }

    /// Drops the group of entries headed by the last stack entry, as
    /// `unregister_stack` does in the kernel.
    fn drop_group(&mut self) {
        if let Some(idx) = self
            .entries
            .iter()
            .rposition(|e| matches!(e, RegisterEntry::Stack { .. }))
        {
            self.entries.truncate(idx);
        }
    }

    fn open_window(&mut self, opened_by: &str) {
        let window = self.prepare_window(opened_by);
        self.windows.push(window);
        self.report.max_nesting = self.report.max_nesting.max(self.windows.len());
    }

    /// Window over the entries registered since the enclosing window opened,
    /// with a snapshot of every byte it must restore.
    fn prepare_window(&mut self, opened_by: &str) -> Window {
        let start = self.windows.last().map_or(0, |w| w.end);
        let bytes = WindowBytes::from_entries(&self.entries[start..]);
        let snapshot = bytes
            .restored
            .iter()
            .map(|&a| (a, self.mem.peek_byte(Address(a))))
            .collect();
        let id = self.next_window;
        self.next_window += 1;
        Window {
            id,
            end: self.entries.len(),
            opened_by: opened_by.to_string(),
            bytes,
            snapshot,
            dirty: BTreeSet::new(),
        }
    }

    fn check_integrity(&mut self, w: &Window, pre_stop: &[(u64, u8)]) {
        let mut wrong: Vec<(u64, u8, u8)> = Vec::new();
        for (&a, &expected) in &w.snapshot {
            let found = self.mem.peek_byte(Address(a));
            if found != expected {
                wrong.push((a, expected, found));
            }
        }
        for &(a, expected) in pre_stop {
            let found = self.mem.peek_byte(Address(a));
            if found != expected {
                wrong.push((a, expected, found));
            }
        }
        wrong.sort_unstable();
        if let Some(&(addr, expected, found)) = wrong.first() {
            self.report.violations.push(Violation::IntegrityBreach {
                window: w.id,
                opened_by: w.opened_by.clone(),
                addr: Address(addr),
                expected,
                found,
                bytes: wrong.len() as u64,
            });
        }
    }
}
