//! Randomized protection scenarios.
//!
//! Each case is a call chain `main -> t0 -> u0_* -> t1 -> u1_* -> ...` where
//! `t*` are sensitive functions with random locals, annotations and heap
//! objects, and `u*` are untrusted functions running probe scripts over
//! every caller frame and the heap. A case is run under the save-buffer
//! kernel and under the snapshot kernel, and checked for leaks, integrity
//! breaches, divergence between the two kernels, undrained save records,
//! window footprints and forged-call handling.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::exec::{run, run_native, FaultKind, RunOptions};
use crate::memory::{FRAME_METADATA, HEAP_BASE};
use crate::oracle::SnapshotVault;
use crate::program::{
    Arg, FnAnnotation, FunctionDesc, MemTarget, Probe, Program, SizeExpr, Stmt, Target, Value,
    VarAnnotation, VarDesc, VaultCall,
};
use crate::scenario::Scenario;
use crate::vault::VaultState;

#[derive(Clone, Debug, Serialize)]
pub struct FuzzConfig {
    pub seed: u64,
    pub cases: u64,
    /// Sensitive functions in the call chain, at most this many.
    pub max_depth: usize,
    /// Upper bound on any generated frame, metadata included.
    pub max_frame: u64,
    pub probes: bool,
    /// Untrusted code issues runtime calls of its own.
    pub forged: bool,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub minimize: bool,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            seed: 0,
            cases: 100,
            max_depth: 3,
            max_frame: 4096,
            probes: true,
            forged: true,
            jobs: 0,
            minimize: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    Leak,
    IntegrityBreach,
    OracleMismatch,
    UnexpectedException,
    ForgedAccepted,
    SaveBufferNotDrained,
    FootprintMismatch,
    StructuralFault,
    ObservationWithoutProbes,
    NativeDivergence,
    Instrument,
}

impl fmt::Display for FindingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Finding {
    pub case: u64,
    pub kind: FindingKind,
    pub detail: String,
    pub scenario: Scenario,
}

/// Counters over all cases.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FuzzTotals {
    pub functions: u64,
    pub windows: u64,
    pub max_nesting: u64,
    pub reads: u64,
    pub bytes_read: u64,
    pub writes: u64,
    pub forged_calls: u64,
    pub forged_rejected: u64,
    pub probe_faults: u64,
    pub save_records: u64,
    pub bytes_saved: u64,
}

impl FuzzTotals {
    fn add(&mut self, o: &FuzzTotals) {
        self.functions += o.functions;
        self.windows += o.windows;
        self.max_nesting = self.max_nesting.max(o.max_nesting);
        self.reads += o.reads;
        self.bytes_read += o.bytes_read;
        self.writes += o.writes;
        self.forged_calls += o.forged_calls;
        self.forged_rejected += o.forged_rejected;
        self.probe_faults += o.probe_faults;
        self.save_records += o.save_records;
        self.bytes_saved += o.bytes_saved;
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FuzzSummary {
    pub config: FuzzConfig,
    pub totals: FuzzTotals,
    pub findings: Vec<Finding>,
}

impl FuzzSummary {
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let t = &self.totals;
        let mut out = format!(
            "fuzz seed={} cases={} max_depth={} max_frame={} probes={} forged={}\n",
            c.seed, c.cases, c.max_depth, c.max_frame, c.probes, c.forged
        );
        out.push_str(&format!(
            "functions={} windows={} max_nesting={} reads={} bytes_read={} writes={} forged={} rejected={} probe_faults={} save_records={} bytes_saved={}\n",
            t.functions, t.windows, t.max_nesting, t.reads, t.bytes_read, t.writes, t.forged_calls,
            t.forged_rejected, t.probe_faults, t.save_records, t.bytes_saved
        ));
        out.push_str(&format!("findings: {}\n", self.findings.len()));
        for f in &self.findings {
            out.push_str(&format!("  case {} {}: {}\n", f.case, f.kind, f.detail));
        }
        out
    }
}

pub fn case_seed(seed: u64, case: u64) -> u64 {
    seed ^ case.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Generates the scenario for one case.
pub fn generate(config: &FuzzConfig, case: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed(config.seed, case));
    Generator {
        rng: &mut rng,
        config,
        heap_used: 0,
        functions: Vec::new(),
        untrusted: Vec::new(),
    }
    .build()
}

struct Generator<'a> {
    rng: &'a mut ChaCha8Rng,
    config: &'a FuzzConfig,
    heap_used: u64,
    functions: Vec<FunctionDesc>,
    untrusted: Vec<(String, usize)>,
}

struct TrustedFrame {
    size: u64,
    /// Non-pointer locals that may be passed by address.
    plain: Vec<(String, u64)>,
}

impl Generator<'_> {
    fn build(mut self) -> Scenario {
        let depth = self.rng.gen_range(1..=self.config.max_depth.max(1));
        let mut main = FunctionDesc::new("main");
        main.body = vec![Stmt::call("t0", vec![]), Stmt::Return];
        self.functions.push(main);
        // ancestors' frame sizes, outermost first
        let mut chain = vec![FRAME_METADATA];
        self.trusted(0, depth, &mut chain);

        let untrusted = self
            .untrusted
            .iter()
            .map(|(name, arity)| format!("{name}({arity})\n"))
            .collect();
        Scenario {
            program: Program {
                consts: BTreeMap::new(),
                functions: self.functions,
            },
            untrusted,
            sensitive: String::new(),
            entry: "main".into(),
            image_map: None,
        }
    }

    fn trusted(&mut self, level: usize, depth: usize, chain: &mut Vec<u64>) {
        let name = format!("t{level}");
        let mut f = FunctionDesc::new(&name);
        f.annotation = Some(if self.rng.gen_bool(0.5) {
            FnAnnotation::Sensitive
        } else {
            FnAnnotation::SensitiveFinegrained
        });
        let frame = self.locals(&mut f);
        chain.push(frame.size);

        for v in &f.locals {
            if v.pointer {
                continue;
            }
            let byte = self.rng.gen_range(1..=255u8);
            f.body.push(Stmt::assign(&v.name, Value::Fill(byte)));
        }
        let pointers: Vec<(String, u64)> = f
            .locals
            .iter()
            .filter(|v| v.pointer)
            .map(|v| {
                let n = match v.pointee() {
                    Some(SizeExpr::Bytes(n)) => *n,
                    _ => unreachable!("generated pointees have literal sizes"),
                };
                (v.name.clone(), n)
            })
            .collect();
        for (p, n) in pointers {
            f.body.push(Stmt::heap_alloc(&p, n));
            let byte = self.rng.gen_range(1..=255u8);
            f.body.push(Stmt::Store {
                ptr: p,
                value: Value::Fill(byte),
            });
            self.heap_used += n.div_ceil(16) * 16;
        }

        let calls = self.rng.gen_range(1..=3);
        let mut bodies = Vec::new();
        for j in 0..calls {
            let uname = format!("u{level}_{j}");
            let arity = self.rng.gen_range(0..=2usize);
            let mut args = Vec::new();
            let mut exposed = Vec::new();
            for _ in 0..arity {
                match frame.plain.choose(self.rng) {
                    Some((v, size)) if self.rng.gen_bool(0.7) => {
                        args.push(Arg::AddrOf(v.clone()));
                        exposed.push(Some(*size));
                    }
                    _ => {
                        args.push(Arg::Const(self.rng.gen()));
                        exposed.push(None);
                    }
                }
            }
            f.body.push(Stmt::call(&uname, args));
            self.untrusted.push((uname.clone(), arity));
            let next = (j == 0 && level + 1 < depth).then(|| format!("t{}", level + 1));
            bodies.push((uname, exposed, next));
        }
        f.body.push(Stmt::Return);
        self.functions.push(f);

        for (uname, exposed, next) in bodies {
            self.untrusted_fn(&uname, &exposed, next.as_deref(), chain, level, depth);
        }
        chain.pop();
    }

    fn locals(&mut self, f: &mut FunctionDesc) -> TrustedFrame {
        let budget = self.config.max_frame.max(64) - FRAME_METADATA;
        let count = self.rng.gen_range(1..=6);
        let mut used = 0;
        let mut plain = Vec::new();
        for i in 0..count {
            if used >= budget {
                break;
            }
            let pointer = self.rng.gen_bool(0.25) && budget - used >= 8;
            if pointer {
                let pointee = self.rng.gen_range(1..=256u64);
                let annotation = match self.rng.gen_range(0..3) {
                    0 => Some(VarAnnotation::SensitivePointer(Some(pointee.into()))),
                    1 => Some(VarAnnotation::WriteSensitivePointer(Some(pointee.into()))),
                    _ => None,
                };
                let mut v = VarDesc::pointer(format!("p{i}"));
                v.annotation = annotation;
                v.pointee_size = Some(pointee.into());
                f.locals.push(v);
                used += 8;
            } else {
                let max = (budget - used).min(1024);
                let size = if self.rng.gen_bool(0.3) {
                    self.rng.gen_range(1..=8.min(max))
                } else {
                    self.rng.gen_range(1..=max)
                };
                let annotation = match self.rng.gen_range(0..5) {
                    0 => Some(VarAnnotation::Sensitive),
                    1 => Some(VarAnnotation::NotSensitive),
                    2 => Some(VarAnnotation::WriteSensitive),
                    _ => None,
                };
                let name = format!("v{i}");
                let mut v = VarDesc::new(&name, size);
                v.annotation = annotation;
                f.locals.push(v);
                plain.push((name, size));
                used += size;
            }
        }
        TrustedFrame {
            size: used + FRAME_METADATA,
            plain,
        }
    }

    fn untrusted_fn(
        &mut self,
        name: &str,
        exposed: &[Option<u64>],
        next: Option<&str>,
        chain: &mut Vec<u64>,
        level: usize,
        depth: usize,
    ) {
        let mut f = FunctionDesc::new(name);
        f.external = true;
        for i in 0..exposed.len() {
            f.params.push(VarDesc::pointer(format!("a{i}")));
        }
        let above: u64 = chain.iter().sum();
        let mut script = Vec::new();
        if self.config.probes {
            let reads_whole = |heap: u64| {
                let mut v = vec![Stmt::probe(Probe::Read {
                    target: Target::Frame { offset: 0 },
                    len: above,
                })];
                if heap > 0 {
                    v.push(Stmt::probe(Probe::Read {
                        target: Target::Abs(HEAP_BASE),
                        len: heap,
                    }));
                }
                v
            };
            script.extend(reads_whole(self.heap_used));
            for _ in 0..self.rng.gen_range(0..4) {
                let off = self.rng.gen_range(0..above);
                let len = self.rng.gen_range(1..=(above - off).min(512));
                let stmt = match self.rng.gen_range(0..3) {
                    0 => Probe::Read {
                        target: Target::Frame { offset: off as i64 },
                        len,
                    },
                    _ => Probe::Write {
                        target: Target::Frame { offset: off as i64 },
                        value: Value::Repeat {
                            byte: self.rng.gen(),
                            len,
                        },
                    },
                };
                script.push(Stmt::probe(stmt));
            }
            if self.heap_used > 0 && self.rng.gen_bool(0.5) {
                let len = self.rng.gen_range(1..=self.heap_used.min(256));
                script.push(Stmt::probe(Probe::Write {
                    target: Target::Abs(HEAP_BASE),
                    value: Value::Repeat {
                        byte: self.rng.gen(),
                        len,
                    },
                }));
            }
            for (i, size) in exposed.iter().enumerate() {
                if let Some(size) = size {
                    script.push(Stmt::probe(Probe::Write {
                        target: Target::Arg {
                            index: i,
                            offset: 0,
                        },
                        value: Value::Repeat {
                            byte: self.rng.gen_range(1..=255),
                            len: *size,
                        },
                    }));
                }
            }
            script.extend(reads_whole(self.heap_used));
        }
        if self.config.forged {
            for _ in 0..self.rng.gen_range(0..3) {
                let offset = self.rng.gen_range(0..above) as i64;
                let call = match self.rng.gen_range(0..4) {
                    0 => VaultCall::RegisterMemory {
                        target: MemTarget::At(Target::Frame { offset }),
                        len: SizeExpr::Bytes(1),
                        read_only: false,
                    },
                    1 => VaultCall::RegisterMemoryException {
                        target: MemTarget::At(Target::Frame { offset }),
                        len: SizeExpr::Bytes(1),
                        read_only: false,
                    },
                    2 => VaultCall::UnregisterStack,
                    _ => VaultCall::StopProtect,
                };
                let at = self.rng.gen_range(0..=script.len());
                script.insert(at, Stmt::probe(Probe::Forge { call }));
            }
        }
        let call_at = self.rng.gen_range(0..=script.len());
        if let Some(next) = next {
            script.insert(call_at, Stmt::call(next, vec![]));
        }
        script.push(Stmt::Return);
        f.body = script;
        self.functions.push(f);

        if next.is_some() {
            let own = exposed.len() as u64 * 8 + FRAME_METADATA;
            chain.push(own);
            self.trusted(level + 1, depth, chain);
            chain.pop();
        }
    }
}

/// Runs every check on one scenario and returns what failed.
pub fn check(scenario: &Scenario, config: &FuzzConfig) -> (Vec<(FindingKind, String)>, FuzzTotals) {
    let mut out = Vec::new();
    let mut totals = FuzzTotals::default();
    let program = match scenario.instrument() {
        Ok(p) => p,
        Err(e) => return (vec![(FindingKind::Instrument, e.to_string())], totals),
    };
    let identity = match scenario.identity(&program) {
        Ok(t) => t,
        Err(e) => return (vec![(FindingKind::Instrument, e.to_string())], totals),
    };
    let options = RunOptions::default();
    let a = run(
        &program,
        identity.clone(),
        VaultState::new(identity.clone()),
        &scenario.entry,
        &options,
    );
    let b = run(
        &program,
        identity.clone(),
        SnapshotVault::new(identity.clone()),
        &scenario.entry,
        &options,
    );
    let r = &a.report;

    totals.functions = program.functions.len() as u64;
    totals.windows = r.windows.len() as u64;
    totals.max_nesting = r.max_nesting as u64;
    for o in &r.observations {
        match o.probe {
            crate::exec::ProbeKind::Read => {
                totals.reads += 1;
                totals.bytes_read += o.len;
            }
            crate::exec::ProbeKind::Write => totals.writes += 1,
        }
    }
    totals.forged_calls = r.forged_calls;
    totals.forged_rejected = r.forged_rejected;
    totals.probe_faults = r
        .faults
        .iter()
        .filter(|f| f.kind == FaultKind::Probe)
        .count() as u64;
    totals.save_records = a.kernel.save_buffer().len() as u64;
    totals.bytes_saved = a.kernel.save_buffer().produced_bytes();

    for v in r.leaks().chain(r.integrity_breaches()) {
        let kind = match v {
            crate::exec::Violation::Leak { .. } => FindingKind::Leak,
            _ => FindingKind::IntegrityBreach,
        };
        out.push((kind, crate::exec::describe(v)));
    }
    for f in r.structural_faults() {
        out.push((
            FindingKind::StructuralFault,
            format!("{}[{}]: {}", f.function, f.stmt, f.message),
        ));
    }
    let unexpected: Vec<_> = r
        .violations
        .iter()
        .filter(|v| matches!(v, crate::exec::Violation::Vault { forged: false, .. }))
        .collect();
    if let Some(v) = unexpected.first() {
        out.push((FindingKind::UnexpectedException, crate::exec::describe(v)));
    }
    if r.forged_rejected != r.forged_calls || r.exceptions().count() as u64 != r.forged_calls {
        out.push((
            FindingKind::ForgedAccepted,
            format!(
                "{} forged calls, {} rejected, {} exceptions",
                r.forged_calls,
                r.forged_rejected,
                r.exceptions().count()
            ),
        ));
    }
    if let Some((addr, x, y)) = a.memory.first_difference(&b.memory) {
        out.push((
            FindingKind::OracleMismatch,
            format!("final memory differs at {addr}: save-buffer kernel {x:#04x}, snapshot kernel {y:#04x}"),
        ));
    }
    if a.report.violations != b.report.violations {
        out.push((
            FindingKind::OracleMismatch,
            "kernels disagree on violations".into(),
        ));
    }
    if !a.kernel.save_buffer().fully_drained() {
        let buf = a.kernel.save_buffer();
        out.push((
            FindingKind::SaveBufferNotDrained,
            format!(
                "produced {} bytes, released {}; {} record(s) not read exactly once",
                buf.produced_bytes(),
                buf.released_bytes(),
                buf.records().iter().filter(|r| r.reads() != 1).count()
            ),
        ));
    }
    for w in &r.windows {
        if w.footprint != w.save_growth {
            out.push((
                FindingKind::FootprintMismatch,
                format!(
                    "window #{} footprint {} but saved {}",
                    w.id, w.footprint, w.save_growth
                ),
            ));
        }
    }
    if !config.probes {
        if !r.observations.is_empty() {
            out.push((
                FindingKind::ObservationWithoutProbes,
                format!("{} observations", r.observations.len()),
            ));
        }
        if r.forged_calls == 0 {
            let n = run_native(&program, identity.clone(), &scenario.entry, &options);
            let heap = |m: &crate::memory::ProcessMemory| {
                m.heap_objects()
                    .iter()
                    .map(|o| m.peek(o.base, o.len))
                    .collect::<Vec<_>>()
            };
            if heap(&n.memory) != heap(&a.memory) {
                out.push((
                    FindingKind::NativeDivergence,
                    "heap contents differ from native run".into(),
                ));
            }
        }
    }
    (out, totals)
}

/// Greedily drops statements while `still_fails` holds.
pub fn minimize(scenario: &Scenario, still_fails: impl Fn(&Scenario) -> bool) -> Scenario {
    let mut best = scenario.clone();
    loop {
        let mut progress = false;
        for fi in 0..best.program.functions.len() {
            let mut si = 0;
            while si < best.program.functions[fi].body.len() {
                if best.program.functions[fi].body[si] == Stmt::Return {
                    si += 1;
                    continue;
                }
                let mut candidate = best.clone();
                candidate.program.functions[fi].body.remove(si);
                if still_fails(&candidate) {
                    best = candidate;
                    progress = true;
                } else {
                    si += 1;
                }
            }
        }
        if !progress {
            return best;
        }
    }
}

fn run_case(config: &FuzzConfig, case: u64) -> (Vec<Finding>, FuzzTotals) {
    let scenario = generate(config, case);
    let (failures, totals) = check(&scenario, config);
    let findings = failures
        .into_iter()
        .map(|(kind, detail)| {
            let scenario = if config.minimize {
                minimize(&scenario, |s| {
                    check(s, config).0.iter().any(|(k, _)| *k == kind)
                })
            } else {
                scenario.clone()
            };
            Finding {
                case,
                kind,
                detail,
                scenario,
            }
        })
        .collect();
    (findings, totals)
}

/// Runs `config.cases` cases. Results are in case order regardless of
/// thread count.
pub fn fuzz(config: &FuzzConfig) -> FuzzSummary {
    let work = || {
        (0..config.cases)
            .into_par_iter()
            .map(|case| run_case(config, case))
            .collect::<Vec<_>>()
    };
    let results = if config.jobs == 0 {
        work()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .expect("thread pool")
            .install(work)
    };
    let mut summary = FuzzSummary {
        config: config.clone(),
        totals: FuzzTotals::default(),
        findings: Vec::new(),
    };
    for (findings, totals) in results {
        summary.totals.add(&totals);
        summary.findings.extend(findings);
    }
    summary
}
