use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::memory::Address;
use crate::program::ApiRow;
use crate::vault::{Syscall, SyscallStats, VaultException};

pub const REPORT_HEADER: &str = "framevault-report v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Protected,
    Native,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Protected => "protected",
            Mode::Native => "native",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// An untrusted read saw non-zero bytes at fully protected addresses.
    Leak {
        function: String,
        window: usize,
        addr: Address,
        bytes: u64,
    },
    /// Protected bytes differ from their saved values after stop_protect.
    IntegrityBreach {
        window: usize,
        opened_by: String,
        addr: Address,
        expected: u8,
        found: u8,
        bytes: u64,
    },
    Vault {
        function: String,
        forged: bool,
        exception: VaultException,
    },
}

impl Violation {
    pub fn is_protection_failure(&self) -> bool {
        !matches!(self, Violation::Vault { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Read,
    Write,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Observation {
    pub probe: ProbeKind,
    pub function: String,
    pub addr: Address,
    pub len: u64,
    /// Innermost open protection window, if any.
    pub window: Option<usize>,
    /// Hex of the bytes read or written.
    pub bytes: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// A probe touched unmapped or read-only memory.
    Probe,
    /// The program itself cannot be executed as written.
    Structural,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Fault {
    pub kind: FaultKind,
    pub function: String,
    pub stmt: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WindowRecord {
    pub id: usize,
    pub opened_by: String,
    pub entries: usize,
    /// Bytes the window's new RegisterList entries cover.
    pub footprint: u64,
    /// Growth of kernel save storage during this start_protect.
    pub save_growth: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExecutionReport {
    pub mode: Mode,
    pub entry: String,
    pub violations: Vec<Violation>,
    pub observations: Vec<Observation>,
    pub faults: Vec<Fault>,
    pub notes: Vec<String>,
    pub stats: SyscallStats,
    /// Inserted runtime calls executed, per mapping row.
    pub provenance: BTreeMap<ApiRow, u64>,
    pub windows: Vec<WindowRecord>,
    /// Most protection windows open at once.
    pub max_nesting: usize,
    /// Non-zero bytes untrusted code read from fully protected ranges.
    pub secret_bytes_observed: u64,
    pub forged_calls: u64,
    pub forged_rejected: u64,
    pub halted: Option<String>,
    pub memory_digest: String,
}

impl ExecutionReport {
    pub fn leaks(&self) -> impl Iterator<Item = &Violation> {
        self.violations
            .iter()
            .filter(|v| matches!(v, Violation::Leak { .. }))
    }

    pub fn integrity_breaches(&self) -> impl Iterator<Item = &Violation> {
        self.violations
            .iter()
            .filter(|v| matches!(v, Violation::IntegrityBreach { .. }))
    }

    pub fn exceptions(&self) -> impl Iterator<Item = &VaultException> {
        self.violations.iter().filter_map(|v| match v {
            Violation::Vault { exception, .. } => Some(exception),
            _ => None,
        })
    }

    pub fn structural_faults(&self) -> impl Iterator<Item = &Fault> {
        self.faults
            .iter()
            .filter(|f| f.kind == FaultKind::Structural)
    }

    pub fn has_violations(&self) -> bool {
        !self.violations.is_empty()
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serializes");
        out.push('\n');
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{REPORT_HEADER}");
        let _ = writeln!(out, "mode: {}", self.mode.name());
        let _ = writeln!(out, "entry: {}", self.entry);
        if let Some(h) = &self.halted {
            let _ = writeln!(out, "halted: {h}");
        }
        let _ = writeln!(out, "secret bytes observed: {}", self.secret_bytes_observed);
        let _ = writeln!(out, "violations: {}", self.violations.len());
        for v in &self.violations {
            let _ = writeln!(out, "  {}", describe(v));
        }
        let _ = writeln!(
            out,
            "forged calls: {} ({} rejected)",
            self.forged_calls, self.forged_rejected
        );
        out.push_str(&stats_table(&[(self.mode.name(), &self.stats)]));
        if !self.provenance.is_empty() {
            let _ = writeln!(out, "inserted calls executed:");
            for (row, n) in &self.provenance {
                let _ = writeln!(out, "  row {} {:<44} {n}", row.number(), format!("{row:?}"));
            }
        }
        if !self.windows.is_empty() {
            let _ = writeln!(out, "windows:");
            for w in &self.windows {
                let _ = writeln!(
                    out,
                    "  #{} {} entries={} footprint={} saved={}",
                    w.id, w.opened_by, w.entries, w.footprint, w.save_growth
                );
            }
        }
        if !self.faults.is_empty() {
            let _ = writeln!(out, "faults:");
            for f in &self.faults {
                let _ = writeln!(
                    out,
                    "  {:?} {}[{}]: {}",
                    f.kind, f.function, f.stmt, f.message
                );
            }
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        let _ = writeln!(out, "observations: {}", self.observations.len());
        for o in &self.observations {
            let window = o.window.map_or("-".to_string(), |w| format!("#{w}"));
            let nonzero =
                hex::decode(&o.bytes).map_or(0, |b| b.iter().filter(|&&x| x != 0).count());
            let _ = writeln!(
                out,
                "  {:?} {} {} +{} window {} nonzero {}",
                o.probe, o.function, o.addr, o.len, window, nonzero
            );
        }
        let _ = writeln!(out, "memory digest: {}", self.memory_digest);
        out
    }
}

pub fn describe(v: &Violation) -> String {
    match v {
        Violation::Leak {
            function,
            window,
            addr,
            bytes,
        } => format!("leak: {function} read {bytes} protected byte(s) at {addr} in window #{window}"),
        Violation::IntegrityBreach {
            window,
            opened_by,
            addr,
            expected,
            found,
            bytes,
        } => format!(
            "integrity breach: window #{window} ({opened_by}) {bytes} byte(s) wrong, first at {addr}: expected {expected:#04x}, found {found:#04x}"
        ),
        Violation::Vault {
            function,
            forged,
            exception,
        } => {
            let forged = if *forged { " (forged)" } else { "" };
            format!("exception in {function}{forged}: {exception}")
        }
    }
}

/// Per-syscall counts, one row per labelled run.
pub fn stats_table(rows: &[(&str, &SyscallStats)]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<10}", "");
    for c in Syscall::ALL {
        let _ = write!(out, " {:>w$}", c.name(), w = c.name().len());
    }
    let _ = writeln!(
        out,
        " {:>6} {:>12} {:>13} {:>14}",
        "Total", "bytes_copied", "bytes_cleared", "bytes_restored"
    );
    for (label, s) in rows {
        let _ = write!(out, "{label:<10}");
        for c in Syscall::ALL {
            let _ = write!(out, " {:>w$}", s.count(c), w = c.name().len());
        }
        let _ = writeln!(
            out,
            " {:>6} {:>12} {:>13} {:>14}",
            s.total(),
            s.bytes_saved,
            s.bytes_cleared,
            s.bytes_restored
        );
    }
    out
}
