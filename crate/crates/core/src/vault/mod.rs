//! The protection runtime: kernel-side lists, identity checks and the six
//! calls that drive them.
//!
//! [`Registry`] owns the RegisterList, the ProtectList, the exception log and
//! the call counters, and performs every identity and index check. The data
//! movement of `start_protect`/`stop_protect` is left to a [`Kernel`]
//! implementation: [`VaultState`] follows the save-buffer algorithms, and
//! [`crate::oracle::SnapshotVault`] uses plain snapshots as a reference.

mod save_buffer;
mod state;

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

pub use save_buffer::{RecordId, SaveBuffer, SaveBufferError, SaveRecord};
pub use state::VaultState;

use crate::identity::{FunctionId, IdentityTable};
use crate::memory::{Address, ProcessMemory, Region, StackFrame};

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Syscall {
    RegisterStack,
    UnregisterStack,
    RegisterMemory,
    RegisterMemoryException,
    StartProtect,
    StopProtect,
}

impl Syscall {
    pub const ALL: [Syscall; 6] = [
        Syscall::RegisterStack,
        Syscall::UnregisterStack,
        Syscall::RegisterMemory,
        Syscall::RegisterMemoryException,
        Syscall::StartProtect,
        Syscall::StopProtect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Syscall::RegisterStack => "register_stack",
            Syscall::UnregisterStack => "unregister_stack",
            Syscall::RegisterMemory => "register_memory",
            Syscall::RegisterMemoryException => "register_memory_exception",
            Syscall::StartProtect => "start_protect",
            Syscall::StopProtect => "stop_protect",
        }
    }

    pub fn from_name(name: &str) -> Option<Syscall> {
        Syscall::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl fmt::Display for Syscall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegisterEntry {
    Stack {
        owner: FunctionId,
        frame_base: Address,
        frame_top: Address,
        all: bool,
    },
    Memory {
        owner: FunctionId,
        base: Address,
        len: u64,
        read_only: bool,
    },
    MemoryException {
        owner: FunctionId,
        base: Address,
        len: u64,
        read_only: bool,
    },
}

impl RegisterEntry {
    pub fn owner(&self) -> FunctionId {
        match *self {
            RegisterEntry::Stack { owner, .. }
            | RegisterEntry::Memory { owner, .. }
            | RegisterEntry::MemoryException { owner, .. } => owner,
        }
    }

    /// Bytes copied to the save buffer when a protection window covers
    /// this entry.
    pub fn footprint(&self) -> u64 {
        match *self {
            RegisterEntry::Stack {
                frame_base,
                frame_top,
                all,
                ..
            } => {
                if all {
                    frame_base.0 - frame_top.0
                } else {
                    0
                }
            }
            RegisterEntry::Memory { len, .. } | RegisterEntry::MemoryException { len, .. } => len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ProtectEntry {
    pub caller: FunctionId,
    /// First free RegisterList slot when the window opened.
    pub register_index: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExceptionKind {
    IdentityMismatch,
    IndexMismatch,
    RegionOutOfFrame,
    UnknownCaller,
    EmptyProtectList,
    InvalidRegion,
}

impl fmt::Display for ExceptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ExceptionKind::IdentityMismatch => "identity-mismatch",
            ExceptionKind::IndexMismatch => "index-mismatch",
            ExceptionKind::RegionOutOfFrame => "region-out-of-frame",
            ExceptionKind::UnknownCaller => "unknown-caller",
            ExceptionKind::EmptyProtectList => "empty-protect-list",
            ExceptionKind::InvalidRegion => "invalid-region",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize)]
#[error("{syscall}: {kind} (pc {caller_pc}): {detail}")]
pub struct VaultException {
    pub kind: ExceptionKind,
    pub syscall: Syscall,
    pub caller_pc: Address,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SyscallStats {
    pub register_stack: u64,
    pub unregister_stack: u64,
    pub register_memory: u64,
    pub register_memory_exception: u64,
    pub start_protect: u64,
    pub stop_protect: u64,
    /// Bytes copied into the save buffer.
    pub bytes_saved: u64,
    /// Bytes zeroed by `start_protect` and `unregister_stack`.
    pub bytes_cleared: u64,
    /// Bytes written back by `stop_protect` and exception copy-back.
    pub bytes_restored: u64,
}

impl SyscallStats {
    pub fn count(&self, call: Syscall) -> u64 {
        match call {
            Syscall::RegisterStack => self.register_stack,
            Syscall::UnregisterStack => self.unregister_stack,
            Syscall::RegisterMemory => self.register_memory,
            Syscall::RegisterMemoryException => self.register_memory_exception,
            Syscall::StartProtect => self.start_protect,
            Syscall::StopProtect => self.stop_protect,
        }
    }

    fn bump(&mut self, call: Syscall) {
        let slot = match call {
            Syscall::RegisterStack => &mut self.register_stack,
            Syscall::UnregisterStack => &mut self.unregister_stack,
            Syscall::RegisterMemory => &mut self.register_memory,
            Syscall::RegisterMemoryException => &mut self.register_memory_exception,
            Syscall::StartProtect => &mut self.start_protect,
            Syscall::StopProtect => &mut self.stop_protect,
        };
        *slot += 1;
    }

    pub fn total(&self) -> u64 {
        Syscall::ALL.iter().map(|&c| self.count(c)).sum()
    }

    /// Saved plus cleared bytes.
    pub fn bytes_copied_and_cleared(&self) -> u64 {
        self.bytes_saved + self.bytes_cleared
    }
}

/// The six protection calls. Every call takes the caller's PC, from which the
/// identity of the issuing function is derived. A call that raises an
/// exception logs it, returns it, and changes neither memory nor kernel lists.
pub trait Kernel {
    fn register_stack(
        &mut self,
        caller_pc: Address,
        all: bool,
        frame_base: Address,
        frame_top: Address,
    ) -> Result<(), VaultException>;

    fn register_memory(
        &mut self,
        caller_pc: Address,
        base: Address,
        len: u64,
        read_only: bool,
    ) -> Result<(), VaultException>;

    fn register_memory_exception(
        &mut self,
        caller_pc: Address,
        base: Address,
        len: u64,
        read_only: bool,
    ) -> Result<(), VaultException>;

    fn unregister_stack(
        &mut self,
        mem: &mut ProcessMemory,
        caller_pc: Address,
    ) -> Result<(), VaultException>;

    fn start_protect(
        &mut self,
        mem: &mut ProcessMemory,
        caller_pc: Address,
    ) -> Result<(), VaultException>;

    fn stop_protect(
        &mut self,
        mem: &mut ProcessMemory,
        caller_pc: Address,
    ) -> Result<(), VaultException>;

    fn registry(&self) -> &Registry;

    /// Total bytes ever written into kernel-side save storage.
    fn saved_bytes(&self) -> u64;

    fn stats(&self) -> &SyscallStats {
        self.registry().stats()
    }

    fn exceptions(&self) -> &[VaultException] {
        self.registry().exceptions()
    }
}

/// RegisterList, ProtectList, exception log and counters, with the checks
/// shared by every kernel.
#[derive(Clone, Debug)]
pub struct Registry {
    identity: Arc<IdentityTable>,
    register_list: Vec<RegisterEntry>,
    protect_list: Vec<ProtectEntry>,
    exceptions: Vec<VaultException>,
    stats: SyscallStats,
}

impl Registry {
    pub fn new(identity: Arc<IdentityTable>) -> Self {
        Registry {
            identity,
            register_list: Vec::new(),
            protect_list: Vec::new(),
            exceptions: Vec::new(),
            stats: SyscallStats::default(),
        }
    }

    pub fn identity(&self) -> &IdentityTable {
        &self.identity
    }

    pub fn register_list(&self) -> &[RegisterEntry] {
        &self.register_list
    }

    pub fn protect_list(&self) -> &[ProtectEntry] {
        &self.protect_list
    }

    pub fn exceptions(&self) -> &[VaultException] {
        &self.exceptions
    }

    pub fn stats(&self) -> &SyscallStats {
        &self.stats
    }

    pub(crate) fn stats_mut(&mut self) -> &mut SyscallStats {
        &mut self.stats
    }

    fn fail(
        &mut self,
        kind: ExceptionKind,
        syscall: Syscall,
        caller_pc: Address,
        detail: String,
    ) -> VaultException {
        let e = VaultException {
            kind,
            syscall,
            caller_pc,
            detail,
        };
        self.exceptions.push(e.clone());
        e
    }

    fn fname(&self, id: FunctionId) -> String {
        self.identity
            .name(id)
            .map_or_else(|| id.to_string(), str::to_string)
    }

    fn caller(&mut self, syscall: Syscall, pc: Address) -> Result<FunctionId, VaultException> {
        match self.identity.resolve(pc) {
            Some(id) => Ok(id),
            None => Err(self.fail(
                ExceptionKind::UnknownCaller,
                syscall,
                pc,
                "pc lies outside every function span".into(),
            )),
        }
    }

    /// The most recent stack entry, as `(index, frame)`.
    pub fn last_stack(&self) -> Option<(usize, StackFrame)> {
        self.register_list
            .iter()
            .enumerate()
            .rev()
            .find_map(|(i, e)| match *e {
                RegisterEntry::Stack {
                    owner,
                    frame_base,
                    frame_top,
                    ..
                } => Some((
                    i,
                    StackFrame {
                        owner,
                        base: frame_base,
                        top: frame_top,
                    },
                )),
                _ => None,
            })
    }

    /// Checks that the caller owns the most recent stack entry.
    fn check_owner(
        &mut self,
        syscall: Syscall,
        pc: Address,
    ) -> Result<(usize, StackFrame), VaultException> {
        let caller = self.caller(syscall, pc)?;
        match self.last_stack() {
            None => Err(self.fail(
                ExceptionKind::IdentityMismatch,
                syscall,
                pc,
                format!(
                    "{} has no register_stack entry to match",
                    self.fname(caller)
                ),
            )),
            Some((_, frame)) if frame.owner != caller => {
                let detail = format!(
                    "caller {} does not match last register_stack owner {}",
                    self.fname(caller),
                    self.fname(frame.owner)
                );
                Err(self.fail(ExceptionKind::IdentityMismatch, syscall, pc, detail))
            }
            Some(found) => Ok(found),
        }
    }

    pub fn register_stack(
        &mut self,
        pc: Address,
        all: bool,
        frame_base: Address,
        frame_top: Address,
    ) -> Result<(), VaultException> {
        const CALL: Syscall = Syscall::RegisterStack;
        self.stats.bump(CALL);
        let owner = self.caller(CALL, pc)?;
        let valid = frame_top < frame_base
            && Region::containing(frame_top, frame_base.0 - frame_top.0) == Some(Region::Stack);
        if !valid {
            let detail = format!("frame [{frame_top}, {frame_base}) is not a stack range");
            return Err(self.fail(ExceptionKind::InvalidRegion, CALL, pc, detail));
        }
        self.register_list.push(RegisterEntry::Stack {
            owner,
            frame_base,
            frame_top,
            all,
        });
        Ok(())
    }

    pub fn register_memory(
        &mut self,
        pc: Address,
        base: Address,
        len: u64,
        read_only: bool,
    ) -> Result<(), VaultException> {
        const CALL: Syscall = Syscall::RegisterMemory;
        self.stats.bump(CALL);
        let (_, frame) = self.check_owner(CALL, pc)?;
        let region = Region::containing(base, len).filter(|_| len > 0);
        let straddles = |f: &StackFrame| {
            let end = base.0 + len;
            base.0 < f.base.0 && end > f.top.0 && !f.contains(base, len)
        };
        let valid = match region {
            Some(Region::Heap) => true,
            Some(Region::Stack) => !straddles(&frame),
            _ => false,
        };
        if !valid {
            let detail =
                format!("[{base}, +{len}) is not a heap object or a range inside one frame");
            return Err(self.fail(ExceptionKind::InvalidRegion, CALL, pc, detail));
        }
        self.register_list.push(RegisterEntry::Memory {
            owner: frame.owner,
            base,
            len,
            read_only,
        });
        Ok(())
    }

    pub fn register_memory_exception(
        &mut self,
        pc: Address,
        base: Address,
        len: u64,
        read_only: bool,
    ) -> Result<(), VaultException> {
        const CALL: Syscall = Syscall::RegisterMemoryException;
        self.stats.bump(CALL);
        let (_, frame) = self.check_owner(CALL, pc)?;
        if len == 0 || !frame.contains(base, len) {
            let detail = format!(
                "[{base}, +{len}) is not inside the frame [{}, {})",
                frame.top, frame.base
            );
            return Err(self.fail(ExceptionKind::RegionOutOfFrame, CALL, pc, detail));
        }
        self.register_list.push(RegisterEntry::MemoryException {
            owner: frame.owner,
            base,
            len,
            read_only,
        });
        Ok(())
    }

    /// Drops the caller's last stack entry and everything after it, then
    /// zeroes the frame.
    pub fn unregister_stack(
        &mut self,
        mem: &mut ProcessMemory,
        pc: Address,
    ) -> Result<(), VaultException> {
        const CALL: Syscall = Syscall::UnregisterStack;
        self.stats.bump(CALL);
        let (index, frame) = self.check_owner(CALL, pc)?;
        if let Some(window) = self
            .protect_list
            .last()
            .filter(|w| w.register_index > index)
        {
            let detail = format!(
                "entries {index}.. are still covered by the window opened at index {}",
                window.register_index
            );
            return Err(self.fail(ExceptionKind::IndexMismatch, CALL, pc, detail));
        }
        self.register_list.truncate(index);
        mem.clear_region(frame.top, frame.size())
            .expect("registered frames lie in the stack region");
        self.stats.bytes_cleared += frame.size();
        Ok(())
    }

    /// Opens a protection window and returns the RegisterList range it
    /// must process: entries registered since the enclosing window opened.
    pub fn open_window(&mut self, pc: Address) -> Result<Range<usize>, VaultException> {
        const CALL: Syscall = Syscall::StartProtect;
        self.stats.bump(CALL);
        let caller = self.caller(CALL, pc)?;
        let start = self.protect_list.last().map_or(0, |p| p.register_index);
        let end = self.register_list.len();
        self.protect_list.push(ProtectEntry {
            caller,
            register_index: end,
        });
        Ok(start..end)
    }

    /// Verifies and closes the innermost window, returning the RegisterList
    /// range whose data must be restored.
    pub fn close_window(&mut self, pc: Address) -> Result<Range<usize>, VaultException> {
        const CALL: Syscall = Syscall::StopProtect;
        self.stats.bump(CALL);
        let caller = self.caller(CALL, pc)?;
        let Some(last) = self.protect_list.last().cloned() else {
            return Err(self.fail(
                ExceptionKind::EmptyProtectList,
                CALL,
                pc,
                "no active protection".into(),
            ));
        };
        if last.caller != caller {
            let detail = format!(
                "caller {} did not open the active window (opened by {})",
                self.fname(caller),
                self.fname(last.caller)
            );
            return Err(self.fail(ExceptionKind::IdentityMismatch, CALL, pc, detail));
        }
        if self.register_list.len() != last.register_index {
            let detail = format!(
                "RegisterList has {} entries, {} when protection started",
                self.register_list.len(),
                last.register_index
            );
            return Err(self.fail(ExceptionKind::IndexMismatch, CALL, pc, detail));
        }
        self.protect_list.pop();
        let start = self.protect_list.last().map_or(0, |p| p.register_index);
        Ok(start..self.register_list.len())
    }
}

#[cfg(test)]
mod tests;
