//! Reference kernel for differential testing.
//!
//! [`SnapshotVault`] shares the RegisterList/ProtectList checks with
//! [`VaultState`](crate::vault::VaultState) but moves data differently: at
//! `start_protect` it snapshots every byte it will have to restore and zeroes
//! the fully protected bytes; at `stop_protect` it writes the snapshot back.
//! No save buffer, no frame reassembly. Both kernels must leave memory in
//! the same state after any sequence of calls.

use std::collections::BTreeSet;
use std::ops::Range;
use std::sync::Arc;

use crate::identity::IdentityTable;
use crate::memory::{Address, ProcessMemory, Snapshot};
use crate::vault::{Kernel, RegisterEntry, Registry, VaultException};

#[derive(Clone, Debug)]
pub struct SnapshotVault {
    registry: Registry,
    windows: Vec<Snapshot>,
    saved: u64,
}

/// Byte sets derived from one window's RegisterList range.
#[derive(Debug, Default)]
pub struct WindowBytes {
    /// Bytes zeroed while the window is open.
    pub cleared: BTreeSet<u64>,
    /// Bytes put back from the snapshot when the window closes.
    pub restored: BTreeSet<u64>,
    /// Writable exception bytes inside whole-frame protection; the callee's
    /// writes to these survive.
    pub callee_writable: BTreeSet<u64>,
}

impl WindowBytes {
    pub fn from_entries(entries: &[RegisterEntry]) -> Self {
        let mut frames = BTreeSet::new();
        let mut exceptions = BTreeSet::new();
        let mut out = WindowBytes::default();
        let mut whole_frame = false;
        for entry in entries {
            match *entry {
                RegisterEntry::Stack {
                    frame_base,
                    frame_top,
                    all,
                    ..
                } => {
                    whole_frame = all;
                    if all {
                        frames.extend(frame_top.0..frame_base.0);
                    }
                }
                RegisterEntry::Memory {
                    base,
                    len,
                    read_only,
                    ..
                } => {
                    out.restored.extend(base.0..base.0 + len);
                    if !read_only {
                        out.cleared.extend(base.0..base.0 + len);
                    }
                }
                RegisterEntry::MemoryException {
                    base,
                    len,
                    read_only,
                    ..
                } => {
                    exceptions.extend(base.0..base.0 + len);
                    if whole_frame {
                        if read_only {
                            out.restored.extend(base.0..base.0 + len);
                        } else {
                            out.callee_writable.extend(base.0..base.0 + len);
                        }
                    }
                }
            }
        }
        for b in frames.difference(&exceptions) {
            out.cleared.insert(*b);
            out.restored.insert(*b);
        }
        out
    }
}

/// Collapses a byte set into `(start, len)` runs.
pub fn runs(bytes: &BTreeSet<u64>) -> Vec<(Address, u64)> {
    let mut out: Vec<(Address, u64)> = Vec::new();
    for &b in bytes {
        match out.last_mut() {
            Some((start, len)) if start.0 + *len == b => *len += 1,
            _ => out.push((Address(b), 1)),
        }
    }
    out
}

impl SnapshotVault {
    pub fn new(identity: Arc<IdentityTable>) -> Self {
        SnapshotVault {
            registry: Registry::new(identity),
            windows: Vec::new(),
            saved: 0,
        }
    }

    fn window_bytes(&self, range: Range<usize>) -> WindowBytes {
        WindowBytes::from_entries(&self.registry.register_list()[range])
    }
}

impl Kernel for SnapshotVault {
    fn register_stack(
        &mut self,
        caller_pc: Address,
        all: bool,
        frame_base: Address,
        frame_top: Address,
    ) -> Result<(), VaultException> {
        self.registry
            .register_stack(caller_pc, all, frame_base, frame_top)
    }

    fn register_memory(
        &mut self,
        caller_pc: Address,
        base: Address,
        len: u64,
        read_only: bool,
    ) -> Result<(), VaultException> {
        self.registry
            .register_memory(caller_pc, base, len, read_only)
    }

    fn register_memory_exception(
        &mut self,
        caller_pc: Address,
        base: Address,
        len: u64,
        read_only: bool,
    ) -> Result<(), VaultException> {
        self.registry
            .register_memory_exception(caller_pc, base, len, read_only)
    }

    fn unregister_stack(
        &mut self,
        mem: &mut ProcessMemory,
        caller_pc: Address,
    ) -> Result<(), VaultException> {
        self.registry.unregister_stack(mem, caller_pc)
    }

    fn start_protect(
        &mut self,
        mem: &mut ProcessMemory,
        caller_pc: Address,
    ) -> Result<(), VaultException> {
        let range = self.registry.open_window(caller_pc)?;
        let bytes = self.window_bytes(range);
        let snapshot = mem.snapshot(&runs(&bytes.restored));
        self.saved += bytes.restored.len() as u64;
        for (addr, len) in runs(&bytes.cleared) {
            mem.clear_region(addr, len)
                .expect("registered ranges are writable");
        }
        self.windows.push(snapshot);
        Ok(())
    }

    fn stop_protect(
        &mut self,
        mem: &mut ProcessMemory,
        caller_pc: Address,
    ) -> Result<(), VaultException> {
        self.registry.close_window(caller_pc)?;
        let snapshot = self.windows.pop().expect("one snapshot per open window");
        mem.restore(&snapshot);
        Ok(())
    }

    fn registry(&self) -> &Registry {
        &self.registry
    }

    fn saved_bytes(&self) -> u64 {
        self.saved
    }
}
