use std::sync::Arc;

use super::{Kernel, RegisterEntry, Registry, SaveBuffer, VaultException};
use crate::identity::IdentityTable;
use crate::memory::{Address, ProcessMemory, StackFrame};

/// Kernel state that saves protected data in a [`SaveBuffer`].
///
/// `start_protect` copies every newly registered object into the buffer,
/// then clears frames and writable objects and puts exception regions back.
/// `stop_protect` reassembles each frame in a temporary buffer from the saved
/// copy (or the live frame when only parts of it were registered), overlays
/// saved objects, keeps whatever the untrusted callee wrote into writable
/// exception regions, and writes the frame back in one piece.
#[derive(Clone, Debug)]
pub struct VaultState {
    registry: Registry,
    save_buffer: SaveBuffer,
    /// First save record of each open window, parallel to the ProtectList.
    save_marks: Vec<usize>,
    diagnostics: Vec<String>,
}

impl VaultState {
    pub fn new(identity: Arc<IdentityTable>) -> Self {
        VaultState {
            registry: Registry::new(identity),
            save_buffer: SaveBuffer::default(),
            save_marks: Vec::new(),
            diagnostics: Vec::new(),
        }
    }

    pub fn save_buffer(&self) -> &SaveBuffer {
        &self.save_buffer
    }

    pub fn register_list(&self) -> &[RegisterEntry] {
        self.registry.register_list()
    }

    pub fn protect_list(&self) -> &[super::ProtectEntry] {
        self.registry.protect_list()
    }

    /// Non-fatal oddities seen while restoring, such as a memory entry with
    /// no stack entry ahead of it in the window.
    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    /// Consumes the next pending record for `[source, +len)` at or after
    /// `cursor`. Records of one window are produced and consumed in the same
    /// order, so the match is normally the first unconsumed record.
    fn take_next(&mut self, cursor: &mut usize, source: Address, len: u64) -> Option<Vec<u8>> {
        let records = self.save_buffer.records();
        let id = (*cursor..records.len()).find(|&i| {
            !records[i].is_consumed() && records[i].source == source && records[i].len == len
        });
        let Some(id) = id else {
            self.diagnostics.push(format!(
                "no pending save record for [{source}, +{len}); left as is"
            ));
            return None;
        };
        *cursor = id + 1;
        Some(
            self.save_buffer
                .take(id)
                .expect("record checked unconsumed"),
        )
    }
}

fn read(mem: &ProcessMemory, addr: Address, len: u64) -> Vec<u8> {
    mem.read_bytes(addr, len)
        .expect("registered ranges are mapped")
}

fn write(mem: &mut ProcessMemory, addr: Address, data: &[u8]) {
    mem.write_bytes(addr, data)
        .expect("registered ranges are writable")
}

fn clear(mem: &mut ProcessMemory, addr: Address, len: u64) {
    mem.clear_region(addr, len)
        .expect("registered ranges are writable")
}

impl Kernel for VaultState {
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
        self.save_marks.push(self.save_buffer.len());
        let entries = self.registry.register_list()[range].to_vec();

        // pass 1: save
        let mut exception_records = Vec::new();
        let mut saved = 0;
        for entry in &entries {
            match *entry {
                RegisterEntry::Stack {
                    frame_base,
                    frame_top,
                    all,
                    ..
                } => {
                    if all {
                        let size = frame_base.0 - frame_top.0;
                        self.save_buffer.push(frame_top, read(mem, frame_top, size));
                        saved += size;
                    }
                }
                RegisterEntry::Memory { base, len, .. } => {
                    self.save_buffer.push(base, read(mem, base, len));
                    saved += len;
                }
                RegisterEntry::MemoryException { base, len, .. } => {
                    exception_records.push(self.save_buffer.push(base, read(mem, base, len)));
                    saved += len;
                }
            }
        }

        // pass 2: clear, then put exception regions back
        let mut cleared = 0;
        let mut restored = 0;
        let mut exception_records = exception_records.into_iter();
        for entry in &entries {
            match *entry {
                RegisterEntry::Stack {
                    frame_base,
                    frame_top,
                    all,
                    ..
                } => {
                    if all {
                        let size = frame_base.0 - frame_top.0;
                        clear(mem, frame_top, size);
                        cleared += size;
                    }
                }
                RegisterEntry::Memory {
                    base,
                    len,
                    read_only,
                    ..
                } => {
                    if !read_only {
                        clear(mem, base, len);
                        cleared += len;
                    }
                }
                RegisterEntry::MemoryException { base, .. } => {
                    let id = exception_records
                        .next()
                        .expect("one record per exception entry");
                    let data = self.save_buffer.take(id).expect("fresh record");
                    write(mem, base, &data);
                    restored += data.len() as u64;
                }
            }
        }

        let stats = self.registry.stats_mut();
        stats.bytes_saved += saved;
        stats.bytes_cleared += cleared;
        stats.bytes_restored += restored;
        Ok(())
    }

    fn stop_protect(
        &mut self,
        mem: &mut ProcessMemory,
        caller_pc: Address,
    ) -> Result<(), VaultException> {
        let range = self.registry.close_window(caller_pc)?;
        let mut cursor = self
            .save_marks
            .pop()
            .expect("one save mark per open window");
        let entries = self.registry.register_list()[range].to_vec();

        let mut temp: Vec<u8> = Vec::new();
        let mut frame: Option<StackFrame> = None;
        let mut restored = 0;
        for entry in &entries {
            match *entry {
                RegisterEntry::Stack {
                    owner,
                    frame_base,
                    frame_top,
                    all,
                } => {
                    if let Some(prev) = frame.take() {
                        write(mem, prev.top, &temp);
                        restored += temp.len() as u64;
                    }
                    let size = frame_base.0 - frame_top.0;
                    temp = match all {
                        true => self.take_next(&mut cursor, frame_top, size),
                        false => None,
                    }
                    .unwrap_or_else(|| read(mem, frame_top, size));
                    frame = Some(StackFrame {
                        owner,
                        base: frame_base,
                        top: frame_top,
                    });
                }
                RegisterEntry::Memory { base, len, .. } => {
                    let Some(data) = self.take_next(&mut cursor, base, len) else {
                        continue;
                    };
                    match &frame {
                        Some(f) if f.contains(base, len) => {
                            let off = (base.0 - f.top.0) as usize;
                            temp[off..off + data.len()].copy_from_slice(&data);
                        }
                        _ => {
                            if frame.is_none() {
                                self.diagnostics
                                    .push(format!("memory entry [{base}, +{len}) precedes any stack entry in its window"));
                            }
                            write(mem, base, &data);
                            restored += len;
                        }
                    }
                }
                RegisterEntry::MemoryException {
                    base,
                    len,
                    read_only,
                    ..
                } => {
                    // read-only regions keep the saved frame bytes
                    if read_only {
                        continue;
                    }
                    if let Some(f) = frame.as_ref().filter(|f| f.contains(base, len)) {
                        let off = (base.0 - f.top.0) as usize;
                        temp[off..off + len as usize].copy_from_slice(&read(mem, base, len));
                    }
                }
            }
        }
        if let Some(f) = frame {
            write(mem, f.top, &temp);
            restored += temp.len() as u64;
        }
        self.registry.stats_mut().bytes_restored += restored;
        Ok(())
    }

    fn registry(&self) -> &Registry {
        &self.registry
    }

    fn saved_bytes(&self) -> u64 {
        self.save_buffer.produced_bytes()
    }
}
