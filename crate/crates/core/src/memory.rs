//! Simulated process memory.
//!
//! The address space has three disjoint regions: a read-only text region
//! holding function code spans, a heap served by a bump allocator, and a
//! downward-growing stack. Storage is sparse (4 KiB pages allocated on first
//! write); bytes that were never written read as zero.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::identity::FunctionId;

pub const TEXT_BASE: u64 = 0x0040_0000;
pub const TEXT_LIMIT: u64 = HEAP_BASE;
pub const HEAP_BASE: u64 = 0x1000_0000;
pub const HEAP_CAPACITY: u64 = 256 << 20;
pub const HEAP_LIMIT: u64 = HEAP_BASE + HEAP_CAPACITY;
pub const STACK_BASE: u64 = 0x7FFF_0000_0000;
pub const STACK_CAPACITY: u64 = 1 << 20;
pub const STACK_LIMIT: u64 = STACK_BASE - STACK_CAPACITY;

/// Saved return address and frame pointer slots at the high end of every
/// frame. Counted in the frame size, never covered by a variable.
pub const FRAME_METADATA: u64 = 16;

const PAGE_SHIFT: u32 = 12;
const PAGE_SIZE: usize = 1 << PAGE_SHIFT;
const PAGE_MASK: u64 = PAGE_SIZE as u64 - 1;

#[derive(
    Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Address(pub u64);

#[allow(clippy::should_implement_trait)]
impl Address {
    pub const fn new(value: u64) -> Self {
        Address(value)
    }

    pub const fn value(self) -> u64 {
        self.0
    }

    pub fn add(self, delta: u64) -> Address {
        Address(self.0.wrapping_add(delta))
    }

    pub fn sub(self, delta: u64) -> Address {
        Address(self.0.wrapping_sub(delta))
    }

    pub fn offset(self, delta: i64) -> Address {
        Address(self.0.wrapping_add_signed(delta))
    }

    pub fn region(self) -> Option<Region> {
        Region::of(self)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl fmt::LowerHex for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerHex::fmt(&self.0, f)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Region {
    Text,
    Heap,
    Stack,
}

impl Region {
    pub fn of(addr: Address) -> Option<Region> {
        let a = addr.0;
        if (TEXT_BASE..TEXT_LIMIT).contains(&a) {
            Some(Region::Text)
        } else if (HEAP_BASE..HEAP_LIMIT).contains(&a) {
            Some(Region::Heap)
        } else if (STACK_LIMIT..STACK_BASE).contains(&a) {
            Some(Region::Stack)
        } else {
            None
        }
    }

    pub fn bounds(self) -> (u64, u64) {
        match self {
            Region::Text => (TEXT_BASE, TEXT_LIMIT),
            Region::Heap => (HEAP_BASE, HEAP_LIMIT),
            Region::Stack => (STACK_LIMIT, STACK_BASE),
        }
    }

    /// The region wholly containing `[addr, addr + len)`, if any. An empty
    /// range belongs to the region of its start address.
    pub fn containing(addr: Address, len: u64) -> Option<Region> {
        let region = Region::of(addr)?;
        let (_, hi) = region.bounds();
        let end = addr.0.checked_add(len)?;
        (end <= hi).then_some(region)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemoryError {
    #[error("stack overflow: frame of {requested} bytes exceeds the {available} bytes left")]
    StackOverflow { requested: u64, available: u64 },
    #[error("pop on empty stack")]
    EmptyStack,
    #[error("zero-sized allocation")]
    ZeroSize,
    #[error("access of {len} bytes at {addr} is outside every mapped region")]
    OutOfRegion { addr: Address, len: u64 },
    #[error("write to read-only text at {addr}")]
    ReadOnly { addr: Address },
    #[error("heap exhausted: {requested} bytes requested")]
    HeapExhausted { requested: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackFrame {
    pub owner: FunctionId,
    /// One past the highest byte of the frame (frame-pointer bound).
    pub base: Address,
    /// Lowest byte of the frame (stack-pointer bound).
    pub top: Address,
}

impl StackFrame {
    pub fn size(&self) -> u64 {
        self.base.0 - self.top.0
    }

    pub fn contains(&self, addr: Address, len: u64) -> bool {
        addr.0 >= self.top.0
            && addr
                .0
                .checked_add(len)
                .is_some_and(|end| end <= self.base.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeapObject {
    pub base: Address,
    pub len: u64,
}

/// Saved copy of a list of memory ranges.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Snapshot {
    regions: Vec<(Address, Vec<u8>)>,
}

impl Snapshot {
    pub fn regions(&self) -> &[(Address, Vec<u8>)] {
        &self.regions
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

type Page = Box<[u8; PAGE_SIZE]>;

#[derive(Clone, Debug, Default)]
pub struct ProcessMemory {
    pages: BTreeMap<u64, Page>,
    frames: Vec<StackFrame>,
    heap: Vec<HeapObject>,
    heap_next: u64,
}

impl ProcessMemory {
    pub fn new() -> Self {
        ProcessMemory {
            heap_next: HEAP_BASE,
            ..Default::default()
        }
    }

    pub fn frames(&self) -> &[StackFrame] {
        &self.frames
    }

    pub fn heap_objects(&self) -> &[HeapObject] {
        &self.heap
    }

    /// Current stack-pointer bound: the top of the most recent frame.
    pub fn stack_top(&self) -> Address {
        self.frames.last().map_or(Address(STACK_BASE), |f| f.top)
    }

    pub fn push_frame(&mut self, owner: FunctionId, size: u64) -> Result<StackFrame, MemoryError> {
        if size == 0 {
            return Err(MemoryError::ZeroSize);
        }
        let base = self.stack_top();
        let available = base.0 - STACK_LIMIT;
        if size > available {
            return Err(MemoryError::StackOverflow {
                requested: size,
                available,
            });
        }
        let frame = StackFrame {
            owner,
            base,
            top: base.sub(size),
        };
        self.fill_raw(frame.top, size, 0);
        self.frames.push(frame.clone());
        Ok(frame)
    }

    /// Removes the most recent frame. Its bytes stay in memory.
    pub fn pop_frame(&mut self) -> Result<StackFrame, MemoryError> {
        self.frames.pop().ok_or(MemoryError::EmptyStack)
    }

    pub fn alloc(&mut self, len: u64) -> Result<HeapObject, MemoryError> {
        if len == 0 {
            return Err(MemoryError::ZeroSize);
        }
        let end = self.heap_next.checked_add(len).filter(|&e| e <= HEAP_LIMIT);
        let Some(end) = end else {
            return Err(MemoryError::HeapExhausted { requested: len });
        };
        let obj = HeapObject {
            base: Address(self.heap_next),
            len,
        };
        // keep objects 16-byte aligned
        self.heap_next = (end + 15) & !15;
        self.heap.push(obj.clone());
        Ok(obj)
    }

    pub fn read_bytes(&self, addr: Address, len: u64) -> Result<Vec<u8>, MemoryError> {
        Region::containing(addr, len).ok_or(MemoryError::OutOfRegion { addr, len })?;
        Ok(self.peek(addr, len))
    }

    pub fn write_bytes(&mut self, addr: Address, data: &[u8]) -> Result<(), MemoryError> {
        self.check_writable(addr, data.len() as u64)?;
        self.write_raw(addr, data);
        Ok(())
    }

    pub fn clear_region(&mut self, addr: Address, len: u64) -> Result<(), MemoryError> {
        self.check_writable(addr, len)?;
        self.fill_raw(addr, len, 0);
        Ok(())
    }

    fn check_writable(&self, addr: Address, len: u64) -> Result<(), MemoryError> {
        match Region::containing(addr, len) {
            Some(Region::Text) => Err(MemoryError::ReadOnly { addr }),
            Some(_) => Ok(()),
            None => Err(MemoryError::OutOfRegion { addr, len }),
        }
    }

    pub fn snapshot(&self, regions: &[(Address, u64)]) -> Snapshot {
        Snapshot {
            regions: regions.iter().map(|&(a, n)| (a, self.peek(a, n))).collect(),
        }
    }

    /// Writes every saved range back, in list order.
    pub fn restore(&mut self, snapshot: &Snapshot) {
        for (addr, data) in &snapshot.regions {
            self.write_raw(*addr, data);
        }
    }

    /// Reads without region checks.
    pub fn peek(&self, addr: Address, len: u64) -> Vec<u8> {
        let mut out = vec![0u8; len as usize];
        let mut done = 0usize;
        while done < out.len() {
            let a = addr.0.wrapping_add(done as u64);
            let off = (a & PAGE_MASK) as usize;
            let n = (PAGE_SIZE - off).min(out.len() - done);
            if let Some(page) = self.pages.get(&(a >> PAGE_SHIFT)) {
                out[done..done + n].copy_from_slice(&page[off..off + n]);
            }
            done += n;
        }
        out
    }

    pub fn peek_byte(&self, addr: Address) -> u8 {
        self.pages
            .get(&(addr.0 >> PAGE_SHIFT))
            .map_or(0, |p| p[(addr.0 & PAGE_MASK) as usize])
    }

    fn write_raw(&mut self, addr: Address, data: &[u8]) {
        let mut done = 0usize;
        while done < data.len() {
            let a = addr.0.wrapping_add(done as u64);
            let off = (a & PAGE_MASK) as usize;
            let n = (PAGE_SIZE - off).min(data.len() - done);
            let chunk = &data[done..done + n];
            match self.pages.get_mut(&(a >> PAGE_SHIFT)) {
                Some(page) => page[off..off + n].copy_from_slice(chunk),
                None if chunk.iter().all(|&b| b == 0) => {}
                None => {
                    let mut page: Page = Box::new([0u8; PAGE_SIZE]);
                    page[off..off + n].copy_from_slice(chunk);
                    self.pages.insert(a >> PAGE_SHIFT, page);
                }
            }
            done += n;
        }
    }

    fn fill_raw(&mut self, addr: Address, len: u64, value: u8) {
        let mut done = 0u64;
        while done < len {
            let a = addr.0.wrapping_add(done);
            let off = (a & PAGE_MASK) as usize;
            let n = ((PAGE_SIZE - off) as u64).min(len - done) as usize;
            match self.pages.get_mut(&(a >> PAGE_SHIFT)) {
                Some(page) => page[off..off + n].fill(value),
                None if value == 0 => {}
                None => {
                    let mut page: Page = Box::new([0u8; PAGE_SIZE]);
                    page[off..off + n].fill(value);
                    self.pages.insert(a >> PAGE_SHIFT, page);
                }
            }
            done += n as u64;
        }
    }

    /// Iterates `(address, byte)` over every non-zero byte in address order.
    pub fn nonzero_bytes(&self) -> impl Iterator<Item = (Address, u8)> + '_ {
        self.pages.iter().flat_map(|(&page, data)| {
            data.iter()
                .enumerate()
                .filter(|(_, &b)| b != 0)
                .map(move |(i, &b)| (Address((page << PAGE_SHIFT) + i as u64), b))
        })
    }

    /// SHA-256 over the non-zero bytes and their addresses.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (addr, byte) in self.nonzero_bytes() {
            hasher.update(addr.0.to_le_bytes());
            hasher.update([byte]);
        }
        hex::encode(hasher.finalize())
    }

    /// First address at which the byte contents of two memories differ.
    pub fn first_difference(&self, other: &ProcessMemory) -> Option<(Address, u8, u8)> {
        let mut keys: Vec<u64> = self
            .pages
            .keys()
            .chain(other.pages.keys())
            .copied()
            .collect();
        keys.sort_unstable();
        keys.dedup();
        for page in keys {
            let zero = [0u8; PAGE_SIZE];
            let a = self.pages.get(&page).map_or(&zero, |p| &**p);
            let b = other.pages.get(&page).map_or(&zero, |p| &**p);
            if let Some(i) = (0..PAGE_SIZE).find(|&i| a[i] != b[i]) {
                return Some((Address((page << PAGE_SHIFT) + i as u64), a[i], b[i]));
            }
        }
        None
    }

    pub fn same_contents(&self, other: &ProcessMemory) -> bool {
        self.first_difference(other).is_none()
    }
}
