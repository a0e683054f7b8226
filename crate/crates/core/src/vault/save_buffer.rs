use serde::Serialize;

use crate::memory::Address;

pub type RecordId = usize;

#[derive(Clone, Debug, Serialize)]
pub struct SaveRecord {
    pub source: Address,
    pub len: u64,
    #[serde(skip)]
    data: Option<Vec<u8>>,
    reads: u32,
}

impl SaveRecord {
    pub fn is_consumed(&self) -> bool {
        self.reads > 0
    }

    /// Number of times the record was read back. Exactly one for every
    /// record of a balanced run.
    pub fn reads(&self) -> u32 {
        self.reads
    }

    pub fn is_released(&self) -> bool {
        self.data.is_none()
    }
}

/// Append-only store of saved bytes. Every record is read back once; the
/// read releases its storage.
#[derive(Clone, Debug, Default)]
pub struct SaveBuffer {
    records: Vec<SaveRecord>,
    produced_bytes: u64,
    released_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum SaveBufferError {
    #[error("save record {0} does not exist")]
    Missing(RecordId),
    #[error("save record {0} was already consumed")]
    AlreadyConsumed(RecordId),
}

impl SaveBuffer {
    pub fn push(&mut self, source: Address, data: Vec<u8>) -> RecordId {
        self.produced_bytes += data.len() as u64;
        self.records.push(SaveRecord {
            source,
            len: data.len() as u64,
            data: Some(data),
            reads: 0,
        });
        self.records.len() - 1
    }

    pub fn take(&mut self, id: RecordId) -> Result<Vec<u8>, SaveBufferError> {
        let rec = self
            .records
            .get_mut(id)
            .ok_or(SaveBufferError::Missing(id))?;
        rec.reads += 1;
        let data = rec
            .data
            .take()
            .ok_or(SaveBufferError::AlreadyConsumed(id))?;
        self.released_bytes += data.len() as u64;
        Ok(data)
    }

    /// Index of the first unconsumed record at or after `from`.
    pub fn next_unconsumed(&self, from: RecordId) -> Option<RecordId> {
        (from..self.records.len()).find(|&i| !self.records[i].is_consumed())
    }

    pub fn records(&self) -> &[SaveRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn produced_bytes(&self) -> u64 {
        self.produced_bytes
    }

    pub fn released_bytes(&self) -> u64 {
        self.released_bytes
    }

    /// Bytes currently held.
    pub fn live_bytes(&self) -> u64 {
        self.produced_bytes - self.released_bytes
    }

    /// True when every record was read exactly once and all storage was
    /// released.
    pub fn fully_drained(&self) -> bool {
        self.records.iter().all(|r| r.reads == 1) && self.produced_bytes == self.released_bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn read_exactly_once() {
        let mut buf = SaveBuffer::default();
        let a = buf.push(Address(1), vec![1, 2, 3]);
        let b = buf.push(Address(9), vec![4]);
        assert_eq!(buf.live_bytes(), 4);
        assert_eq!(buf.take(a).unwrap(), vec![1, 2, 3]);
        assert_eq!(buf.take(a), Err(SaveBufferError::AlreadyConsumed(a)));
        assert_eq!(buf.records()[a].reads(), 2);
        assert!(!buf.fully_drained());
        assert_eq!(buf.next_unconsumed(0), Some(b));
        buf.take(b).unwrap();
        assert_eq!(buf.next_unconsumed(0), None);
        assert_eq!(buf.live_bytes(), 0);
        assert_eq!(buf.take(7), Err(SaveBufferError::Missing(7)));
    }

    #[test]
    fn empty_buffer_is_drained() {
        assert!(SaveBuffer::default().fully_drained());
    }
}
