//! Function identity from program-counter values.
//!
//! Each named function owns a half-open span of text addresses. Because the
//! text region is immutable and user code cannot choose its own PC, the span
//! containing a PC is an identity the caller cannot forge.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{Address, TEXT_BASE, TEXT_LIMIT};

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FunctionId(pub u32);

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunctionSpan {
    pub name: String,
    pub lo: Address,
    /// Exclusive.
    pub hi: Address,
    pub id: FunctionId,
}

impl FunctionSpan {
    pub fn contains(&self, pc: Address) -> bool {
        self.lo <= pc && pc < self.hi
    }

    pub fn len(&self) -> u64 {
        self.hi.0 - self.lo.0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("span of `{second}` overlaps span of `{first}`")]
    Overlap { first: String, second: String },
    #[error("span of `{name}` lies outside the text region")]
    OutsideText { name: String },
    #[error("span of `{name}` is empty")]
    EmptySpan { name: String },
    #[error("function `{name}` listed twice")]
    DuplicateName { name: String },
}

/// Immutable table of function spans. `FunctionId` is the position of the
/// span in load order.
#[derive(Clone, Debug, Default)]
pub struct IdentityTable {
    spans: Vec<FunctionSpan>,
    by_name: HashMap<String, FunctionId>,
    /// Span indices sorted by `lo`.
    by_addr: Vec<usize>,
}

impl IdentityTable {
    pub fn from_spans<I, S>(spans: I) -> Result<Self, IdentityError>
    where
        I: IntoIterator<Item = (S, Address, Address)>,
        S: Into<String>,
    {
        let mut table = IdentityTable::default();
        for (name, lo, hi) in spans {
            let name = name.into();
            if lo >= hi {
                return Err(IdentityError::EmptySpan { name });
            }
            if lo.0 < TEXT_BASE || hi.0 > TEXT_LIMIT {
                return Err(IdentityError::OutsideText { name });
            }
            if table.by_name.contains_key(&name) {
                return Err(IdentityError::DuplicateName { name });
            }
            let id = FunctionId(table.spans.len() as u32);
            table.by_name.insert(name.clone(), id);
            table.spans.push(FunctionSpan { name, lo, hi, id });
        }
        let mut order: Vec<usize> = (0..table.spans.len()).collect();
        order.sort_by_key(|&i| table.spans[i].lo);
        for w in order.windows(2) {
            let (a, b) = (&table.spans[w[0]], &table.spans[w[1]]);
            if b.lo < a.hi {
                return Err(IdentityError::Overlap {
                    first: a.name.clone(),
                    second: b.name.clone(),
                });
            }
        }
        table.by_addr = order;
        Ok(table)
    }

    /// Parses an image map: one `name lo hi` line per function, hex
    /// addresses, `#` comments and blank lines ignored.
    pub fn load_image_map(source: &str) -> Result<Self, IdentityError> {
        let mut spans = Vec::new();
        for (i, raw) in source.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| IdentityError::Parse {
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, lo, hi] = fields[..] else {
                return Err(parse_err(format!("expected `name lo hi`, found `{line}`")));
            };
            let lo = parse_hex(lo).map_err(parse_err)?;
            let hi = parse_hex(hi).map_err(parse_err)?;
            spans.push((name.to_string(), Address(lo), Address(hi)));
        }
        Self::from_spans(spans)
    }

    /// Lays functions out back to back starting at `TEXT_BASE + 0x1000`,
    /// each span rounded up to a multiple of 0x100 bytes.
    pub fn synthesize<'a, I>(functions: I) -> Result<Self, IdentityError>
    where
        I: IntoIterator<Item = (&'a str, u64)>,
    {
        let mut next = TEXT_BASE + 0x1000;
        let mut spans = Vec::new();
        for (name, min_len) in functions {
            let len = min_len.max(1).div_ceil(0x100) * 0x100;
            spans.push((name.to_string(), Address(next), Address(next + len)));
            next += len;
        }
        Self::from_spans(spans)
    }

    pub fn to_image_map(&self) -> String {
        self.spans
            .iter()
            .map(|s| format!("{} {:#x} {:#x}\n", s.name, s.lo.0, s.hi.0))
            .collect()
    }

    pub fn resolve(&self, pc: Address) -> Option<FunctionId> {
        // last span whose lo <= pc
        let pos = self.by_addr.partition_point(|&i| self.spans[i].lo <= pc);
        let span = &self.spans[*self.by_addr.get(pos.checked_sub(1)?)?];
        span.contains(pc).then_some(span.id)
    }

    pub fn id_of(&self, name: &str) -> Option<FunctionId> {
        self.by_name.get(name).copied()
    }

    pub fn span(&self, id: FunctionId) -> Option<&FunctionSpan> {
        self.spans.get(id.0 as usize)
    }

    pub fn name(&self, id: FunctionId) -> Option<&str> {
        self.span(id).map(|s| s.name.as_str())
    }

    pub fn spans(&self) -> &[FunctionSpan] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

fn parse_hex(s: &str) -> Result<u64, String> {
    let digits = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .unwrap_or(s);
    let digits = digits.replace('_', "");
    u64::from_str_radix(&digits, 16).map_err(|e| format!("bad address `{s}`: {e}"))
}
