//! The two coherence policies and their update payloads.
//!
//! A closed span produces either a fine-grain diff log (the exact bytes
//! stored inside the span) or the set of pages it touched, to be
//! invalidated at the next acquirer. Serialized sizes use a fixed wire
//! layout so byte accounting is exact: 24-byte payload header, 16 bytes
//! per diff entry header, 8 bytes per page id.

use std::collections::BTreeSet;

use crate::space::{GlobalAddr, PageId};
use crate::sync::LockId;

pub const PAYLOAD_HEADER_BYTES: u64 = 24;
pub const DIFF_ENTRY_HEADER_BYTES: u64 = 16;
pub const PAGE_ID_BYTES: u64 = 8;

/// Which update policy a run uses, fixed for the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    /// Whole-page invalidation for both region kinds.
    PageInvalidation,
    /// Fine-grain diffs for consistency regions, page invalidation for
    /// ordinary regions.
    FineGrain,
}

impl PolicyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::PageInvalidation => "page",
            PolicyKind::FineGrain => "finegrain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "page" => Some(PolicyKind::PageInvalidation),
            "finegrain" => Some(PolicyKind::FineGrain),
            _ => None,
        }
    }
}

/// One fine-grain update: the bytes a consistent store wrote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffEntry {
    pub addr: GlobalAddr,
    pub bytes: Vec<u8>,
}

/// Ordered fine-grain updates from one span, identified by its origin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffLog {
    pub origin_lock: LockId,
    pub origin_span_seq: u64,
    pub entries: Vec<DiffEntry>,
}

impl DiffLog {
    pub fn serialized_bytes(&self) -> u64 {
        PAYLOAD_HEADER_BYTES
            + self
                .entries
                .iter()
                .map(|e| DIFF_ENTRY_HEADER_BYTES + e.bytes.len() as u64)
                .sum::<u64>()
    }
}

/// Who produced an invalidation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvalidationOrigin {
    /// Ordinary-region flush published by a processor (global log entry).
    OrdinaryFlush { proc: u32, log_seq: u64 },
    /// Pages touched by a closed consistency span.
    ConsistencySpan { lock: LockId, span_seq: u64 },
}

/// Dirty-page identifiers to drop from a receiving cache.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvalidationSet {
    pub origin: InvalidationOrigin,
    pub pages: BTreeSet<PageId>,
}

impl InvalidationSet {
    pub fn serialized_bytes(&self) -> u64 {
        PAYLOAD_HEADER_BYTES + PAGE_ID_BYTES * self.pages.len() as u64
    }
}

/// Payload accumulated on a lock by one span's release.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpanPayload {
    Diffs(DiffLog),
    Invalidations(InvalidationSet),
}

impl SpanPayload {
    pub fn serialized_bytes(&self) -> u64 {
        match self {
            SpanPayload::Diffs(d) => d.serialized_bytes(),
            SpanPayload::Invalidations(s) => s.serialized_bytes(),
        }
    }

    /// Processor that released the originating span, when known.
    pub fn origin_proc(&self) -> Option<u32> {
        match self {
            SpanPayload::Diffs(_) => None,
            SpanPayload::Invalidations(s) => match s.origin {
                InvalidationOrigin::OrdinaryFlush { proc, .. } => Some(proc),
                InvalidationOrigin::ConsistencySpan { .. } => None,
            },
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            SpanPayload::Diffs(d) => d.entries.is_empty(),
            SpanPayload::Invalidations(s) => s.pages.is_empty(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diff_log_serialized_size() {
        let log = DiffLog {
            origin_lock: LockId(0),
            origin_span_seq: 1,
            entries: vec![DiffEntry {
                addr: GlobalAddr(0),
                bytes: vec![0; 8],
            }],
        };
        // one 8-byte entry: 8 + 16 + 24
        assert_eq!(log.serialized_bytes(), 48);
        let empty = DiffLog {
            origin_lock: LockId(0),
            origin_span_seq: 1,
            entries: vec![],
        };
        assert_eq!(empty.serialized_bytes(), 24);
    }

    #[test]
    fn invalidation_set_serialized_size() {
        let set = InvalidationSet {
            origin: InvalidationOrigin::ConsistencySpan {
                lock: LockId(0),
                span_seq: 1,
            },
            pages: [PageId(1), PageId(2), PageId(3)].into_iter().collect(),
        };
        // 3 pages: 24 + 24
        assert_eq!(set.serialized_bytes(), 48);
    }
}
