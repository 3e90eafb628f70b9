//! Per-processor runtime state: the page cache with LRU write-back
//! eviction, open span tracking, and the watermarks that record which
//! published updates this processor has already applied.

use std::collections::{BTreeMap, BTreeSet};

use crate::space::{GlobalAddr, PageId};
use crate::sync::{LockId, ReductionVarId};
use crate::trace::ProcessorId;

/// One store issued inside a span, as issued.
#[derive(Debug, Clone)]
pub struct WriteRecord {
    pub addr: GlobalAddr,
    pub bytes: Vec<u8>,
}

/// One executing instance of a consistency region on one processor.
#[derive(Debug, Clone)]
pub struct Span {
    pub lock: LockId,
    /// Global acquire sequence number; totally orders span starts.
    pub start_seq: u64,
    pub write_log: Vec<WriteRecord>,
    pub touched_pages: BTreeSet<PageId>,
}

/// A cached page. `dirty` holds coalesced page-relative byte ranges
/// written by ordinary stores since the last flush; span-written bytes are
/// tracked by the owning span's write log instead.
#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub bytes: Vec<u8>,
    dirty: BTreeMap<u64, u64>, // start -> end, non-overlapping, coalesced
    pub last_use: u64,
}

impl CacheEntry {
    pub fn new(bytes: Vec<u8>, tick: u64) -> Self {
        Self {
            bytes,
            dirty: BTreeMap::new(),
            last_use: tick,
        }
    }

    pub fn is_dirty(&self) -> bool {
        !self.dirty.is_empty()
    }

    pub fn mark_dirty(&mut self, start: u64, len: u64) {
        let (mut s, mut e) = (start, start + len);
        // merge with any overlapping or adjacent existing ranges
        let overlapping: Vec<u64> = self
            .dirty
            .range(..=e)
            .filter(|(_, &end)| end >= s)
            .map(|(&st, _)| st)
            .collect();
        for st in overlapping {
            let end = self.dirty.remove(&st).unwrap();
            s = s.min(st);
            e = e.max(end);
        }
        self.dirty.insert(s, e);
    }

    pub fn clear_dirty(&mut self) {
        self.dirty.clear();
    }

    pub fn dirty_ranges(&self) -> Vec<(u64, u64)> {
        self.dirty.iter().map(|(&s, &e)| (s, e - s)).collect()
    }
}

/// LRU page cache with a fixed capacity in pages.
#[derive(Debug, Default)]
pub struct PageCache {
    pub entries: BTreeMap<PageId, CacheEntry>,
}

impl PageCache {
    /// Least-recently-used page, ties broken by page id.
    pub fn lru_page(&self) -> Option<PageId> {
        self.entries
            .iter()
            .min_by_key(|(id, e)| (e.last_use, id.0))
            .map(|(&id, _)| id)
    }
}

/// The full per-processor runtime state.
#[derive(Debug)]
pub struct ProcState {
    pub id: ProcessorId,
    pub parent: Option<ProcessorId>,
    pub cache: PageCache,
    /// Open spans, innermost last.
    pub open_spans: Vec<Span>,
    /// Locks held, acquisition order (spans nest LIFO).
    pub held: Vec<LockId>,
    /// Pages written by this processor's closed spans (and, transitively,
    /// by joined children); invalidated at the parent on join.
    pub legacy_pages: BTreeSet<PageId>,
    /// Applied prefix of the global consistency log.
    pub log_watermark: usize,
    /// Applied prefix of each lock's payload history.
    pub lock_watermarks: BTreeMap<LockId, usize>,
    /// Pages whose next fetch is billed to lock-grant data movement.
    pub grant_refetch: BTreeSet<PageId>,
    pub reduction_episode: BTreeMap<ReductionVarId, u64>,
    pub terminated: bool,
    pub joined: bool,
}

impl ProcState {
    pub fn new(id: ProcessorId, parent: Option<ProcessorId>) -> Self {
        Self {
            id,
            parent,
            cache: PageCache::default(),
            open_spans: Vec::new(),
            held: Vec::new(),
            legacy_pages: BTreeSet::new(),
            log_watermark: 0,
            lock_watermarks: BTreeMap::new(),
            grant_refetch: BTreeSet::new(),
            reduction_episode: BTreeMap::new(),
            terminated: false,
            joined: false,
        }
    }

    pub fn in_span(&self) -> bool {
        !self.open_spans.is_empty()
    }

    /// Byte ranges of `page` written by currently open spans; these must
    /// survive an eviction or invalidation of the page.
    pub fn open_span_ranges(&self, page: PageId, page_size: u64) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        for span in &self.open_spans {
            for rec in &span.write_log {
                if rec.addr.0 / page_size == page.0 {
                    out.push((rec.addr.0 % page_size, rec.bytes.len() as u64));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dirty_ranges_coalesce() {
        let mut e = CacheEntry::new(vec![0; 64], 0);
        e.mark_dirty(8, 8);
        e.mark_dirty(16, 8); // adjacent
        e.mark_dirty(40, 4);
        assert_eq!(e.dirty_ranges(), vec![(8, 16), (40, 4)]);
        e.mark_dirty(20, 24); // bridges both
        assert_eq!(e.dirty_ranges(), vec![(8, 36)]);
    }

    #[test]
    fn lru_tie_breaks_by_page_id() {
        let mut c = PageCache::default();
        c.entries.insert(PageId(5), CacheEntry::new(vec![], 3));
        c.entries.insert(PageId(2), CacheEntry::new(vec![], 3));
        c.entries.insert(PageId(7), CacheEntry::new(vec![], 9));
        assert_eq!(c.lru_page(), Some(PageId(2)));
    }
}
