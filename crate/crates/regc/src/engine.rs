//! The simulation engine: one struct owning all run state, with the
//! load/store path, the flush/invalidate/diff machinery and the
//! synchronization operations. Exactly one simulated processor drives the
//! engine at a time; the cooperative scheduler in [`crate::machine`] hands
//! it between processor threads.

use std::collections::BTreeSet;

use crate::config::SimConfig;
use crate::error::{SimError, SimResult};
use crate::metrics::SimMetrics;
use crate::policy::{
    DiffEntry, DiffLog, InvalidationOrigin, InvalidationSet, PolicyKind, SpanPayload,
};
use crate::runtime::{CacheEntry, ProcState, Span, WriteRecord};
use crate::space::{
    check_access, page_of, server_of, Allocation, Allocator, GlobalAddr, MemoryServer, PageId,
};
use crate::sync::{
    BarrierId, BarrierState, FlushLogEntry, GlobalConsistencyLog, LockId, LockState,
    ReductionOp, ReductionState, ReductionValueKind, ReductionVarId,
};
use crate::trace::{Event, EventKind, ProcessorId, RegionTag};

/// Fixed wire size of a message header (request legs, notifications).
pub const MSG_HEADER_BYTES: u64 = 24;

/// Protocol mutations used by the oracle's mutation-kill tests. Each one
/// disables exactly one rule mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    /// Lock grants stop delivering the global flush log.
    DropRule1LogDelivery,
    /// Lock grants stop delivering span payloads.
    DropRule2Payload,
    /// Barrier arrivals stop flushing ordinary dirty pages.
    DropRule3BarrierFlush,
}

impl Mutation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Mutation::None),
            "rule1" => Some(Mutation::DropRule1LogDelivery),
            "rule2" => Some(Mutation::DropRule2Payload),
            "rule3" => Some(Mutation::DropRule3BarrierFlush),
            _ => None,
        }
    }
}

/// Result of a barrier arrival.
#[derive(Debug, PartialEq, Eq)]
pub enum BarrierArrival {
    /// More participants outstanding; the caller must block.
    Wait,
    /// This arrival completed the episode; everyone may depart.
    Completed,
}

/// Where a page drop request came from, for data-movement attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    /// Delivered with a lock grant to satisfy span visibility.
    LockGrant,
    /// Everything else (flush log, barriers, joins).
    General,
}

pub struct EngineCore {
    pub cfg: SimConfig,
    pub policy: PolicyKind,
    pub mutation: Mutation,
    pub trace_enabled: bool,
    pub allocator: Allocator,
    pub servers: Vec<MemoryServer>,
    pub procs: Vec<ProcState>,
    pub locks: Vec<LockState>,
    pub barriers: Vec<BarrierState>,
    pub flush_log: GlobalConsistencyLog,
    pub reductions: Vec<ReductionState>,
    pub events: Vec<Event>,
    pub metrics: SimMetrics,
    pub proc_clock_ns: Vec<u64>,
    pub proc_store_counts: Vec<u64>,
    next_event_seq: u64,
    next_acquire_seq: u64,
    next_log_seq: u64,
    tick: u64,
}

impl EngineCore {
    pub fn new(cfg: SimConfig, policy: PolicyKind, mutation: Mutation, trace: bool) -> Self {
        let servers = (0..cfg.server_count).map(MemoryServer::new).collect();
        Self {
            allocator: Allocator::new(&cfg),
            cfg,
            policy,
            mutation,
            trace_enabled: trace,
            servers,
            procs: Vec::new(),
            locks: Vec::new(),
            barriers: Vec::new(),
            flush_log: GlobalConsistencyLog::default(),
            reductions: Vec::new(),
            events: Vec::new(),
            metrics: SimMetrics::default(),
            proc_clock_ns: Vec::new(),
            proc_store_counts: Vec::new(),
            next_event_seq: 0,
            next_acquire_seq: 0,
            next_log_seq: 0,
            tick: 0,
        }
    }

    pub fn add_processor(&mut self, parent: Option<ProcessorId>) -> ProcessorId {
        let id = self.procs.len() as ProcessorId;
        self.procs.push(ProcState::new(id, parent));
        self.proc_clock_ns.push(0);
        self.proc_store_counts.push(0);
        id
    }

    pub fn alloc(&mut self, length: u64) -> SimResult<Allocation> {
        self.allocator.alloc(length)
    }

    /// Locks and barriers auto-register on first use.
    pub fn ensure_lock(&mut self, lock: LockId) {
        while self.locks.len() <= lock.0 as usize {
            self.locks.push(LockState::default());
        }
    }

    pub fn ensure_barrier(&mut self, barrier: BarrierId) {
        while self.barriers.len() <= barrier.0 as usize {
            self.barriers.push(BarrierState::default());
        }
    }

    pub fn configure_barrier(&mut self, barrier: BarrierId, participants: &[ProcessorId]) {
        self.ensure_barrier(barrier);
        self.barriers[barrier.0 as usize].configured =
            Some(participants.iter().copied().collect());
    }

    pub fn add_reduction(
        &mut self,
        addr: GlobalAddr,
        op: ReductionOp,
        kind: ReductionValueKind,
        barrier: BarrierId,
    ) -> ReductionVarId {
        self.ensure_barrier(barrier);
        let id = ReductionVarId(self.reductions.len() as u32);
        self.reductions.push(ReductionState {
            addr,
            op,
            kind,
            barrier,
            pending: Default::default(),
        });
        id
    }

    fn emit(&mut self, processor: ProcessorId, kind: EventKind) {
        let seq = self.next_event_seq;
        self.next_event_seq += 1;
        if self.trace_enabled {
            self.events.push(Event {
                seq,
                processor,
                kind,
            });
        }
    }

    fn charge(&mut self, p: ProcessorId, ns: u64) {
        self.proc_clock_ns[p as usize] += ns;
    }

    fn page_size(&self) -> u64 {
        self.cfg.page_size_bytes
    }

    // ---- server side -----------------------------------------------------

    fn server_for(&mut self, page: PageId) -> &mut MemoryServer {
        let idx = server_of(page, self.cfg.server_count) as usize;
        &mut self.servers[idx]
    }

    fn server_page(&self, page: PageId) -> Vec<u8> {
        let idx = server_of(page, self.cfg.server_count) as usize;
        self.servers[idx].read(page, self.cfg.page_size_bytes)
    }

    /// Authoritative bytes at `addr` without any message accounting
    /// (used for post-run inspection and payload sampling).
    pub fn authoritative_read(&self, addr: GlobalAddr, len: u64) -> Vec<u8> {
        let page_size = self.cfg.page_size_bytes;
        let mut out = Vec::with_capacity(len as usize);
        let mut cur = addr.0;
        let end = addr.0 + len;
        while cur < end {
            let page = PageId(cur / page_size);
            let off = (cur % page_size) as usize;
            let take = ((end - cur) as usize).min(page_size as usize - off);
            let bytes = self.server_page(page);
            out.extend_from_slice(&bytes[off..off + take]);
            cur += take as u64;
        }
        out
    }

    // ---- cache plumbing ---------------------------------------------------

    /// Writes the given ranges of the cached page image back to its server.
    /// Accounted as one full-page write-back message.
    fn write_back(&mut self, p: ProcessorId, page: PageId, ranges: &[(u64, u64)]) {
        if ranges.is_empty() {
            return;
        }
        let image = self.procs[p as usize].cache.entries[&page].bytes.clone();
        self.server_for(page).merge(page, &image, ranges);
        let bytes = MSG_HEADER_BYTES + self.page_size();
        self.metrics.page_writebacks += 1;
        self.metrics.bytes_on_wire += bytes;
        let cost = self.cfg.cost.message_latency_ns + self.cfg.cost.per_byte_ns * bytes;
        self.charge(p, cost);
    }

    /// Drops a page from `p`'s cache, first writing back ordinary dirty
    /// ranges and any bytes written by still-open spans (those are not yet
    /// recoverable from the lock payloads).
    fn drop_page(&mut self, p: ProcessorId, page: PageId) {
        let page_size = self.page_size();
        let proc = &self.procs[p as usize];
        let Some(entry) = proc.cache.entries.get(&page) else {
            return;
        };
        let mut ranges = entry.dirty_ranges();
        ranges.extend(proc.open_span_ranges(page, page_size));
        self.write_back(p, page, &ranges);
        self.procs[p as usize].cache.entries.remove(&page);
    }

    /// Fetches `page` from its server into `p`'s cache, evicting if needed.
    fn fetch_page(&mut self, p: ProcessorId, page: PageId) {
        if self.procs[p as usize].cache.entries.len() as u64 >= self.cfg.cache_capacity_pages {
            if let Some(victim) = self.procs[p as usize].cache.lru_page() {
                self.drop_page(p, victim);
            }
        }
        let bytes = self.server_page(page);
        self.tick += 1;
        let tick = self.tick;
        self.procs[p as usize]
            .cache
            .entries
            .insert(page, CacheEntry::new(bytes, tick));

        self.metrics.page_fetches += 1;
        let wire = MSG_HEADER_BYTES + (MSG_HEADER_BYTES + self.page_size());
        self.metrics.bytes_on_wire += wire;
        let cost = 2 * self.cfg.cost.message_latency_ns + self.cfg.cost.per_byte_ns * wire;
        self.charge(p, cost);
        if self.procs[p as usize].grant_refetch.remove(&page) {
            self.metrics.lock_grant_payload_bytes += MSG_HEADER_BYTES + self.page_size();
        }

        // Simple next-page prefetch; never evicts.
        if self.cfg.prefetch_enabled {
            let next = PageId(page.0 + 1);
            let proc = &self.procs[p as usize];
            if next.0 < self.cfg.total_pages()
                && (proc.cache.entries.len() as u64) < self.cfg.cache_capacity_pages
                && !proc.cache.entries.contains_key(&next)
            {
                let bytes = self.server_page(next);
                let tick = self.tick;
                self.procs[p as usize]
                    .cache
                    .entries
                    .insert(next, CacheEntry::new(bytes, tick));
                self.metrics.page_fetches += 1;
                let wire = MSG_HEADER_BYTES + self.page_size();
                self.metrics.bytes_on_wire += wire;
                self.charge(p, self.cfg.cost.per_byte_ns * wire);
                if self.procs[p as usize].grant_refetch.remove(&next) {
                    self.metrics.lock_grant_payload_bytes += MSG_HEADER_BYTES + self.page_size();
                }
            }
        }
    }

    /// Makes sure `page` is cached; returns true if a fetch was needed.
    fn ensure_cached(&mut self, p: ProcessorId, page: PageId) -> bool {
        if self.procs[p as usize].cache.entries.contains_key(&page) {
            self.tick += 1;
            let tick = self.tick;
            self.procs[p as usize]
                .cache
                .entries
                .get_mut(&page)
                .unwrap()
                .last_use = tick;
            false
        } else {
            self.fetch_page(p, page);
            true
        }
    }

    // ---- loads and stores --------------------------------------------------

    pub fn load(&mut self, p: ProcessorId, addr: GlobalAddr, len: u64) -> SimResult<(Vec<u8>, bool)> {
        check_access(addr, len, &self.cfg)?;
        let page = page_of(addr, &self.cfg)?;
        let missed = self.ensure_cached(p, page);
        if !missed {
            self.charge(p, self.cfg.cost.cache_hit_ns);
        }
        let off = (addr.0 % self.page_size()) as usize;
        let value =
            self.procs[p as usize].cache.entries[&page].bytes[off..off + len as usize].to_vec();
        self.emit(
            p,
            EventKind::Load {
                addr,
                len,
                value: value.clone(),
            },
        );
        Ok((value, missed))
    }

    pub fn store(&mut self, p: ProcessorId, addr: GlobalAddr, value: &[u8]) -> SimResult<bool> {
        let len = value.len() as u64;
        check_access(addr, len, &self.cfg)?;
        let page = page_of(addr, &self.cfg)?;
        self.metrics.instrumented_stores += 1;
        self.proc_store_counts[p as usize] += 1;
        self.charge(p, self.cfg.cost.instrumented_store_ns);

        let missed = self.ensure_cached(p, page);
        if !missed {
            self.charge(p, self.cfg.cost.cache_hit_ns);
        }
        let off = addr.0 % self.page_size();
        let proc = &mut self.procs[p as usize];
        let entry = proc.cache.entries.get_mut(&page).unwrap();
        entry.bytes[off as usize..off as usize + value.len()].copy_from_slice(value);

        let region = if let Some(span) = proc.open_spans.last_mut() {
            // The instrumentation hook: consistent stores are tracked in the
            // innermost span's write log under either policy.
            span.write_log.push(WriteRecord {
                addr,
                bytes: value.to_vec(),
            });
            span.touched_pages.insert(page);
            RegionTag::Consistent {
                lock: span.lock,
                span_seq: span.start_seq,
            }
        } else {
            entry.mark_dirty(off, len);
            RegionTag::Ordinary
        };
        self.emit(
            p,
            EventKind::Store {
                addr,
                len,
                value: value.to_vec(),
                region,
            },
        );
        Ok(missed)
    }

    // ---- flush / invalidation / diff application ---------------------------

    /// Writes back every ordinary-dirty page of `p` and returns the set.
    pub fn flush_ordinary(&mut self, p: ProcessorId) -> BTreeSet<PageId> {
        let dirty: Vec<PageId> = self.procs[p as usize]
            .cache
            .entries
            .iter()
            .filter(|(_, e)| e.is_dirty())
            .map(|(&id, _)| id)
            .collect();
        let mut set = BTreeSet::new();
        for page in dirty {
            let ranges = self.procs[p as usize].cache.entries[&page].dirty_ranges();
            self.write_back(p, page, &ranges);
            self.procs[p as usize]
                .cache
                .entries
                .get_mut(&page)
                .unwrap()
                .clear_dirty();
            set.insert(page);
        }
        set
    }

    /// Flush and, if anything was dirty, publish to the global log.
    fn flush_and_publish(&mut self, p: ProcessorId) {
        let pages = self.flush_ordinary(p);
        if pages.is_empty() {
            return;
        }
        let log_seq = self.next_log_seq;
        self.next_log_seq += 1;
        let set = InvalidationSet {
            origin: InvalidationOrigin::OrdinaryFlush { proc: p, log_seq },
            pages: pages.clone(),
        };
        let bytes = set.serialized_bytes();
        self.metrics.bytes_on_wire += bytes;
        let cost = self.cfg.cost.message_latency_ns + self.cfg.cost.per_byte_ns * bytes;
        self.charge(p, cost);
        self.flush_log.entries.push(FlushLogEntry {
            seq: log_seq,
            origin: p,
            pages,
        });
        self.emit(p, EventKind::FlushPublish { log_seq });
    }

    /// Drops the listed pages from `p`'s cache (write-back first).
    pub fn apply_invalidations(&mut self, p: ProcessorId, pages: &BTreeSet<PageId>, reason: DropReason) {
        for &page in pages {
            if self.procs[p as usize].cache.entries.contains_key(&page) {
                self.drop_page(p, page);
                self.metrics.invalidations_applied += 1;
                if reason == DropReason::LockGrant {
                    self.procs[p as usize].grant_refetch.insert(page);
                }
            }
        }
    }

    /// Patches diff entries into `p`'s cached copies, in log order. Pages
    /// not cached need no local action; the servers already hold the data.
    pub fn apply_diffs(&mut self, p: ProcessorId, log: &DiffLog) {
        let page_size = self.page_size();
        for entry in &log.entries {
            let page = PageId(entry.addr.0 / page_size);
            let off = (entry.addr.0 % page_size) as usize;
            if let Some(cached) = self.procs[p as usize].cache.entries.get_mut(&page) {
                cached.bytes[off..off + entry.bytes.len()].copy_from_slice(&entry.bytes);
                self.metrics.diff_entries_applied += 1;
            }
        }
    }

    /// Applies the unseen suffix of the global flush log to `p`, advancing
    /// its watermark to the tail. Self-published entries are skipped (their
    /// data is already local). Returns the serialized bytes delivered.
    fn deliver_flush_log(&mut self, p: ProcessorId, apply: bool) -> u64 {
        let from = self.procs[p as usize].log_watermark;
        let tail = self.flush_log.tail();
        self.procs[p as usize].log_watermark = tail;
        let mut bytes = 0;
        for i in from..tail {
            let entry = &self.flush_log.entries[i];
            if entry.origin == p {
                continue;
            }
            let pages = entry.pages.clone();
            bytes += InvalidationSet {
                origin: InvalidationOrigin::OrdinaryFlush {
                    proc: entry.origin,
                    log_seq: entry.seq,
                },
                pages: pages.clone(),
            }
            .serialized_bytes();
            if apply {
                self.apply_invalidations(p, &pages, DropReason::General);
            }
        }
        bytes
    }

    /// Applies the unseen suffix of `lock`'s payload history to `p`,
    /// advancing its per-lock watermark. Returns serialized bytes delivered.
    fn deliver_lock_payloads(
        &mut self,
        p: ProcessorId,
        lock: LockId,
        apply: bool,
        reason: DropReason,
    ) -> u64 {
        let hist_len = self.locks[lock.0 as usize].payload_history.len();
        let from = *self.procs[p as usize]
            .lock_watermarks
            .get(&lock)
            .unwrap_or(&0);
        self.procs[p as usize].lock_watermarks.insert(lock, hist_len);
        let mut bytes = 0;
        for i in from..hist_len {
            let (origin, payload) = self.locks[lock.0 as usize].payload_history[i].clone();
            if origin == p {
                continue;
            }
            bytes += payload.serialized_bytes();
            if apply {
                match payload {
                    SpanPayload::Diffs(d) => self.apply_diffs(p, &d),
                    SpanPayload::Invalidations(s) => {
                        self.apply_invalidations(p, &s.pages, reason)
                    }
                }
            }
        }
        bytes
    }

    // ---- lock operations ----------------------------------------------------

    /// First half of an acquire: flush ordinary work, publish it, and queue
    /// behind the lock. The caller must block until the lock is grantable.
    pub fn acquire_request(&mut self, p: ProcessorId, lock: LockId) -> SimResult<()> {
        self.ensure_lock(lock);
        if self.procs[p as usize].held.contains(&lock) {
            return Err(SimError::ReentrantAcquire {
                proc: p,
                lock: lock.0,
            });
        }
        self.flush_and_publish(p);
        self.locks[lock.0 as usize].queue.push_back(p);
        self.metrics.lock_messages += 1;
        self.metrics.bytes_on_wire += MSG_HEADER_BYTES;
        self.charge(p, self.cfg.cost.message_latency_ns);
        Ok(())
    }

    pub fn lock_grantable(&self, p: ProcessorId, lock: LockId) -> bool {
        self.locks[lock.0 as usize].grantable_to(p)
    }

    /// Second half of an acquire, run once the lock is grantable: take the
    /// lock, apply the flush log, apply the lock's pending payloads, open
    /// the span.
    pub fn acquire_grant(&mut self, p: ProcessorId, lock: LockId) {
        debug_assert!(self.lock_grantable(p, lock));
        let state = &mut self.locks[lock.0 as usize];
        state.queue.pop_front();
        state.holder = Some(p);

        let acquire_seq = self.next_acquire_seq + 1;
        self.next_acquire_seq = acquire_seq;

        let apply_rule1 = self.mutation != Mutation::DropRule1LogDelivery;
        let rule1_bytes = self.deliver_flush_log(p, apply_rule1);
        debug_assert_eq!(self.procs[p as usize].log_watermark, self.flush_log.tail());

        let apply_rule2 = self.mutation != Mutation::DropRule2Payload;
        let rule2_bytes = self.deliver_lock_payloads(p, lock, apply_rule2, DropReason::LockGrant);

        let grant_bytes = MSG_HEADER_BYTES + rule1_bytes + rule2_bytes;
        self.metrics.lock_messages += 1;
        self.metrics.bytes_on_wire += grant_bytes;
        self.metrics.lock_grant_payload_bytes += rule2_bytes;
        self.charge(
            p,
            self.cfg.cost.message_latency_ns + self.cfg.cost.per_byte_ns * grant_bytes,
        );

        self.procs[p as usize].open_spans.push(Span {
            lock,
            start_seq: acquire_seq,
            write_log: Vec::new(),
            touched_pages: BTreeSet::new(),
        });
        self.procs[p as usize].held.push(lock);
        self.emit(p, EventKind::Acquire { lock, acquire_seq });
    }

    /// Closes the innermost span, builds its policy payload and frees the
    /// lock.
    pub fn release(&mut self, p: ProcessorId, lock: LockId) -> SimResult<()> {
        self.ensure_lock(lock);
        if !self.procs[p as usize].held.contains(&lock) {
            return Err(SimError::ReleaseUnheld {
                proc: p,
                lock: lock.0,
            });
        }
        if self.procs[p as usize].held.last() != Some(&lock) {
            return Err(SimError::NonNestedRelease {
                proc: p,
                lock: lock.0,
            });
        }
        self.procs[p as usize].held.pop();
        let span = self.procs[p as usize].open_spans.pop().expect("span open");
        debug_assert_eq!(span.lock, lock);

        let payload = self.build_release_payload(p, &span);
        self.procs[p as usize]
            .legacy_pages
            .extend(span.touched_pages.iter().copied());
        if let Some(payload) = payload {
            self.locks[lock.0 as usize].payload_history.push((p, payload));
        }

        self.locks[lock.0 as usize].holder = None;
        self.metrics.lock_messages += 1;
        self.metrics.bytes_on_wire += MSG_HEADER_BYTES;
        self.charge(p, self.cfg.cost.message_latency_ns);
        self.emit(p, EventKind::Release { lock });
        Ok(())
    }

    /// Policy step at release time. Fine grain: write the span's stores
    /// through to the servers and keep them as a diff log; the payload
    /// values reflect the releaser's memory at release time, entries in
    /// issue order. Page invalidation: write the touched pages back and
    /// keep their ids.
    fn build_release_payload(&mut self, p: ProcessorId, span: &Span) -> Option<SpanPayload> {
        if span.write_log.is_empty() {
            return None;
        }
        let page_size = self.page_size();
        match self.policy {
            PolicyKind::FineGrain => {
                let mut entries = Vec::with_capacity(span.write_log.len());
                for rec in &span.write_log {
                    let len = rec.bytes.len() as u64;
                    let page = PageId(rec.addr.0 / page_size);
                    let off = rec.addr.0 % page_size;
                    let bytes = match self.procs[p as usize].cache.entries.get(&page) {
                        Some(e) => e.bytes[off as usize..(off + len) as usize].to_vec(),
                        // evicted mid-span: the write-back already put the
                        // bytes on the server
                        None => self.authoritative_read(rec.addr, len),
                    };
                    entries.push(DiffEntry {
                        addr: rec.addr,
                        bytes,
                    });
                }
                let log = DiffLog {
                    origin_lock: span.lock,
                    origin_span_seq: span.start_seq,
                    entries,
                };
                // eager write-through so servers stay authoritative
                let mut server_groups = BTreeSet::new();
                let mut group_bytes = 0u64;
                for entry in &log.entries {
                    let page = PageId(entry.addr.0 / page_size);
                    let off = entry.addr.0 % page_size;
                    let bytes = entry.bytes.clone();
                    self.server_for(page).patch(page, off, &bytes, page_size);
                    server_groups.insert(server_of(page, self.cfg.server_count));
                    group_bytes += 16 + bytes.len() as u64;
                }
                let wire = MSG_HEADER_BYTES * server_groups.len() as u64 + group_bytes;
                self.metrics.bytes_on_wire += wire;
                self.charge(
                    p,
                    self.cfg.cost.message_latency_ns * server_groups.len() as u64
                        + self.cfg.cost.per_byte_ns * wire,
                );
                Some(SpanPayload::Diffs(log))
            }
            PolicyKind::PageInvalidation => {
                for &page in &span.touched_pages {
                    if self.procs[p as usize].cache.entries.contains_key(&page) {
                        let mut ranges = Vec::new();
                        for rec in &span.write_log {
                            if rec.addr.0 / page_size == page.0 {
                                ranges.push((rec.addr.0 % page_size, rec.bytes.len() as u64));
                            }
                        }
                        self.write_back(p, page, &ranges);
                    }
                    // evicted pages were written back when they were dropped
                }
                Some(SpanPayload::Invalidations(InvalidationSet {
                    origin: InvalidationOrigin::ConsistencySpan {
                        lock: span.lock,
                        span_seq: span.start_seq,
                    },
                    pages: span.touched_pages.clone(),
                }))
            }
        }
    }

    // ---- barrier operations ---------------------------------------------------

    pub fn barrier_waiting(&self, p: ProcessorId, barrier: BarrierId) -> bool {
        self.barriers[barrier.0 as usize].arrived.contains(&p)
    }

    /// One arrival. When this is the last outstanding participant the whole
    /// episode completes in this call: reductions are combined, every
    /// participant applies the full flush-log prefix and all pending lock
    /// payloads, and all departures are recorded.
    pub fn barrier_arrive(&mut self, p: ProcessorId, barrier: BarrierId) -> SimResult<BarrierArrival> {
        self.ensure_barrier(barrier);
        if !self.procs[p as usize].held.is_empty() {
            return Err(SimError::BarrierWhileLocked {
                proc: p,
                barrier: barrier.0,
            });
        }
        if self.barriers[barrier.0 as usize].effective.is_none() {
            let set = match self.barriers[barrier.0 as usize].configured.clone() {
                Some(set) => set,
                None => self
                    .procs
                    .iter()
                    .filter(|q| !q.terminated)
                    .map(|q| q.id)
                    .collect(),
            };
            self.barriers[barrier.0 as usize].effective = Some(set);
        }
        let participants = self.barriers[barrier.0 as usize].effective.clone().unwrap();
        if !participants.contains(&p) {
            return Err(SimError::NotAParticipant {
                proc: p,
                barrier: barrier.0,
            });
        }
        let episode = self.barriers[barrier.0 as usize].episode;

        if self.mutation != Mutation::DropRule3BarrierFlush {
            self.flush_and_publish(p);
        }
        self.barriers[barrier.0 as usize].arrived.insert(p);
        let complete = self.barriers[barrier.0 as usize].arrived == participants;

        if complete {
            self.combine_reductions(p, barrier, &participants);
        }
        self.emit(p, EventKind::BarrierArrive { barrier, episode });
        self.metrics.barrier_messages += 1;
        self.metrics.bytes_on_wire += MSG_HEADER_BYTES;
        self.charge(p, self.cfg.cost.message_latency_ns);

        if !complete {
            return Ok(BarrierArrival::Wait);
        }

        let reduction_result_bytes = 8 * self
            .reductions
            .iter()
            .filter(|r| r.barrier == barrier)
            .count() as u64;
        for &q in &participants {
            let rule1_bytes = self.deliver_flush_log(q, true);
            let mut payload_bytes = 0;
            for lock_idx in 0..self.locks.len() {
                payload_bytes += self.deliver_lock_payloads(
                    q,
                    LockId(lock_idx as u32),
                    true,
                    DropReason::General,
                );
            }
            let wire = MSG_HEADER_BYTES + rule1_bytes + payload_bytes + reduction_result_bytes;
            self.metrics.barrier_messages += 1;
            self.metrics.bytes_on_wire += wire;
            self.charge(
                q,
                self.cfg.cost.message_latency_ns + self.cfg.cost.per_byte_ns * wire,
            );
            self.emit(q, EventKind::BarrierDepart { barrier, episode });
        }
        let bstate = &mut self.barriers[barrier.0 as usize];
        bstate.arrived.clear();
        bstate.effective = None;
        bstate.episode += 1;
        Ok(BarrierArrival::Completed)
    }

    /// Combines every reduction bound to `barrier`; the result is written to
    /// the servers and patched into participant caches before anyone
    /// departs. The store is logged by the completing arriver, ahead of its
    /// own arrival, so it is ordered before every departure.
    fn combine_reductions(
        &mut self,
        completer: ProcessorId,
        barrier: BarrierId,
        participants: &BTreeSet<ProcessorId>,
    ) {
        let page_size = self.page_size();
        for idx in 0..self.reductions.len() {
            if self.reductions[idx].barrier != barrier {
                continue;
            }
            let Some(result) = self.reductions[idx].combine() else {
                continue;
            };
            let addr = self.reductions[idx].addr;
            self.reductions[idx].pending.clear();
            let bytes = result.to_le_bytes().to_vec();
            let page = PageId(addr.0 / page_size);
            let off = addr.0 % page_size;
            self.server_for(page).patch(page, off, &bytes, page_size);
            self.metrics.bytes_on_wire += MSG_HEADER_BYTES + 8;
            for &q in participants {
                if let Some(entry) = self.procs[q as usize].cache.entries.get_mut(&page) {
                    entry.bytes[off as usize..off as usize + 8].copy_from_slice(&bytes);
                }
            }
            self.emit(
                completer,
                EventKind::Store {
                    addr,
                    len: 8,
                    value: bytes,
                    region: RegionTag::Ordinary,
                },
            );
        }
    }

    /// Records a contribution for the next episode of the variable's
    /// barrier; no lock or page traffic.
    pub fn reduce_contribute(
        &mut self,
        p: ProcessorId,
        var: ReductionVarId,
        raw: u64,
    ) -> SimResult<()> {
        let state = &mut self.reductions[var.0 as usize];
        if state.pending.contains_key(&p) {
            return Err(SimError::DoubleContribution {
                proc: p,
                var: var.0,
            });
        }
        state.pending.insert(p, raw);
        Ok(())
    }

    // ---- fork / join / termination ----------------------------------------------

    /// Registers a forked child. The parent's ordinary work is flushed and
    /// published first, so the child's cold cache reads it from the
    /// servers; the child starts with watermarks at the current tails.
    pub fn fork_child(&mut self, parent: ProcessorId) -> ProcessorId {
        self.flush_and_publish(parent);
        let child = self.add_processor(Some(parent));
        self.procs[child as usize].log_watermark = self.flush_log.tail();
        for (idx, lock) in self.locks.iter().enumerate() {
            self.procs[child as usize]
                .lock_watermarks
                .insert(LockId(idx as u32), lock.payload_history.len());
        }
        self.emit(parent, EventKind::ForkEdge { parent, child });
        child
    }

    pub fn join_validate(&self, p: ProcessorId, child: ProcessorId) -> SimResult<()> {
        let Some(c) = self.procs.get(child as usize) else {
            return Err(SimError::BadJoin { child });
        };
        if c.parent.is_none() || c.joined || child == p {
            return Err(SimError::BadJoin { child });
        }
        Ok(())
    }

    pub fn proc_terminated(&self, p: ProcessorId) -> bool {
        self.procs[p as usize].terminated
    }

    /// Completes a join once the child has terminated: the parent applies
    /// all published flushes and drops its copies of pages the child wrote
    /// in spans, so everything the child did is visible.
    pub fn join_finish(&mut self, p: ProcessorId, child: ProcessorId) {
        debug_assert!(self.procs[child as usize].terminated);
        self.procs[child as usize].joined = true;
        self.emit(p, EventKind::JoinEdge { parent: p, child });
        self.deliver_flush_log(p, true);
        let legacy = self.procs[child as usize].legacy_pages.clone();
        self.apply_invalidations(p, &legacy, DropReason::General);
        self.procs[p as usize].legacy_pages.extend(legacy);
    }

    /// Final act of a processor: flush and publish ordinary work so final
    /// memory is authoritative at the servers.
    pub fn terminate(&mut self, p: ProcessorId) -> SimResult<()> {
        let open = self.procs[p as usize].open_spans.len();
        if open > 0 {
            return Err(SimError::OpenSpanAtExit { proc: p, open });
        }
        self.flush_and_publish(p);
        self.procs[p as usize].terminated = true;
        Ok(())
    }

    pub fn finalize_metrics(&mut self) {
        self.metrics.simulated_time_ns = self.proc_clock_ns.iter().copied().max().unwrap_or(0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine(policy: PolicyKind) -> EngineCore {
        let cfg = SimConfig {
            total_size_bytes: 64 * 4096,
            server_count: 2,
            cache_capacity_pages: 4,
            prefetch_enabled: false,
            ..SimConfig::default()
        };
        let mut e = EngineCore::new(cfg, policy, Mutation::None, true);
        e.add_processor(None);
        e.add_processor(None);
        e
    }

    #[test]
    fn read_own_write_same_processor() {
        let mut e = engine(PolicyKind::FineGrain);
        let a = e.alloc(64).unwrap();
        e.store(0, a.word(0), &7u64.to_le_bytes()).unwrap();
        let (v, _) = e.load(0, a.word(0), 8).unwrap();
        assert_eq!(u64::from_le_bytes(v.try_into().unwrap()), 7);
    }

    #[test]
    fn cold_load_counts_one_fetch_and_reads_zero() {
        let mut e = engine(PolicyKind::FineGrain);
        let a = e.alloc(64).unwrap();
        let (v, missed) = e.load(0, a.word(3), 8).unwrap();
        assert!(missed);
        assert_eq!(v, vec![0; 8]);
        assert_eq!(e.metrics.page_fetches, 1);
    }

    #[test]
    fn lru_eviction_writes_back_dirty_page() {
        let mut e = engine(PolicyKind::FineGrain);
        e.cfg.cache_capacity_pages = 1;
        let a = e.alloc(2 * 4096).unwrap();
        e.store(0, a.addr(0), &1u64.to_le_bytes()).unwrap();
        // touching the second page evicts the first (dirty) one
        e.load(0, a.addr(4096), 8).unwrap();
        assert_eq!(e.metrics.page_writebacks, 1);
        let (v, missed) = e.load(0, a.addr(0), 8).unwrap();
        assert!(missed);
        assert_eq!(u64::from_le_bytes(v.try_into().unwrap()), 1);
    }

    #[test]
    fn consistent_store_goes_to_write_log_not_dirty() {
        let mut e = engine(PolicyKind::FineGrain);
        let a = e.alloc(64).unwrap();
        e.acquire_request(0, LockId(0)).unwrap();
        e.acquire_grant(0, LockId(0));
        e.store(0, a.word(0), &5u64.to_le_bytes()).unwrap();
        let page = PageId(a.base.0 / 4096);
        assert!(!e.procs[0].cache.entries[&page].is_dirty());
        assert_eq!(e.procs[0].open_spans[0].write_log.len(), 1);
        e.release(0, LockId(0)).unwrap();
        // write-through makes the server authoritative at release
        assert_eq!(
            e.authoritative_read(a.word(0), 8),
            5u64.to_le_bytes().to_vec()
        );
    }

    #[test]
    fn flush_ordinary_returns_dirty_set_and_accounts_pages() {
        let mut e = engine(PolicyKind::FineGrain);
        let a = e.alloc(3 * 4096).unwrap();
        e.store(0, a.addr(0), &1u64.to_le_bytes()).unwrap();
        e.store(0, a.addr(4096), &2u64.to_le_bytes()).unwrap();
        let before = e.metrics.bytes_on_wire;
        let set = e.flush_ordinary(0);
        assert_eq!(set.len(), 2);
        assert_eq!(e.metrics.page_writebacks, 2);
        assert_eq!(
            e.metrics.bytes_on_wire - before,
            2 * (MSG_HEADER_BYTES + 4096)
        );
        assert!(e.flush_ordinary(0).is_empty());
    }

    #[test]
    fn invalidate_dirty_page_writes_back_before_drop() {
        let mut e = engine(PolicyKind::FineGrain);
        let a = e.alloc(64).unwrap();
        e.store(0, a.word(0), &9u64.to_le_bytes()).unwrap();
        let page = PageId(a.base.0 / 4096);
        let set: BTreeSet<PageId> = [page].into_iter().collect();
        e.apply_invalidations(0, &set, DropReason::General);
        assert!(e.procs[0].cache.entries.is_empty());
        assert_eq!(e.metrics.invalidations_applied, 1);
        let (v, _) = e.load(0, a.word(0), 8).unwrap();
        assert_eq!(u64::from_le_bytes(v.try_into().unwrap()), 9);
    }

    #[test]
    fn apply_diffs_patches_only_cached_pages() {
        let mut e = engine(PolicyKind::FineGrain);
        let a = e.alloc(2 * 4096).unwrap();
        e.load(0, a.addr(0), 8).unwrap(); // cache first page only
        let log = DiffLog {
            origin_lock: LockId(0),
            origin_span_seq: 1,
            entries: vec![
                DiffEntry {
                    addr: a.addr(0),
                    bytes: 3u64.to_le_bytes().to_vec(),
                },
                DiffEntry {
                    addr: a.addr(4096),
                    bytes: 4u64.to_le_bytes().to_vec(),
                },
            ],
        };
        e.apply_diffs(0, &log);
        assert_eq!(e.metrics.diff_entries_applied, 1);
        let (v, missed) = e.load(0, a.addr(0), 8).unwrap();
        assert!(!missed);
        assert_eq!(u64::from_le_bytes(v.try_into().unwrap()), 3);
    }

    #[test]
    fn release_payload_shapes_per_policy() {
        for (policy, expect_diff) in [(PolicyKind::FineGrain, true), (PolicyKind::PageInvalidation, false)]
        {
            let mut e = engine(policy);
            let a = e.alloc(64).unwrap();
            e.acquire_request(0, LockId(0)).unwrap();
            e.acquire_grant(0, LockId(0));
            e.store(0, a.word(1), &8u64.to_le_bytes()).unwrap();
            e.release(0, LockId(0)).unwrap();
            let (_, payload) = &e.locks[0].payload_history[0];
            match payload {
                SpanPayload::Diffs(d) => {
                    assert!(expect_diff);
                    assert_eq!(d.entries.len(), 1);
                    assert_eq!(d.serialized_bytes(), 48);
                }
                SpanPayload::Invalidations(s) => {
                    assert!(!expect_diff);
                    assert_eq!(s.pages.len(), 1);
                }
            }
        }
    }

    #[test]
    fn empty_span_appends_no_payload() {
        let mut e = engine(PolicyKind::FineGrain);
        e.acquire_request(0, LockId(0)).unwrap();
        e.acquire_grant(0, LockId(0));
        e.release(0, LockId(0)).unwrap();
        assert!(e.locks[0].payload_history.is_empty());
    }

    #[test]
    fn reentrant_acquire_and_foreign_release_are_errors() {
        let mut e = engine(PolicyKind::FineGrain);
        e.acquire_request(0, LockId(1)).unwrap();
        e.acquire_grant(0, LockId(1));
        assert!(matches!(
            e.acquire_request(0, LockId(1)),
            Err(SimError::ReentrantAcquire { .. })
        ));
        assert!(matches!(
            e.release(1, LockId(1)),
            Err(SimError::ReleaseUnheld { .. })
        ));
    }

    #[test]
    fn non_nested_release_is_an_error() {
        let mut e = engine(PolicyKind::FineGrain);
        for lock in [LockId(0), LockId(1)] {
            e.acquire_request(0, lock).unwrap();
            e.acquire_grant(0, lock);
        }
        assert!(matches!(
            e.release(0, LockId(0)),
            Err(SimError::NonNestedRelease { .. })
        ));
        e.release(0, LockId(1)).unwrap();
        e.release(0, LockId(0)).unwrap();
    }

    #[test]
    fn barrier_while_holding_lock_is_an_error() {
        let mut e = engine(PolicyKind::FineGrain);
        e.configure_barrier(BarrierId(0), &[0, 1]);
        e.acquire_request(0, LockId(0)).unwrap();
        e.acquire_grant(0, LockId(0));
        assert!(matches!(
            e.barrier_arrive(0, BarrierId(0)),
            Err(SimError::BarrierWhileLocked { .. })
        ));
    }

    #[test]
    fn watermark_syncs_to_tail_at_grant() {
        let mut e = engine(PolicyKind::FineGrain);
        let a = e.alloc(64).unwrap();
        e.store(0, a.word(0), &1u64.to_le_bytes()).unwrap();
        e.acquire_request(0, LockId(0)).unwrap(); // publishes p0's flush
        e.acquire_grant(0, LockId(0));
        e.release(0, LockId(0)).unwrap();
        e.acquire_request(1, LockId(0)).unwrap();
        e.acquire_grant(1, LockId(0));
        assert_eq!(e.procs[1].log_watermark, e.flush_log.tail());
        e.release(1, LockId(0)).unwrap();
    }

    #[test]
    fn acquire_seq_is_total_and_gapless() {
        let mut e = engine(PolicyKind::FineGrain);
        for (p, lock) in [(0u32, LockId(0)), (1, LockId(1)), (0, LockId(1))] {
            e.acquire_request(p, lock).unwrap();
            e.acquire_grant(p, lock);
            e.release(p, lock).unwrap();
        }
        let seqs: Vec<u64> = e
            .events
            .iter()
            .filter_map(|ev| match ev.kind {
                EventKind::Acquire { acquire_seq, .. } => Some(acquire_seq),
                _ => None,
            })
            .collect();
        assert_eq!(seqs, vec![1, 2, 3]);
    }

    #[test]
    fn grant_payload_delivery_patches_remote_cache() {
        let mut e = engine(PolicyKind::FineGrain);
        let a = e.alloc(64).unwrap();
        // p1 caches the page cold
        e.load(1, a.word(0), 8).unwrap();
        // p0 writes in a span
        e.acquire_request(0, LockId(0)).unwrap();
        e.acquire_grant(0, LockId(0));
        e.store(0, a.word(0), &5u64.to_le_bytes()).unwrap();
        e.release(0, LockId(0)).unwrap();
        // p1 acquires: diff applied in place, no refetch needed
        let fetches_before = e.metrics.page_fetches;
        e.acquire_request(1, LockId(0)).unwrap();
        e.acquire_grant(1, LockId(0));
        let (v, missed) = e.load(1, a.word(0), 8).unwrap();
        assert!(!missed);
        assert_eq!(e.metrics.page_fetches, fetches_before);
        assert_eq!(u64::from_le_bytes(v.try_into().unwrap()), 5);
        e.release(1, LockId(0)).unwrap();
    }

    #[test]
    fn grant_invalidation_forces_exactly_one_refetch() {
        let mut e = engine(PolicyKind::PageInvalidation);
        let a = e.alloc(64).unwrap();
        e.load(1, a.word(0), 8).unwrap();
        e.acquire_request(0, LockId(0)).unwrap();
        e.acquire_grant(0, LockId(0));
        e.store(0, a.word(0), &5u64.to_le_bytes()).unwrap();
        e.release(0, LockId(0)).unwrap();
        let fetches_before = e.metrics.page_fetches;
        e.acquire_request(1, LockId(0)).unwrap();
        e.acquire_grant(1, LockId(0));
        let (v, missed) = e.load(1, a.word(0), 8).unwrap();
        assert!(missed);
        assert_eq!(e.metrics.page_fetches, fetches_before + 1);
        assert_eq!(u64::from_le_bytes(v.try_into().unwrap()), 5);
        e.release(1, LockId(0)).unwrap();
    }

    #[test]
    fn write_through_soundness_after_release() {
        let mut e = engine(PolicyKind::FineGrain);
        let a = e.alloc(64).unwrap();
        e.acquire_request(0, LockId(0)).unwrap();
        e.acquire_grant(0, LockId(0));
        e.store(0, a.word(2), &0xabcdu64.to_le_bytes()).unwrap();
        e.release(0, LockId(0)).unwrap();
        // fresh fetch by another processor reflects the span's stores
        let (v, _) = e.load(1, a.word(2), 8).unwrap();
        assert_eq!(u64::from_le_bytes(v.try_into().unwrap()), 0xabcd);
    }

    #[test]
    fn double_contribution_is_an_error() {
        let mut e = engine(PolicyKind::FineGrain);
        let a = e.alloc(8).unwrap();
        let var = e.add_reduction(
            a.word(0),
            ReductionOp::Sum,
            ReductionValueKind::F64,
            BarrierId(0),
        );
        e.reduce_contribute(0, var, 1.0f64.to_bits()).unwrap();
        assert!(matches!(
            e.reduce_contribute(0, var, 1.0f64.to_bits()),
            Err(SimError::DoubleContribution { .. })
        ));
    }
}
