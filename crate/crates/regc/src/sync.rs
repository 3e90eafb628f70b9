//! Synchronization service state owned by the resource manager: the global
//! lock table with FIFO queues, barrier episodes, the append-only ordinary
//! flush log that realizes consistency for ordinary stores, and reduction
//! variables combined at barriers.
//!
//! The operations themselves live on [`crate::engine::EngineCore`]; this
//! module holds the data types.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::policy::SpanPayload;
use crate::space::{GlobalAddr, PageId};
use crate::trace::ProcessorId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LockId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BarrierId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReductionVarId(pub u32);

/// One mutex lock: holder, FIFO wait queue, and the policy payloads of its
/// closed spans in release order. Acquirers consume the history suffix they
/// have not applied yet, tracked by a per-processor watermark.
#[derive(Debug, Default)]
pub struct LockState {
    pub holder: Option<ProcessorId>,
    pub queue: VecDeque<ProcessorId>,
    pub payload_history: Vec<(ProcessorId, SpanPayload)>,
}

impl LockState {
    /// The head of the queue may take a free lock; FIFO order is strict.
    pub fn grantable_to(&self, p: ProcessorId) -> bool {
        self.holder.is_none() && self.queue.front() == Some(&p)
    }
}

/// One barrier: the configured participant set (or, by default, all live
/// processors at the first arrival of an episode) and the arrivals of the
/// current episode.
#[derive(Debug, Default)]
pub struct BarrierState {
    pub configured: Option<BTreeSet<ProcessorId>>,
    pub effective: Option<BTreeSet<ProcessorId>>,
    pub episode: u64,
    pub arrived: BTreeSet<ProcessorId>,
}

/// An entry of the global consistency log: one published ordinary flush.
#[derive(Debug, Clone)]
pub struct FlushLogEntry {
    pub seq: u64,
    pub origin: ProcessorId,
    pub pages: BTreeSet<PageId>,
}

/// Centralized append-only log of ordinary flushes. Every lock grant (and
/// every barrier departure and join) synchronizes the caller's watermark
/// with the tail, which is what makes ordinary stores visible before any
/// span may start.
#[derive(Debug, Default)]
pub struct GlobalConsistencyLog {
    pub entries: Vec<FlushLogEntry>,
}

impl GlobalConsistencyLog {
    pub fn tail(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReductionOp {
    Sum,
    Max,
    Min,
}

/// How contribution bits are interpreted when combining.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReductionValueKind {
    F64,
    U64,
}

/// A runtime-combined accumulator bound to a barrier. Contributions are
/// collected locally with no lock or page traffic and merged in ascending
/// processor order when the barrier episode completes, so the result is
/// bitwise reproducible.
#[derive(Debug)]
pub struct ReductionState {
    pub addr: GlobalAddr,
    pub op: ReductionOp,
    pub kind: ReductionValueKind,
    pub barrier: BarrierId,
    /// Raw 8-byte contributions per processor for the current episode.
    pub pending: BTreeMap<ProcessorId, u64>,
}

impl ReductionState {
    /// Combines pending contributions in ascending processor order.
    pub fn combine(&self) -> Option<u64> {
        let mut it = self.pending.values().copied();
        let first = it.next()?;
        Some(match self.kind {
            ReductionValueKind::F64 => {
                let mut acc = f64::from_bits(first);
                for bits in it {
                    let v = f64::from_bits(bits);
                    acc = match self.op {
                        ReductionOp::Sum => acc + v,
                        ReductionOp::Max => acc.max(v),
                        ReductionOp::Min => acc.min(v),
                    };
                }
                acc.to_bits()
            }
            ReductionValueKind::U64 => {
                let mut acc = first;
                for v in it {
                    acc = match self.op {
                        ReductionOp::Sum => acc.wrapping_add(v),
                        ReductionOp::Max => acc.max(v),
                        ReductionOp::Min => acc.min(v),
                    };
                }
                acc
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduction_combines_in_fixed_order() {
        let mut r = ReductionState {
            addr: GlobalAddr(0),
            op: ReductionOp::Sum,
            kind: ReductionValueKind::F64,
            barrier: BarrierId(0),
            pending: BTreeMap::new(),
        };
        for p in 0..4u32 {
            r.pending.insert(p, 1.0f64.to_bits());
        }
        assert_eq!(f64::from_bits(r.combine().unwrap()), 4.0);

        r.op = ReductionOp::Max;
        r.kind = ReductionValueKind::U64;
        r.pending.clear();
        for (p, v) in [(0u32, 3u64), (1, u64::MAX - 2), (2, 7)] {
            // interpret as signed-ish test values via plain u64 max
            r.pending.insert(p, v);
        }
        assert_eq!(r.combine().unwrap(), u64::MAX - 2);
    }

    #[test]
    fn empty_reduction_combines_to_none() {
        let r = ReductionState {
            addr: GlobalAddr(0),
            op: ReductionOp::Sum,
            kind: ReductionValueKind::U64,
            barrier: BarrierId(0),
            pending: BTreeMap::new(),
        };
        assert!(r.combine().is_none());
    }

    #[test]
    fn fifo_grantability() {
        let mut l = LockState::default();
        l.queue.push_back(3);
        l.queue.push_back(1);
        assert!(l.grantable_to(3));
        assert!(!l.grantable_to(1));
        l.holder = Some(3);
        l.queue.pop_front();
        assert!(!l.grantable_to(1));
    }
}
