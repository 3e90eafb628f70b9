//! The per-run event trace: the evidence base the consistency oracle
//! checks, plus its text dump format (one event per line, tab-separated).

use std::fmt::Write as _;

use crate::error::{SimError, SimResult};
use crate::space::GlobalAddr;
use crate::sync::{BarrierId, LockId};

pub type ProcessorId = u32;

/// How a store was classified when it was issued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionTag {
    Ordinary,
    /// Issued inside a span of `lock`; `span_seq` is that span's global
    /// acquire sequence number.
    Consistent { lock: LockId, span_seq: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Load {
        addr: GlobalAddr,
        len: u64,
        value: Vec<u8>,
    },
    Store {
        addr: GlobalAddr,
        len: u64,
        value: Vec<u8>,
        region: RegionTag,
    },
    Acquire {
        lock: LockId,
        acquire_seq: u64,
    },
    Release {
        lock: LockId,
    },
    BarrierArrive {
        barrier: BarrierId,
        episode: u64,
    },
    BarrierDepart {
        barrier: BarrierId,
        episode: u64,
    },
    /// Emitted by the parent when it spawns `child`; orders everything the
    /// parent did before the fork ahead of the child's first action.
    ForkEdge {
        parent: ProcessorId,
        child: ProcessorId,
    },
    /// Emitted by the parent when a join completes; orders everything the
    /// child ever did ahead of the parent's subsequent actions.
    JoinEdge {
        parent: ProcessorId,
        child: ProcessorId,
    },
    /// An ordinary flush appended to the global consistency log.
    FlushPublish {
        log_seq: u64,
    },
}

/// One record of the totally ordered run trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    /// Global delivery index, strictly increasing over the run.
    pub seq: u64,
    pub processor: ProcessorId,
    pub kind: EventKind,
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{:02x}", b);
    }
    s
}

fn unhex(s: &str) -> SimResult<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(SimError::TraceIntegrity(format!("odd hex literal '{}'", s)));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|_| SimError::TraceIntegrity(format!("bad hex literal '{}'", s)))
        })
        .collect()
}

impl Event {
    pub fn dump_line(&self) -> String {
        let head = format!("{}\t{}", self.seq, self.processor);
        match &self.kind {
            EventKind::Load { addr, len, value } => {
                format!("{}\tload\t{}\t{}\t{}", head, addr.0, len, hex(value))
            }
            EventKind::Store {
                addr,
                len,
                value,
                region,
            } => match region {
                RegionTag::Ordinary => {
                    format!("{}\tstore\t{}\t{}\t{}\tordinary", head, addr.0, len, hex(value))
                }
                RegionTag::Consistent { lock, span_seq } => format!(
                    "{}\tstore\t{}\t{}\t{}\tconsistent\t{}\t{}",
                    head,
                    addr.0,
                    len,
                    hex(value),
                    lock.0,
                    span_seq
                ),
            },
            EventKind::Acquire { lock, acquire_seq } => {
                format!("{}\tacquire\t{}\t{}", head, lock.0, acquire_seq)
            }
            EventKind::Release { lock } => format!("{}\trelease\t{}", head, lock.0),
            EventKind::BarrierArrive { barrier, episode } => {
                format!("{}\tbarrier-arrive\t{}\t{}", head, barrier.0, episode)
            }
            EventKind::BarrierDepart { barrier, episode } => {
                format!("{}\tbarrier-depart\t{}\t{}", head, barrier.0, episode)
            }
            EventKind::ForkEdge { parent, child } => {
                format!("{}\tfork\t{}\t{}", head, parent, child)
            }
            EventKind::JoinEdge { parent, child } => {
                format!("{}\tjoin\t{}\t{}", head, parent, child)
            }
            EventKind::FlushPublish { log_seq } => format!("{}\tflush-publish\t{}", head, log_seq),
        }
    }

    pub fn parse_line(line: &str) -> SimResult<Event> {
        let fields: Vec<&str> = line.split('\t').collect();
        let integrity = |msg: &str| SimError::TraceIntegrity(format!("{}: '{}'", msg, line));
        if fields.len() < 3 {
            return Err(integrity("too few fields"));
        }
        let num = |s: &str| -> SimResult<u64> {
            s.parse::<u64>()
                .map_err(|_| SimError::TraceIntegrity(format!("bad number '{}' in '{}'", s, line)))
        };
        let seq = num(fields[0])?;
        let processor = num(fields[1])? as ProcessorId;
        let need = |n: usize| -> SimResult<()> {
            if fields.len() != n {
                Err(integrity("wrong field count"))
            } else {
                Ok(())
            }
        };
        let kind = match fields[2] {
            "load" => {
                need(6)?;
                EventKind::Load {
                    addr: GlobalAddr(num(fields[3])?),
                    len: num(fields[4])?,
                    value: unhex(fields[5])?,
                }
            }
            "store" => {
                if fields.len() < 7 {
                    return Err(integrity("wrong field count"));
                }
                let region = match fields[6] {
                    "ordinary" => {
                        need(7)?;
                        RegionTag::Ordinary
                    }
                    "consistent" => {
                        need(9)?;
                        RegionTag::Consistent {
                            lock: LockId(num(fields[7])? as u32),
                            span_seq: num(fields[8])?,
                        }
                    }
                    other => return Err(SimError::TraceIntegrity(format!("bad region tag '{}'", other))),
                };
                EventKind::Store {
                    addr: GlobalAddr(num(fields[3])?),
                    len: num(fields[4])?,
                    value: unhex(fields[5])?,
                    region,
                }
            }
            "acquire" => {
                need(5)?;
                EventKind::Acquire {
                    lock: LockId(num(fields[3])? as u32),
                    acquire_seq: num(fields[4])?,
                }
            }
            "release" => {
                need(4)?;
                EventKind::Release {
                    lock: LockId(num(fields[3])? as u32),
                }
            }
            "barrier-arrive" => {
                need(5)?;
                EventKind::BarrierArrive {
                    barrier: BarrierId(num(fields[3])? as u32),
                    episode: num(fields[4])?,
                }
            }
            "barrier-depart" => {
                need(5)?;
                EventKind::BarrierDepart {
                    barrier: BarrierId(num(fields[3])? as u32),
                    episode: num(fields[4])?,
                }
            }
            "fork" => {
                need(5)?;
                EventKind::ForkEdge {
                    parent: num(fields[3])? as ProcessorId,
                    child: num(fields[4])? as ProcessorId,
                }
            }
            "join" => {
                need(5)?;
                EventKind::JoinEdge {
                    parent: num(fields[3])? as ProcessorId,
                    child: num(fields[4])? as ProcessorId,
                }
            }
            "flush-publish" => {
                need(4)?;
                EventKind::FlushPublish {
                    log_seq: num(fields[3])?,
                }
            }
            other => return Err(SimError::TraceIntegrity(format!("unknown event kind '{}'", other))),
        };
        Ok(Event {
            seq,
            processor,
            kind,
        })
    }
}

/// Serializes a trace to its dump format.
pub fn dump(events: &[Event]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&e.dump_line());
        out.push('\n');
    }
    out
}

/// Parses a dump produced by [`dump`]. Blank lines are ignored.
pub fn parse(text: &str) -> SimResult<Vec<Event>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(Event::parse_line)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn golden_lines() {
        let e = Event {
            seq: 5,
            processor: 1,
            kind: EventKind::Store {
                addr: GlobalAddr(128),
                len: 8,
                value: vec![0xf3, 0, 0, 0, 0, 0, 0, 0],
                region: RegionTag::Consistent {
                    lock: LockId(2),
                    span_seq: 9,
                },
            },
        };
        assert_eq!(
            e.dump_line(),
            "5\t1\tstore\t128\t8\tf300000000000000\tconsistent\t2\t9"
        );
        assert_eq!(Event::parse_line(&e.dump_line()).unwrap(), e);
    }

    #[test]
    fn rejects_malformed() {
        assert!(Event::parse_line("1\t0").is_err());
        assert!(Event::parse_line("1\t0\tnope\t1").is_err());
        assert!(Event::parse_line("x\t0\trelease\t1").is_err());
    }

    fn arb_event() -> impl Strategy<Value = Event> {
        let value = proptest::collection::vec(any::<u8>(), 1..9);
        let kind = prop_oneof![
            (0u64..10_000, 1u64..9, value.clone()).prop_map(|(a, l, v)| EventKind::Load {
                addr: GlobalAddr(a),
                len: l,
                value: v,
            }),
            (0u64..10_000, 1u64..9, value, any::<bool>(), 0u32..4, 0u64..50).prop_map(
                |(a, l, v, ord, lock, span)| EventKind::Store {
                    addr: GlobalAddr(a),
                    len: l,
                    value: v,
                    region: if ord {
                        RegionTag::Ordinary
                    } else {
                        RegionTag::Consistent {
                            lock: LockId(lock),
                            span_seq: span,
                        }
                    },
                }
            ),
            (0u32..4, 0u64..100).prop_map(|(l, s)| EventKind::Acquire {
                lock: LockId(l),
                acquire_seq: s,
            }),
            (0u32..4).prop_map(|l| EventKind::Release { lock: LockId(l) }),
            (0u32..4, 0u64..9).prop_map(|(b, ep)| EventKind::BarrierArrive {
                barrier: BarrierId(b),
                episode: ep,
            }),
            (0u32..4, 0u64..9).prop_map(|(b, ep)| EventKind::BarrierDepart {
                barrier: BarrierId(b),
                episode: ep,
            }),
            (0u32..4, 0u32..8).prop_map(|(p, c)| EventKind::ForkEdge { parent: p, child: c }),
            (0u32..4, 0u32..8).prop_map(|(p, c)| EventKind::JoinEdge { parent: p, child: c }),
            (0u64..900).prop_map(|s| EventKind::FlushPublish { log_seq: s }),
        ];
        (0u64..100_000, 0u32..8, kind).prop_map(|(seq, processor, kind)| Event {
            seq,
            processor,
            kind,
        })
    }

    proptest! {
        #[test]
        fn dump_parse_round_trip(events in proptest::collection::vec(arb_event(), 0..40)) {
            let text = dump(&events);
            let back = parse(&text).unwrap();
            prop_assert_eq!(back, events);
        }
    }
}
