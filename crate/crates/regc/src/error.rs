//! Error types shared across the simulator.

use thiserror::Error;

/// Errors raised by the simulator and its services.
///
/// `Usage` variants indicate a program driving the simulated machine
/// incorrectly (the simulated program is at fault); the remaining variants
/// indicate bad inputs to the library itself.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("address space exhausted: requested {requested} bytes, {available} free")]
    OutOfSpace { requested: u64, available: u64 },

    #[error("address {addr} (+{len}) out of bounds (size {size})")]
    OutOfBounds { addr: u64, len: u64, size: u64 },

    #[error("access at {addr} (+{len}) crosses a page boundary (page size {page_size})")]
    PageCrossing { addr: u64, len: u64, page_size: u64 },

    #[error("allocation length must be positive")]
    ZeroLengthAlloc,

    #[error("processor {proc} acquired lock {lock} reentrantly")]
    ReentrantAcquire { proc: u32, lock: u32 },

    #[error("processor {proc} released lock {lock} it does not hold")]
    ReleaseUnheld { proc: u32, lock: u32 },

    #[error("processor {proc} released lock {lock} out of span nesting order")]
    NonNestedRelease { proc: u32, lock: u32 },

    #[error("processor {proc} entered barrier {barrier} while holding a lock")]
    BarrierWhileLocked { proc: u32, barrier: u32 },

    #[error("processor {proc} is not a participant of barrier {barrier}")]
    NotAParticipant { proc: u32, barrier: u32 },

    #[error("processor {proc} contributed twice to reduction {var} in one episode")]
    DoubleContribution { proc: u32, var: u32 },

    #[error("join on unknown or already joined processor {child}")]
    BadJoin { child: u32 },

    #[error("processor {proc} terminated with {open} open span(s)")]
    OpenSpanAtExit { proc: u32, open: usize },

    #[error("simulated run deadlocked: {0}")]
    Deadlock(String),

    #[error("simulated program panicked: {0}")]
    ProgramPanic(String),

    #[error("malformed trace: {0}")]
    TraceIntegrity(String),

    #[error("litmus program error: {0}")]
    Litmus(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type SimResult<T> = Result<T, SimError>;
