//! Cooperative execution of simulated processors.
//!
//! Each simulated processor runs as an OS thread, but exactly one thread
//! executes at any instant: the engine is owned by whichever thread holds
//! the turn and is handed back to the controller at every yield point. The
//! controller picks the next runnable processor deterministically from the
//! scheduler configuration, so a (program, config, seed) triple fully
//! determines the trace.
//!
//! Yield points are the runtime's preemption points: load misses, store
//! misses, acquire, release, barrier, join, explicit yields and
//! termination. Under the seeded-random scheduler, miss yields resume the
//! same processor without consuming randomness; schedule decisions happen
//! at synchronization points only. The DFS and round-robin schedulers
//! treat every yield point as a decision.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use parking_lot::{Condvar, Mutex};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::SimConfig;
use crate::engine::{BarrierArrival, EngineCore, Mutation};
use crate::error::{SimError, SimResult};
use crate::metrics::SimMetrics;
use crate::policy::PolicyKind;
use crate::space::{Allocation, GlobalAddr, PageId};
use crate::sync::{BarrierId, LockId, ReductionOp, ReductionValueKind, ReductionVarId};
use crate::trace::{Event, ProcessorId};

/// How the controller picks among runnable processors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchedulerConfig {
    /// Deterministic pseudo-random choice at synchronization yields; load
    /// and store misses resume the running processor.
    SeededRandom { seed: u64 },
    /// Rotate through runnable processors at every yield point.
    RoundRobin,
    /// Replay a branch script, extending with first choices; records every
    /// branch point for exhaustive exploration.
    Dfs { replay: Vec<u32> },
}

impl SchedulerConfig {
    fn yields_on_miss(&self) -> bool {
        !matches!(self, SchedulerConfig::SeededRandom { .. })
    }
}

/// One recorded branch point: `options` runnable candidates, `chosen`
/// index taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub options: u32,
    pub chosen: u32,
}

/// Why a run ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// No processor was runnable but some had not terminated.
    Deadlock(Vec<(ProcessorId, String)>),
    /// A usage error or a panic inside a simulated program.
    Error(SimError),
}

impl RunStatus {
    pub fn is_completed(&self) -> bool {
        matches!(self, RunStatus::Completed)
    }
}

/// Final authoritative memory: the union of all server stores.
#[derive(Debug, Clone)]
pub struct MemoryImage {
    page_size: u64,
    total_size: u64,
    pages: BTreeMap<PageId, Vec<u8>>,
}

impl MemoryImage {
    pub fn read(&self, addr: GlobalAddr, len: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(len as usize);
        let mut cur = addr.0;
        let end = addr.0 + len;
        assert!(end <= self.total_size, "read past end of address space");
        while cur < end {
            let page = PageId(cur / self.page_size);
            let off = (cur % self.page_size) as usize;
            let take = ((end - cur) as usize).min(self.page_size as usize - off);
            match self.pages.get(&page) {
                Some(bytes) => out.extend_from_slice(&bytes[off..off + take]),
                None => out.extend(std::iter::repeat(0).take(take)),
            }
            cur += take as u64;
        }
        out
    }

    pub fn read_u64(&self, addr: GlobalAddr) -> u64 {
        u64::from_le_bytes(self.read(addr, 8).try_into().unwrap())
    }

    pub fn read_f64(&self, addr: GlobalAddr) -> f64 {
        f64::from_bits(self.read_u64(addr))
    }
}

/// Everything a finished run reports.
#[derive(Debug)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub metrics: SimMetrics,
    pub trace: Vec<Event>,
    pub memory: MemoryImage,
    pub decisions: Vec<Decision>,
    pub proc_clock_ns: Vec<u64>,
    pub proc_store_counts: Vec<u64>,
}

impl RunOutcome {
    /// Panics with a readable message if the run did not complete.
    pub fn expect_completed(&self) -> &Self {
        match &self.status {
            RunStatus::Completed => self,
            other => panic!("run did not complete: {:?}", other),
        }
    }
}

// ---------------------------------------------------------------------------

/// Sent through a panic to unwind simulated threads when a run aborts.
struct SimAbort;

fn install_quiet_abort_hook() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        let prev = panic::take_hook();
        panic::set_hook(Box::new(move |info| {
            if info.payload().downcast_ref::<SimAbort>().is_none() {
                prev(info);
            }
        }));
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Ready,
    BlockedLock(LockId),
    BlockedBarrier(BarrierId),
    BlockedJoin(ProcessorId),
    Done,
}

struct Inner {
    engine: Option<Box<EngineCore>>,
    turn: Option<ProcessorId>,
    status: Vec<Status>,
    aborted: bool,
    failed: Option<SimError>,
    decisions: Vec<Decision>,
    replay: std::collections::VecDeque<u32>,
    rng: Option<ChaCha8Rng>,
    rr_last: Option<ProcessorId>,
    mode: SchedulerConfig,
}

struct Shared {
    inner: Mutex<Inner>,
    cv: Condvar,
}

type Body = Box<dyn FnOnce(&mut Ctx) + Send + 'static>;

/// Builds and runs one simulated machine.
pub struct MachineBuilder {
    engine: Box<EngineCore>,
    scheduler: SchedulerConfig,
    bodies: Vec<Body>,
}

impl MachineBuilder {
    pub fn new(cfg: SimConfig, policy: PolicyKind, scheduler: SchedulerConfig) -> Self {
        cfg.validate().expect("invalid config");
        Self {
            engine: Box::new(EngineCore::new(cfg, policy, Mutation::None, false)),
            scheduler,
            bodies: Vec::new(),
        }
    }

    pub fn mutation(mut self, m: Mutation) -> Self {
        self.engine.mutation = m;
        self
    }

    pub fn trace(mut self, on: bool) -> Self {
        self.engine.trace_enabled = on;
        self
    }

    /// Pre-run allocation by the harness (the resource manager).
    pub fn alloc(&mut self, length: u64) -> SimResult<Allocation> {
        self.engine.alloc(length)
    }

    /// Fixes a barrier's participant set. Processor ids are assigned in
    /// spawn/fork order starting from 0, so they are predictable.
    pub fn configure_barrier(&mut self, barrier: BarrierId, participants: &[ProcessorId]) {
        self.engine.configure_barrier(barrier, participants);
    }

    pub fn add_reduction(
        &mut self,
        addr: GlobalAddr,
        op: ReductionOp,
        kind: ReductionValueKind,
        barrier: BarrierId,
    ) -> ReductionVarId {
        self.engine.add_reduction(addr, op, kind, barrier)
    }

    /// Adds an initial processor.
    pub fn spawn(&mut self, body: impl FnOnce(&mut Ctx) + Send + 'static) -> ProcessorId {
        let id = self.engine.add_processor(None);
        self.bodies.push(Box::new(body));
        id
    }

    /// Runs the machine to completion and reports the outcome.
    pub fn run(mut self) -> RunOutcome {
        install_quiet_abort_hook();
        assert!(
            !self.bodies.is_empty(),
            "a machine needs at least one processor"
        );
        let nprocs = self.bodies.len();
        let (rng, replay) = match &self.scheduler {
            SchedulerConfig::SeededRandom { seed } => (Some(ChaCha8Rng::seed_from_u64(*seed)), Vec::new()),
            SchedulerConfig::RoundRobin => (None, Vec::new()),
            SchedulerConfig::Dfs { replay } => (None, replay.clone()),
        };
        let yields_on_miss = self.scheduler.yields_on_miss();
        let shared = Arc::new(Shared {
            inner: Mutex::new(Inner {
                engine: Some(self.engine),
                turn: None,
                status: vec![Status::Ready; nprocs],
                aborted: false,
                failed: None,
                decisions: Vec::new(),
                replay: replay.into(),
                rng,
                rr_last: None,
                mode: self.scheduler,
            }),
            cv: Condvar::new(),
        });
        let handles: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::new(Mutex::new(Vec::new()));
        let panicked = Arc::new(AtomicBool::new(false));

        for (id, body) in self.bodies.into_iter().enumerate() {
            let h = spawn_proc_thread(
                id as ProcessorId,
                shared.clone(),
                handles.clone(),
                panicked.clone(),
                yields_on_miss,
                body,
            );
            handles.lock().push(h);
        }

        let status = controller_loop(&shared);

        // All processor threads observe either their final turn or the abort
        // flag; drain and join them.
        loop {
            let h = handles.lock().pop();
            match h {
                Some(h) => {
                    let _ = h.join();
                }
                None => break,
            }
        }

        let mut inner = shared.inner.lock();
        let mut engine = inner.engine.take().expect("engine returned");
        engine.finalize_metrics();
        let status = match inner.failed.take() {
            Some(err) => RunStatus::Error(err),
            None => status,
        };
        let pages = engine
            .servers
            .iter()
            .flat_map(|s| {
                s.pages()
                    .map(|p| (p, s.read(p, engine.cfg.page_size_bytes)))
                    .collect::<Vec<_>>()
            })
            .collect();
        RunOutcome {
            status,
            metrics: engine.metrics,
            memory: MemoryImage {
                page_size: engine.cfg.page_size_bytes,
                total_size: engine.cfg.total_size_bytes,
                pages,
            },
            trace: std::mem::take(&mut engine.events),
            decisions: std::mem::take(&mut inner.decisions),
            proc_clock_ns: std::mem::take(&mut engine.proc_clock_ns),
            proc_store_counts: std::mem::take(&mut engine.proc_store_counts),
        }
    }
}

fn spawn_proc_thread(
    id: ProcessorId,
    shared: Arc<Shared>,
    handles: Arc<Mutex<Vec<JoinHandle<()>>>>,
    panicked: Arc<AtomicBool>,
    yields_on_miss: bool,
    body: Body,
) -> JoinHandle<()> {
    std::thread::Builder::new()
        .name(format!("simproc-{}", id))
        .spawn(move || {
            let mut ctx = Ctx {
                id,
                shared: shared.clone(),
                handles,
                panicked: panicked.clone(),
                engine: None,
                yields_on_miss,
            };
            let result = panic::catch_unwind(AssertUnwindSafe(|| {
                ctx.wait_first_turn();
                body(&mut ctx);
                if let Err(err) = ctx.engine().terminate(id) {
                    ctx.abort_with(err);
                }
            }));
            let mut inner = shared.inner.lock();
            if let Err(payload) = result {
                if payload.downcast_ref::<SimAbort>().is_none() {
                    // a real panic inside the simulated program
                    panicked.store(true, Ordering::SeqCst);
                    let msg = payload
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| payload.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "opaque panic payload".to_string());
                    if inner.failed.is_none() {
                        inner.failed = Some(SimError::ProgramPanic(msg));
                    }
                    inner.aborted = true;
                }
            }
            if let Some(engine) = ctx.engine.take() {
                inner.engine = Some(engine);
            }
            inner.status[id as usize] = Status::Done;
            inner.turn = None;
            shared.cv.notify_all();
        })
        .expect("spawn simulated processor thread")
}

fn controller_loop(shared: &Shared) -> RunStatus {
    let mut inner = shared.inner.lock();
    loop {
        while !(inner.turn.is_none() && inner.engine.is_some()) && !inner.aborted {
            shared.cv.wait(&mut inner);
        }
        if inner.aborted {
            // wait for the engine to come home before tearing down
            while inner.engine.is_none() {
                shared.cv.wait(&mut inner);
            }
            return RunStatus::Error(
                inner
                    .failed
                    .clone()
                    .unwrap_or(SimError::ProgramPanic("aborted".into())),
            );
        }
        let engine = inner.engine.as_ref().unwrap();
        let mut runnable: Vec<ProcessorId> = Vec::new();
        let mut all_done = true;
        for (pid, st) in inner.status.iter().enumerate() {
            let pid = pid as ProcessorId;
            let ok = match st {
                Status::Ready => true,
                Status::BlockedLock(m) => engine.lock_grantable(pid, *m),
                Status::BlockedBarrier(b) => !engine.barrier_waiting(pid, *b),
                Status::BlockedJoin(c) => engine.proc_terminated(*c),
                Status::Done => false,
            };
            if *st != Status::Done {
                all_done = false;
            }
            if ok {
                runnable.push(pid);
            }
        }
        if runnable.is_empty() {
            if all_done {
                return RunStatus::Completed;
            }
            let blocked: Vec<(ProcessorId, String)> = inner
                .status
                .iter()
                .enumerate()
                .filter(|(_, st)| !matches!(st, Status::Done))
                .map(|(pid, st)| (pid as ProcessorId, format!("{:?}", st)))
                .collect();
            inner.aborted = true;
            shared.cv.notify_all();
            while inner.engine.is_none() {
                shared.cv.wait(&mut inner);
            }
            return RunStatus::Deadlock(blocked);
        }
        let chosen = pick(&mut inner, &runnable);
        inner.turn = Some(chosen);
        shared.cv.notify_all();
    }
}

fn pick(inner: &mut Inner, runnable: &[ProcessorId]) -> ProcessorId {
    if runnable.len() == 1 {
        if matches!(inner.mode, SchedulerConfig::RoundRobin) {
            inner.rr_last = Some(runnable[0]);
        }
        return runnable[0];
    }
    match inner.mode {
        SchedulerConfig::SeededRandom { .. } => {
            let idx = inner.rng.as_mut().unwrap().gen_range(0..runnable.len());
            inner.decisions.push(Decision {
                options: runnable.len() as u32,
                chosen: idx as u32,
            });
            runnable[idx]
        }
        SchedulerConfig::RoundRobin => {
            let next = match inner.rr_last {
                Some(last) => runnable
                    .iter()
                    .copied()
                    .find(|&p| p > last)
                    .unwrap_or(runnable[0]),
                None => runnable[0],
            };
            inner.rr_last = Some(next);
            next
        }
        SchedulerConfig::Dfs { .. } => {
            let idx = match inner.replay.pop_front() {
                Some(i) => (i as usize).min(runnable.len() - 1),
                None => 0,
            };
            inner.decisions.push(Decision {
                options: runnable.len() as u32,
                chosen: idx as u32,
            });
            runnable[idx]
        }
    }
}

// ---------------------------------------------------------------------------

/// Handle a simulated program uses to act on the machine. Every method may
/// abort the run (unwinding this thread) when the program violates a
/// usage contract; the error is reported in the run outcome.
pub struct Ctx {
    id: ProcessorId,
    shared: Arc<Shared>,
    handles: Arc<Mutex<Vec<JoinHandle<()>>>>,
    panicked: Arc<AtomicBool>,
    engine: Option<Box<EngineCore>>,
    yields_on_miss: bool,
}

impl Ctx {
    pub fn id(&self) -> ProcessorId {
        self.id
    }

    fn engine(&mut self) -> &mut EngineCore {
        self.engine.as_mut().expect("engine held").as_mut()
    }

    fn wait_first_turn(&mut self) {
        let mut inner = self.shared.inner.lock();
        loop {
            if inner.aborted {
                drop(inner);
                panic::panic_any(SimAbort);
            }
            if inner.turn == Some(self.id) {
                self.engine = Some(inner.engine.take().expect("engine available"));
                return;
            }
            self.shared.cv.wait(&mut inner);
        }
    }

    /// Returns the engine to the controller, records the new status, and
    /// blocks until this processor is scheduled again.
    fn yield_turn(&mut self, status: Status) {
        let engine = self.engine.take().expect("engine held");
        let mut inner = self.shared.inner.lock();
        inner.engine = Some(engine);
        inner.status[self.id as usize] = status;
        inner.turn = None;
        self.shared.cv.notify_all();
        loop {
            if inner.aborted {
                drop(inner);
                panic::panic_any(SimAbort);
            }
            if inner.turn == Some(self.id) {
                self.engine = Some(inner.engine.take().expect("engine available"));
                return;
            }
            self.shared.cv.wait(&mut inner);
        }
    }

    fn abort_with(&mut self, err: SimError) -> ! {
        {
            let mut inner = self.shared.inner.lock();
            if let Some(engine) = self.engine.take() {
                inner.engine = Some(engine);
            }
            if inner.failed.is_none() {
                inner.failed = Some(err);
            }
            inner.aborted = true;
            self.shared.cv.notify_all();
        }
        panic::panic_any(SimAbort)
    }

    fn unwrap_sim<T>(&mut self, r: SimResult<T>) -> T {
        match r {
            Ok(v) => v,
            Err(err) => self.abort_with(err),
        }
    }

    // ---- memory ----------------------------------------------------------

    pub fn alloc(&mut self, length: u64) -> Allocation {
        let r = self.engine().alloc(length);
        self.unwrap_sim(r)
    }

    pub fn load(&mut self, addr: GlobalAddr, len: u64) -> Vec<u8> {
        let r = self.engine().load(self.id, addr, len);
        let (value, missed) = self.unwrap_sim(r);
        if missed && self.yields_on_miss {
            self.yield_turn(Status::Ready);
        }
        value
    }

    pub fn store(&mut self, addr: GlobalAddr, bytes: &[u8]) {
        let r = self.engine().store(self.id, addr, bytes);
        let missed = self.unwrap_sim(r);
        if missed && self.yields_on_miss {
            self.yield_turn(Status::Ready);
        }
    }

    pub fn load_u64(&mut self, addr: GlobalAddr) -> u64 {
        u64::from_le_bytes(self.load(addr, 8).try_into().unwrap())
    }

    pub fn store_u64(&mut self, addr: GlobalAddr, v: u64) {
        self.store(addr, &v.to_le_bytes());
    }

    pub fn load_f64(&mut self, addr: GlobalAddr) -> f64 {
        f64::from_bits(self.load_u64(addr))
    }

    pub fn store_f64(&mut self, addr: GlobalAddr, v: f64) {
        self.store_u64(addr, v.to_bits());
    }

    // ---- synchronization ---------------------------------------------------

    pub fn acquire(&mut self, lock: LockId) {
        let r = self.engine().acquire_request(self.id, lock);
        self.unwrap_sim(r);
        self.yield_turn(Status::BlockedLock(lock));
        self.engine().acquire_grant(self.id, lock);
    }

    pub fn release(&mut self, lock: LockId) {
        let r = self.engine().release(self.id, lock);
        self.unwrap_sim(r);
        self.yield_turn(Status::Ready);
    }

    pub fn barrier(&mut self, barrier: BarrierId) {
        let r = self.engine().barrier_arrive(self.id, barrier);
        match self.unwrap_sim(r) {
            BarrierArrival::Completed => self.yield_turn(Status::Ready),
            BarrierArrival::Wait => self.yield_turn(Status::BlockedBarrier(barrier)),
        }
    }

    pub fn reduce_contribute_f64(&mut self, var: ReductionVarId, v: f64) {
        let r = self.engine().reduce_contribute(self.id, var, v.to_bits());
        self.unwrap_sim(r);
    }

    pub fn reduce_contribute_u64(&mut self, var: ReductionVarId, v: u64) {
        let r = self.engine().reduce_contribute(self.id, var, v);
        self.unwrap_sim(r);
    }

    // ---- threads ----------------------------------------------------------

    pub fn fork(&mut self, body: impl FnOnce(&mut Ctx) + Send + 'static) -> ProcessorId {
        let child = self.engine().fork_child(self.id);
        {
            let mut inner = self.shared.inner.lock();
            debug_assert_eq!(inner.status.len(), child as usize);
            inner.status.push(Status::Ready);
        }
        let h = spawn_proc_thread(
            child,
            self.shared.clone(),
            self.handles.clone(),
            self.panicked.clone(),
            self.yields_on_miss,
            Box::new(body),
        );
        self.handles.lock().push(h);
        child
    }

    pub fn join(&mut self, child: ProcessorId) {
        let r = self.engine().join_validate(self.id, child);
        self.unwrap_sim(r);
        self.yield_turn(Status::BlockedJoin(child));
        self.engine().join_finish(self.id, child);
    }

    pub fn yield_now(&mut self) {
        self.yield_turn(Status::Ready);
    }
}
