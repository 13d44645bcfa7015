//! Deterministic scheduling of lock-based VM threads.
//!
//! The master runs threads in rounds. Each round every runnable thread
//! gets a fresh copy of shared memory and runs for at most one quantum;
//! the master then merges all threads in id order and serves their
//! synchronization requests. Virtual time is the round number.
//!
//! Mutexes live in shared memory as `(owner, locked)` word pairs. A thread
//! that owns an unlocked mutex takes it without involving the master.
//! Anything else is a request: the thread stops with the request encoded
//! in its Ret code and the master completes the call for it, returning to
//! the caller's link register. An unlocked mutex that another thread asks
//! for changes owner at the boundary.
//!
//! Library routines set r15 to their entry on the way in and clear it on
//! the way out. A thread preempted with r15 set is either moved past the
//! routine, when its commit store has landed, or rolled back to the entry.
//!
//! Guest conventions: r5 and r6 carry arguments, r1 the result, r11 the
//! return address, r14 the thread id; r7 and r8 are scratch.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::guestvm::{assemble_symbols, AsmError, Assembled, RegisterFile};
use crate::kernel::abi::{CODE_BASE, STACK_SIZE, STACK_TOP};
use crate::kernel::{pages, Reason, SysError, SyscallArgs, TaskCtx};

pub const DEFAULT_QUANTUM: u64 = 10_000_000;
/// Mutexes and condition variables per scheduler.
pub const MAX_OBJECTS: u32 = 256;
/// Bytes of shared memory the mutex table takes at the start of the
/// shared region.
pub const TABLE_BYTES: u32 = MAX_OBJECTS * 8;

/// Budget for a thread restarting at a library entry after rollback, so
/// quanta shorter than a routine still make progress.
pub const ROUTINE_BUDGET: u64 = 32;

const OP_LOCK: u32 = 1;
const OP_UNLOCK: u32 = 2;
const OP_WAIT: u32 = 3;
const OP_SIGNAL: u32 = 4;
const OP_BROADCAST: u32 = 5;
const OP_JOIN_ANY: u32 = 6;

#[derive(Debug, Error)]
pub enum DschedError {
    #[error(transparent)]
    Sys(#[from] SysError),
    #[error(transparent)]
    Asm(#[from] AsmError),
    #[error("vt {vt}: thread {tid} write/write conflict at {addr:#010x}")]
    Conflict { vt: u64, tid: u32, addr: u32 },
    #[error("vt {vt}: every live thread is blocked")]
    Deadlock { vt: u64 },
    #[error("no label `{0}` in the program")]
    NoLabel(String),
    #[error("shared region must hold the {TABLE_BYTES}-byte mutex table")]
    SharedTooSmall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SyncOp {
    /// Mutex handed to the thread by the scheduler.
    Lock,
    /// Request for a held mutex; the thread sleeps.
    Block,
    Wait,
    Signal,
    /// Signal or broadcast with nobody waiting.
    SignalNone,
    Broadcast,
    Wake,
    JoinAny,
    Exit,
    /// Unlock or wait by a thread that does not hold the mutex.
    NotHolder,
    Rollback,
}

impl SyncOp {
    pub fn name(self) -> &'static str {
        match self {
            SyncOp::Lock => "lock",
            SyncOp::Block => "block",
            SyncOp::Wait => "wait",
            SyncOp::Signal => "signal",
            SyncOp::SignalNone => "signal_none",
            SyncOp::Broadcast => "broadcast",
            SyncOp::Wake => "wake",
            SyncOp::JoinAny => "join_any",
            SyncOp::Exit => "exit",
            SyncOp::NotHolder => "not_holder",
            SyncOp::Rollback => "rollback",
        }
    }
}

/// One synchronization event: `vt tid op obj`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub vt: u64,
    pub tid: u32,
    pub op: SyncOp,
    pub obj: u32,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {}",
            self.vt,
            self.tid,
            self.op.name(),
            self.obj
        )
    }
}

/// Waiters ordered by (virtual enqueue time, thread id).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WaitQueue(Vec<(u64, u32)>);

impl WaitQueue {
    pub fn push(&mut self, vt: u64, tid: u32) {
        let at = self.0.partition_point(|&e| e <= (vt, tid));
        self.0.insert(at, (vt, tid));
    }

    pub fn pop(&mut self) -> Option<(u64, u32)> {
        (!self.0.is_empty()).then(|| self.0.remove(0))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }
}

/// The guest synchronization library for a mutex table at `table`.
pub fn library(table: u32) -> String {
    let req = |op: u32| op << 24;
    format!(
        "
.equ SYNC_TABLE, {table:#x}
mutex_lock:
    LI r15, mutex_lock
    LI r7, 8
    MUL r7, r5, r7
    LI r8, SYNC_TABLE
    ADD r7, r7, r8
    LD r8, 0(r7)
    BNE r8, r14, mutex_lock_slow
    LD r8, 4(r7)
    BNE r8, r0, mutex_lock_slow
    LI r8, 1
    ST r8, 4(r7)
    LI r15, 0
    JR r11
mutex_lock_slow:
    LI r2, {lock:#x}
    OR r2, r2, r5
    LI r1, 2
    SYS
    HALT
mutex_unlock:
    LI r15, mutex_unlock
    LI r7, 8
    MUL r7, r5, r7
    LI r8, SYNC_TABLE
    ADD r7, r7, r8
    LD r8, 0(r7)
    BNE r8, r14, mutex_unlock_slow
    LD r8, 4(r7)
    BEQ r8, r0, mutex_unlock_slow
    ST r0, 4(r7)
    LI r15, 0
    JR r11
mutex_unlock_slow:
    LI r2, {unlock:#x}
    OR r2, r2, r5
    LI r1, 2
    SYS
    HALT
cond_wait:
    LI r15, cond_wait
    LI r7, 12
    SHL r2, r5, r7
    OR r2, r2, r6
    LI r7, {wait:#x}
    OR r2, r2, r7
    LI r1, 2
    SYS
    HALT
cond_signal:
    LI r15, cond_signal
    LI r2, {signal:#x}
    OR r2, r2, r5
    LI r1, 2
    SYS
    HALT
cond_broadcast:
    LI r15, cond_broadcast
    LI r2, {broadcast:#x}
    OR r2, r2, r5
    LI r1, 2
    SYS
    HALT
join_any:
    LI r15, join_any
    LI r2, {join:#x}
    LI r1, 2
    SYS
    HALT
",
        lock = req(OP_LOCK),
        unlock = req(OP_UNLOCK),
        wait = req(OP_WAIT),
        signal = req(OP_SIGNAL),
        broadcast = req(OP_BROADCAST),
        join = req(OP_JOIN_ANY),
    )
}

/// A thread program linked with the sync library, loaded at
/// [`CODE_BASE`].
#[derive(Debug, Clone)]
pub struct DetProgram {
    pub image: Assembled,
    pub table: u32,
}

impl DetProgram {
    pub fn new(source: &str, table: u32) -> Result<Self, DschedError> {
        let full = format!("{source}\n{}", library(table));
        Ok(DetProgram {
            image: assemble_symbols(&full, CODE_BASE)?,
            table,
        })
    }

    fn label(&self, name: &str) -> Result<u32, DschedError> {
        self.image
            .label(name)
            .ok_or_else(|| DschedError::NoLabel(name.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum TState {
    Runnable,
    /// Waiting for a mutex.
    Mutex,
    /// Waiting on a condition variable, then for the mutex.
    Cond,
    JoinAny,
    Done(u32),
}

#[derive(Debug, Clone)]
struct Thread {
    regs: RegisterFile,
    state: TState,
    /// Registers to install at the next start.
    reset: bool,
    rolled_back: bool,
    finished_at: Option<u64>,
}

/// Result of a scheduled run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DetReport {
    pub trace: Vec<TraceEvent>,
    pub rounds: u64,
    /// Exit code of every thread, by id.
    pub exits: BTreeMap<u32, u32>,
    /// Requests the master served.
    pub requests: u64,
}

impl DetReport {
    pub fn trace_text(&self) -> String {
        self.trace.iter().map(|e| format!("{e}\n")).collect()
    }
}

/// Round-based scheduler run from a host-task master.
#[derive(Debug)]
pub struct DetScheduler {
    program: DetProgram,
    shared: (u32, u64),
    quantum: u64,
    first_child: u32,
    threads: Vec<Thread>,
    mutex_waiters: BTreeMap<u32, WaitQueue>,
    // Condition variable -> waiters and the mutex each must reacquire.
    cond_waiters: BTreeMap<u32, (WaitQueue, BTreeMap<u32, u32>)>,
    joined: Vec<u32>,
    vt: u64,
    report: DetReport,
}

impl DetScheduler {
    /// The mutex table occupies the first [`TABLE_BYTES`] of the shared
    /// region and must be at `program.table`.
    pub fn new(
        program: DetProgram,
        shared_base: u32,
        shared_len: u64,
    ) -> Result<Self, DschedError> {
        if shared_len < TABLE_BYTES as u64 || program.table != shared_base {
            return Err(DschedError::SharedTooSmall);
        }
        Ok(DetScheduler {
            program,
            shared: (shared_base, shared_len),
            quantum: DEFAULT_QUANTUM,
            first_child: 1,
            threads: Vec::new(),
            mutex_waiters: BTreeMap::new(),
            cond_waiters: BTreeMap::new(),
            joined: Vec::new(),
            vt: 0,
            report: DetReport::default(),
        })
    }

    pub fn quantum(mut self, q: u64) -> Self {
        self.quantum = q.max(1);
        self
    }

    pub fn first_child(mut self, n: u32) -> Self {
        self.first_child = n;
        self
    }

    /// Adds a thread starting at `label` with the given argument
    /// registers. Thread ids follow creation order.
    pub fn spawn(&mut self, label: &str, args: &[(u8, u32)]) -> Result<u32, DschedError> {
        let tid = self.threads.len() as u32;
        let mut regs = RegisterFile::new(self.program.label(label)?)
            .with(14, tid)
            .with(13, STACK_TOP);
        for &(r, v) in args {
            regs.set(r, v);
        }
        self.threads.push(Thread {
            regs,
            state: TState::Runnable,
            reset: true,
            rolled_back: false,
            finished_at: None,
        });
        Ok(tid)
    }

    fn number(&self, tid: u32) -> u32 {
        self.first_child + tid
    }

    fn event(&mut self, tid: u32, op: SyncOp, obj: u32) {
        self.report.trace.push(TraceEvent {
            vt: self.vt,
            tid,
            op,
            obj,
        });
    }

    fn mutex(&self, ctx: &TaskCtx, m: u32) -> (u32, u32) {
        let at = self.program.table + m * 8;
        (ctx.read_u32(at), ctx.read_u32(at + 4))
    }

    fn set_mutex(&self, ctx: &TaskCtx, m: u32, owner: u32, locked: u32) {
        let at = self.program.table + m * 8;
        ctx.write_u32(at, owner);
        ctx.write_u32(at + 4, locked);
    }

    /// Completes a library call: return to the caller with `r1 = result`.
    fn finish_call(&mut self, tid: u32, result: Option<u32>) {
        let t = &mut self.threads[tid as usize];
        t.regs.pc = t.regs.get(11);
        t.regs.set(15, 0);
        if let Some(r) = result {
            t.regs.set(1, r);
        }
        t.reset = true;
        t.state = TState::Runnable;
    }

    /// Runs every thread to completion. The caller has loaded shared
    /// memory; the code is loaded here.
    pub async fn run(&mut self, ctx: &TaskCtx) -> Result<DetReport, DschedError> {
        let code = &self.program.image.code;
        let code_len = pages(code.len() as u64);
        ctx.map_zero(CODE_BASE, code_len)?;
        ctx.write(CODE_BASE, code);
        for tid in 0..self.threads.len() as u32 {
            let n = self.number(tid);
            ctx.put(SyscallArgs::put(n).copy(CODE_BASE, CODE_BASE, code_len))
                .await?;
            ctx.put(SyscallArgs::put(n).zero(STACK_TOP - STACK_SIZE, STACK_SIZE as u64))
                .await?;
        }
        let lock_entry = self.program.label("mutex_lock")?;
        let unlock_entry = self.program.label("mutex_unlock")?;
        let (at, len) = self.shared;
        loop {
            let runnable: Vec<u32> = (0..self.threads.len() as u32)
                .filter(|&t| self.threads[t as usize].state == TState::Runnable)
                .collect();
            if runnable.is_empty() {
                if self
                    .threads
                    .iter()
                    .all(|t| matches!(t.state, TState::Done(_)))
                {
                    break;
                }
                return Err(DschedError::Deadlock { vt: self.vt });
            }
            for &t in &runnable {
                let th = &mut self.threads[t as usize];
                let mut args = SyscallArgs::put(self.first_child + t);
                if th.reset {
                    args = args.regs(th.regs);
                    th.reset = false;
                }
                let limit = if th.rolled_back {
                    self.quantum.max(ROUTINE_BUDGET)
                } else {
                    self.quantum
                };
                th.rolled_back = false;
                ctx.put(args.copy(at, at, len).snap().start().limit(limit))
                    .await?;
            }
            let mut stops = Vec::with_capacity(runnable.len());
            for &t in &runnable {
                let st = ctx
                    .get(
                        SyscallArgs::get(self.number(t))
                            .merge(at, at, len)
                            .want_regs(),
                    )
                    .await?;
                if st.reason == Reason::Conflict {
                    return Err(DschedError::Conflict {
                        vt: self.vt,
                        tid: t,
                        addr: st.code,
                    });
                }
                stops.push((t, st));
            }
            // Preempted library calls settle before any request is served,
            // so a request cannot take a mutex out from under a finished
            // unlock.
            let mut requests = Vec::new();
            for (t, st) in stops {
                let regs = st.regs.expect("asked for registers");
                self.threads[t as usize].regs = regs;
                match st.reason {
                    Reason::InsnLimit => {
                        let marker = regs.get(15);
                        if marker == 0 {
                            continue;
                        }
                        let (owner, locked) = self.mutex(ctx, regs.get(5) % MAX_OBJECTS);
                        let committed = (marker == lock_entry && owner == t && locked == 1)
                            || (marker == unlock_entry && owner == t && locked == 0);
                        if committed {
                            self.finish_call(t, None);
                        } else {
                            let th = &mut self.threads[t as usize];
                            th.regs.pc = marker;
                            th.reset = true;
                            th.rolled_back = true;
                            self.event(t, SyncOp::Rollback, marker);
                        }
                    }
                    Reason::Ret => requests.push((t, st.code)),
                    _ => {
                        let code = if st.reason == Reason::Halt {
                            regs.get(1)
                        } else {
                            0x100 | st.reason.code()
                        };
                        let th = &mut self.threads[t as usize];
                        th.state = TState::Done(code);
                        th.finished_at = Some(self.vt);
                        self.report.exits.insert(t, code);
                        self.event(t, SyncOp::Exit, code);
                    }
                }
            }
            for (t, code) in requests {
                self.report.requests += 1;
                self.request(ctx, t, code);
            }
            self.hand_off(ctx);
            self.vt += 1;
        }
        self.report.rounds = self.vt;
        Ok(std::mem::take(&mut self.report))
    }

    fn request(&mut self, ctx: &TaskCtx, t: u32, code: u32) {
        let op = code >> 24;
        let obj = code & 0xFFF;
        match op {
            OP_LOCK => {
                let (_, locked) = self.mutex(ctx, obj);
                if locked == 0 {
                    self.set_mutex(ctx, obj, t, 1);
                    self.event(t, SyncOp::Lock, obj);
                    self.finish_call(t, None);
                } else {
                    self.mutex_waiters.entry(obj).or_default().push(self.vt, t);
                    self.threads[t as usize].state = TState::Mutex;
                    self.event(t, SyncOp::Block, obj);
                }
            }
            OP_UNLOCK => self.not_holder(t, obj),
            OP_WAIT => {
                let (c, m) = ((code >> 12) & 0xFFF, obj);
                let (owner, locked) = self.mutex(ctx, m);
                if owner != t || locked == 0 {
                    return self.not_holder(t, m);
                }
                self.set_mutex(ctx, m, t, 0);
                let (q, mutexes) = self.cond_waiters.entry(c).or_default();
                q.push(self.vt, t);
                mutexes.insert(t, m);
                self.threads[t as usize].state = TState::Cond;
                self.event(t, SyncOp::Wait, c);
            }
            OP_SIGNAL | OP_BROADCAST => {
                let all = op == OP_BROADCAST;
                let mut woke = Vec::new();
                if let Some((q, mutexes)) = self.cond_waiters.get_mut(&obj) {
                    while let Some((_, w)) = q.pop() {
                        woke.push((w, mutexes.remove(&w).expect("waiter has a mutex")));
                        if !all {
                            break;
                        }
                    }
                }
                let op_name = match (all, woke.is_empty()) {
                    (_, true) => SyncOp::SignalNone,
                    (true, false) => SyncOp::Broadcast,
                    (false, false) => SyncOp::Signal,
                };
                self.event(t, op_name, obj);
                for (w, m) in woke {
                    self.mutex_waiters.entry(m).or_default().push(self.vt, w);
                    self.threads[w as usize].state = TState::Mutex;
                    self.event(w, SyncOp::Wake, obj);
                }
                self.finish_call(t, None);
            }
            OP_JOIN_ANY => {
                self.threads[t as usize].state = TState::JoinAny;
            }
            _ => self.not_holder(t, obj),
        }
    }

    fn not_holder(&mut self, t: u32, obj: u32) {
        let th = &mut self.threads[t as usize];
        th.state = TState::Done(u32::MAX);
        th.finished_at = Some(self.vt);
        self.report.exits.insert(t, u32::MAX);
        self.event(t, SyncOp::NotHolder, obj);
    }

    /// Boundary work after all requests: unlocked mutexes go to their first
    /// waiter, and join_any callers collect finished threads.
    fn hand_off(&mut self, ctx: &TaskCtx) {
        let ms: Vec<u32> = self.mutex_waiters.keys().copied().collect();
        for m in ms {
            let (_, locked) = self.mutex(ctx, m);
            if locked != 0 {
                continue;
            }
            if let Some((_, w)) = self.mutex_waiters.get_mut(&m).and_then(WaitQueue::pop) {
                self.set_mutex(ctx, m, w, 1);
                self.event(w, SyncOp::Lock, m);
                self.finish_call(w, None);
            }
        }
        for t in 0..self.threads.len() as u32 {
            if self.threads[t as usize].state != TState::JoinAny {
                continue;
            }
            let next = (0..self.threads.len() as u32)
                .filter(|&o| o != t && !self.joined.contains(&o))
                .filter_map(|o| self.threads[o as usize].finished_at.map(|vt| (vt, o)))
                .min();
            if let Some((_, o)) = next {
                self.joined.push(o);
                self.event(t, SyncOp::JoinAny, o);
                self.finish_call(t, Some(o));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wait_queue_orders_by_time_then_tid() {
        let mut q = WaitQueue::default();
        q.push(3, 0);
        q.push(1, 7);
        q.push(2, 1);
        q.push(1, 2);
        assert_eq!(q.pop(), Some((1, 2)));
        assert_eq!(q.pop(), Some((1, 7)));
        assert_eq!(q.pop(), Some((2, 1)));
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn library_assembles() {
        let p = DetProgram::new("start: HALT", 0x1000_0000).unwrap();
        for l in [
            "mutex_lock",
            "mutex_unlock",
            "cond_wait",
            "cond_signal",
            "cond_broadcast",
            "join_any",
            "start",
        ] {
            assert!(p.image.label(l).is_some(), "{l}");
        }
        assert_eq!(p.image.label("start"), Some(CODE_BASE));
    }

    #[test]
    fn routines_fit_the_rollback_budget() {
        let p = DetProgram::new("", 0x1000_0000).unwrap();
        let end = CODE_BASE + p.image.code.len() as u32;
        let mut entries: Vec<u32> = [
            "mutex_lock",
            "mutex_unlock",
            "cond_wait",
            "cond_signal",
            "cond_broadcast",
            "join_any",
        ]
        .iter()
        .map(|l| p.image.label(l).unwrap())
        .collect();
        entries.sort();
        entries.push(end);
        for w in entries.windows(2) {
            assert!(((w[1] - w[0]) / 8) as u64 <= ROUTINE_BUDGET);
        }
    }

    #[test]
    fn trace_format() {
        let e = TraceEvent {
            vt: 4,
            tid: 1,
            op: SyncOp::Lock,
            obj: 0,
        };
        assert_eq!(e.to_string(), "4 1 lock 0");
    }
}
