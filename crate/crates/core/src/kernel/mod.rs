//! The space hierarchy, the Put/Get/Ret calls and the executors.
//!
//! Every space runs on at most one worker at a time. Cross-space effects
//! happen only inside Put and Get, and only once the child (and, for
//! Tree, the subtrees involved) has stopped, so the result of every call is
//! a function of the two participants' states. The serial executor runs
//! spaces in FIFO order with a fixed time slice; the parallel executor
//! runs several workers that pick runnable spaces and slice lengths from a
//! seeded generator. Both produce the same output.

pub mod abi;
pub mod host;
pub mod iolog;
mod space;
mod vmcall;

use std::collections::{BTreeMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::task::{Context, Poll, Waker};

use parking_lot::{Condvar, Mutex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster::{Cluster, MessageReport, Topology};
use crate::guestvm::{Cpu, GuestMemory, RegisterFile, StopReason, Trap, TrapKind};
use crate::memimg::{merge, page_span, AccessFault, MemoryImage, PAGE_SIZE};

pub use abi::{
    Call, ChildStatus, Options, Reason, Reply, Request, SysError, SysResult, SyscallArgs,
};
pub use host::{GuestExit, GuestFuture, HostRegistry, TaskCtx};
pub use iolog::{InputLog, Record, SystemOutput};

use host::GuestFault;
use space::{Engine, Pending, SpaceData};

pub type SpaceId = u64;
const ROOT: SpaceId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExecutorKind {
    Serial,
    Parallel { workers: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelConfig {
    pub executor: ExecutorKind,
    pub nodes: usize,
    /// Print host-task debug lines immediately on stderr.
    pub debug_console: bool,
    /// Record every completed Put/Get/Ret per space.
    pub audit: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            executor: ExecutorKind::Serial,
            nodes: 1,
            debug_console: false,
            audit: false,
        }
    }
}

/// What the root space runs.
#[derive(Debug, Clone)]
pub enum Program {
    /// VM code loaded at [`abi::CODE_BASE`], with a stack below
    /// [`abi::STACK_TOP`] and r13 pointing at its top.
    Vm(Vec<u8>),
    /// A registered host entry pc.
    Host(u32),
    /// A prepared image and register file.
    Image(MemoryImage, RegisterFile),
}

/// How a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminal {
    /// The root halted (or its host task returned) with this code.
    Exit(u32),
    Trap(Trap),
    /// No space could make progress.
    Deadlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditEntry {
    pub call: Call,
    pub child: u32,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output: SystemOutput,
    pub terminal: Terminal,
    pub messages: MessageReport,
    /// Per space path, every completed call (empty unless auditing).
    pub audit: BTreeMap<String, Vec<AuditEntry>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum State {
    Stopped,
    Runnable,
    Running,
    Waiting(Vec<SpaceId>),
}

struct Meta {
    parent: Option<SpaceId>,
    children: BTreeMap<u32, SpaceId>,
    state: State,
    path: Vec<u32>,
    data: Arc<Mutex<SpaceData>>,
}

#[derive(Default)]
struct Sched {
    spaces: BTreeMap<SpaceId, Meta>,
    queue: VecDeque<SpaceId>,
    running: usize,
    next_id: SpaceId,
    terminal: Option<Terminal>,
    // Spaces replaced by Tree copies, kept for their logs.
    retired: Vec<(Vec<u32>, Arc<Mutex<SpaceData>>)>,
}

impl Sched {
    fn subtree(&self, id: SpaceId) -> Vec<SpaceId> {
        let mut out = vec![id];
        let mut i = 0;
        while i < out.len() {
            out.extend(self.spaces[&out[i]].children.values().copied());
            i += 1;
        }
        out
    }

    fn insert(&mut self, parent: Option<SpaceId>, number: u32, data: SpaceData) -> SpaceId {
        let id = self.next_id;
        self.next_id += 1;
        let path = match parent {
            Some(p) => {
                let pm = self.spaces.get_mut(&p).unwrap();
                let mut path = pm.path.clone();
                path.push(number);
                if let Some(old) = pm.children.insert(number, id) {
                    self.retire(old);
                }
                path
            }
            None => Vec::new(),
        };
        let meta = Meta {
            parent,
            children: BTreeMap::new(),
            state: State::Stopped,
            path,
            data: Arc::new(Mutex::new(data)),
        };
        self.spaces.insert(id, meta);
        id
    }

    fn retire(&mut self, id: SpaceId) {
        for s in self.subtree(id) {
            let m = self.spaces.remove(&s).unwrap();
            self.retired.push((m.path, m.data));
        }
    }

    fn wake(&mut self) {
        let ready: Vec<SpaceId> = self
            .spaces
            .iter()
            .filter(|(_, m)| match &m.state {
                State::Waiting(set) => set
                    .iter()
                    .all(|w| self.spaces.get(w).is_none_or(|m| m.state == State::Stopped)),
                _ => false,
            })
            .map(|(&id, _)| id)
            .collect();
        for id in ready {
            self.spaces.get_mut(&id).unwrap().state = State::Runnable;
            self.queue.push_back(id);
        }
    }
}

struct Io {
    input: VecDeque<Record>,
    output: Vec<Record>,
}

pub(crate) struct Shared {
    pub(crate) config: KernelConfig,
    pub(crate) cluster: Cluster,
    pub(crate) registry: HostRegistry,
    sched: Mutex<Sched>,
    cv: Condvar,
    io: Mutex<Io>,
}

enum Handled {
    Reply(SysResult),
    Block,
    Stop(ChildStatus),
}

enum Slice {
    Preempted,
    Blocked,
    Stopped,
    RootDone(Terminal),
}

/// VM memory access that drives demand paging.
struct Tracked<'a> {
    mem: &'a mut MemoryImage,
    paging: &'a mut crate::cluster::Paging,
    cluster: &'a Cluster,
    id: SpaceId,
}

impl GuestMemory for Tracked<'_> {
    fn load(&mut self, addr: u32, buf: &mut [u8]) -> Result<(), AccessFault> {
        self.paging
            .touch_range(self.cluster, self.id, self.mem, addr, buf.len() as u64);
        self.mem.read(addr, buf)
    }

    fn store(&mut self, addr: u32, data: &[u8]) -> Result<(), AccessFault> {
        self.paging
            .touch_range(self.cluster, self.id, self.mem, addr, data.len() as u64);
        self.mem.write(addr, data)
    }
}

fn path_string(path: &[u32]) -> String {
    if path.is_empty() {
        return "/".to_string();
    }
    path.iter().map(|n| format!("/{n}")).collect()
}

/// Runs programs on a fresh space hierarchy.
pub struct Kernel {
    config: KernelConfig,
    registry: HostRegistry,
}

impl Kernel {
    pub fn new(config: KernelConfig, registry: HostRegistry) -> Self {
        Kernel { config, registry }
    }

    pub fn config(&self) -> &KernelConfig {
        &self.config
    }

    pub fn registry(&self) -> &HostRegistry {
        &self.registry
    }

    /// Runs `program` as the root space until it halts, traps or nothing
    /// can run.
    pub fn run(
        &self,
        program: &Program,
        input: &InputLog,
    ) -> Result<RunOutcome, crate::cluster::ClusterError> {
        let topology = Topology::new(self.config.nodes)?;
        let mut root = SpaceData::new(0);
        match program {
            Program::Vm(code) => {
                root.mem
                    .load(abi::CODE_BASE, code)
                    .expect("program fits below the stack");
                root.mem
                    .zero_range(abi::STACK_TOP - abi::STACK_SIZE, abi::STACK_SIZE as u64)
                    .expect("aligned stack");
                root.cpu = Cpu::new(RegisterFile::new(abi::CODE_BASE).with(13, abi::STACK_TOP));
            }
            Program::Host(pc) => root.cpu = Cpu::new(RegisterFile::new(*pc)),
            Program::Image(mem, regs) => {
                root.mem = mem.clone();
                root.cpu = Cpu::new(*regs);
            }
        }
        root.entry_regs = root.cpu.regs;
        let mut sched = Sched::default();
        let id = sched.insert(None, 0, root);
        debug_assert_eq!(id, ROOT);
        sched.spaces.get_mut(&ROOT).unwrap().state = State::Runnable;
        sched.queue.push_back(ROOT);
        let shared = Arc::new(Shared {
            config: self.config.clone(),
            cluster: Cluster::new(topology),
            registry: self.registry.clone(),
            sched: Mutex::new(sched),
            cv: Condvar::new(),
            io: Mutex::new(Io {
                input: input.records.iter().cloned().collect(),
                output: Vec::new(),
            }),
        });
        match self.config.executor {
            ExecutorKind::Serial => worker(&shared, None),
            ExecutorKind::Parallel { workers, seed } => {
                std::thread::scope(|s| {
                    for w in 0..workers.max(1) {
                        let shared = &shared;
                        let rng = ChaCha8Rng::seed_from_u64(
                            seed ^ (w as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                        );
                        s.spawn(move || worker(shared, Some(rng)));
                    }
                });
            }
        }
        let mut sched = shared.sched.lock();
        let terminal = sched
            .terminal
            .expect("workers exit only at a terminal state");
        let mut messages = MessageReport::default();
        let mut audit: BTreeMap<String, Vec<AuditEntry>> = BTreeMap::new();
        let mut all: Vec<(Vec<u32>, Arc<Mutex<SpaceData>>)> = std::mem::take(&mut sched.retired);
        all.extend(
            sched
                .spaces
                .values()
                .map(|m| (m.path.clone(), m.data.clone())),
        );
        drop(sched);
        for (path, data) in all {
            let mut d = data.lock();
            let key = path_string(&path);
            if !d.paging.log.is_empty() {
                messages
                    .per_space
                    .entry(key.clone())
                    .or_default()
                    .append(&mut d.paging.log);
            }
            if !d.audit.is_empty() {
                audit.entry(key).or_default().append(&mut d.audit);
            }
            // Suspended host tasks may hold references back into the run.
            d.engine = Engine::Fresh;
        }
        let output = SystemOutput {
            records: std::mem::take(&mut shared.io.lock().output),
        };
        Ok(RunOutcome {
            output,
            terminal,
            messages,
            audit,
        })
    }
}

fn worker(shared: &Arc<Shared>, mut rng: Option<ChaCha8Rng>) {
    while let Some((id, data)) = next_space(shared, rng.as_mut()) {
        let outcome = run_space(shared, id, &data, rng.as_mut());
        let mut s = shared.sched.lock();
        s.running -= 1;
        match outcome {
            Slice::Preempted => {
                s.spaces.get_mut(&id).unwrap().state = State::Runnable;
                s.queue.push_back(id);
            }
            Slice::Blocked => {}
            Slice::Stopped => {
                s.spaces.get_mut(&id).unwrap().state = State::Stopped;
                s.wake();
            }
            Slice::RootDone(t) => {
                s.terminal.get_or_insert(t);
            }
        }
        shared.cv.notify_all();
    }
}

fn next_space(
    shared: &Shared,
    rng: Option<&mut ChaCha8Rng>,
) -> Option<(SpaceId, Arc<Mutex<SpaceData>>)> {
    let mut s = shared.sched.lock();
    let mut rng = rng;
    loop {
        if s.terminal.is_some() {
            return None;
        }
        if !s.queue.is_empty() {
            let id = match rng.as_deref_mut() {
                Some(r) => {
                    let i = r.gen_range(0..s.queue.len());
                    s.queue.remove(i).unwrap()
                }
                None => s.queue.pop_front().unwrap(),
            };
            let m = s.spaces.get_mut(&id).unwrap();
            m.state = State::Running;
            let data = m.data.clone();
            s.running += 1;
            return Some((id, data));
        }
        if s.running == 0 {
            s.terminal = Some(Terminal::Deadlock);
            shared.cv.notify_all();
            return None;
        }
        shared.cv.wait(&mut s);
    }
}

const SERIAL_SLICE: u64 = 50_000;

fn run_space(
    shared: &Arc<Shared>,
    id: SpaceId,
    arc: &Arc<Mutex<SpaceData>>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Slice {
    let mut slice = match rng.as_deref_mut() {
        Some(r) => r.gen_range(1..=20_000),
        None => SERIAL_SLICE,
    };
    let mut guard = arc.lock();
    loop {
        let d = &mut *guard;
        if let Some(mut p) = d.pending.take() {
            if !p.charged {
                if d.budget == Some(0) {
                    d.pending = Some(p);
                    return stop(shared, id, d, ChildStatus::new(Reason::InsnLimit, 0));
                }
                if let Some(b) = &mut d.budget {
                    *b -= 1;
                }
                d.cpu.executed += 1;
                p.charged = true;
            }
            let is_vm = matches!(d.engine, Engine::Vm);
            match handle(shared, id, d, &p.req) {
                Handled::Block => {
                    d.pending = Some(p);
                    return Slice::Blocked;
                }
                Handled::Stop(status) => {
                    if !is_vm {
                        d.reply = Some(Ok(Reply::Done));
                    }
                    return stop(shared, id, d, status);
                }
                Handled::Reply(r) => {
                    if is_vm {
                        let mut mem = Tracked {
                            mem: &mut d.mem,
                            paging: &mut d.paging,
                            cluster: &shared.cluster,
                            id,
                        };
                        if let Err(t) = vmcall::deliver(&mut d.cpu.regs, &mut mem, r) {
                            return stop(shared, id, d, ChildStatus::trap(t));
                        }
                    } else {
                        d.reply = Some(r);
                        if let Some(r) = rng.as_deref_mut() {
                            if r.gen_ratio(1, 4) {
                                return Slice::Preempted;
                            }
                        }
                    }
                }
            }
            continue;
        }
        match &mut d.engine {
            Engine::Fresh => {
                let pc = d.cpu.regs.pc;
                if pc >= abi::HOST_ENTRY_BASE {
                    match shared.registry.lookup(pc) {
                        Some(f) => {
                            d.entry_regs = d.cpu.regs;
                            let ctx = TaskCtx::new(arc.clone(), shared.clone(), id, d.cpu.regs);
                            d.engine = Engine::Host(Some(f(ctx)));
                        }
                        None => {
                            let t = Trap {
                                kind: TrapKind::IllegalInstruction,
                                detail: pc,
                            };
                            return stop(shared, id, d, ChildStatus::trap(t));
                        }
                    }
                } else {
                    d.engine = Engine::Vm;
                }
            }
            Engine::Done(code) => {
                let code = *code;
                return stop(shared, id, d, ChildStatus::new(Reason::Halt, code));
            }
            Engine::Vm => {
                let limit = slice.min(d.budget.unwrap_or(u64::MAX));
                if limit == 0 {
                    if d.budget == Some(0) {
                        return stop(shared, id, d, ChildStatus::new(Reason::InsnLimit, 0));
                    }
                    return Slice::Preempted;
                }
                let mut mem = Tracked {
                    mem: &mut d.mem,
                    paging: &mut d.paging,
                    cluster: &shared.cluster,
                    id,
                };
                let (n, why) = d.cpu.run_until(&mut mem, limit);
                slice -= n;
                if let Some(b) = &mut d.budget {
                    *b -= n;
                }
                match why {
                    StopReason::BudgetExhausted => {}
                    StopReason::Halt => {
                        let code = d.cpu.regs.get(1);
                        return stop(shared, id, d, ChildStatus::new(Reason::Halt, code));
                    }
                    StopReason::Trap(t) => return stop(shared, id, d, ChildStatus::trap(t)),
                    StopReason::Syscall => {
                        let mut mem = Tracked {
                            mem: &mut d.mem,
                            paging: &mut d.paging,
                            cluster: &shared.cluster,
                            id,
                        };
                        match vmcall::decode(&d.cpu.regs, &mut mem) {
                            vmcall::Decoded::Request(req) => {
                                d.pending = Some(Pending { req, charged: true })
                            }
                            vmcall::Decoded::Error(e) => d.cpu.regs.set(1, e.code()),
                            vmcall::Decoded::Trap(t) => {
                                return stop(shared, id, d, ChildStatus::trap(t))
                            }
                        }
                    }
                }
            }
            Engine::Host(fut) => {
                let mut fut = fut.take().expect("host task polled twice");
                drop(guard);
                let mut cx = Context::from_waker(Waker::noop());
                let res = catch_unwind(AssertUnwindSafe(|| fut.as_mut().poll(&mut cx)));
                guard = arc.lock();
                let d = &mut *guard;
                match res {
                    Err(payload) => match payload.downcast::<GuestFault>() {
                        Ok(f) => {
                            drop(fut);
                            d.engine = Engine::Fresh;
                            d.cpu.regs = d.entry_regs;
                            return stop(shared, id, d, ChildStatus::trap(f.0));
                        }
                        Err(p) => std::panic::resume_unwind(p),
                    },
                    Ok(Poll::Ready(GuestExit::Exit(code))) => {
                        d.engine = Engine::Done(code);
                        return stop(shared, id, d, ChildStatus::new(Reason::Halt, code));
                    }
                    Ok(Poll::Ready(GuestExit::Jump(regs))) => {
                        d.cpu.regs = regs;
                        d.engine = Engine::Fresh;
                    }
                    Ok(Poll::Pending) => {
                        d.engine = Engine::Host(Some(fut));
                        if d.pending.is_none() {
                            // Waiting on something other than a kernel call.
                            let t = Trap {
                                kind: TrapKind::IllegalInstruction,
                                detail: d.cpu.regs.pc,
                            };
                            d.engine = Engine::Fresh;
                            d.cpu.regs = d.entry_regs;
                            return stop(shared, id, d, ChildStatus::trap(t));
                        }
                    }
                }
            }
        }
    }
}

fn stop(shared: &Shared, id: SpaceId, d: &mut SpaceData, mut status: ChildStatus) -> Slice {
    if id == ROOT {
        return Slice::RootDone(match status.reason {
            Reason::Trap(kind) => Terminal::Trap(Trap {
                kind,
                detail: status.code,
            }),
            _ => Terminal::Exit(status.code),
        });
    }
    status.budget_left = d.budget;
    status.executed = d.cpu.executed;
    d.status = status;
    let home = d.paging.home;
    d.paging.migrate(&shared.cluster, id, &d.mem, home);
    Slice::Stopped
}

fn handle(shared: &Shared, id: SpaceId, d: &mut SpaceData, req: &Request) -> Handled {
    let privileged = id == ROOT;
    match req {
        Request::Sys(args) => {
            let h = syscall(shared, id, d, args);
            if shared.config.audit && !matches!(h, Handled::Block) {
                d.audit.push(AuditEntry {
                    call: args.call,
                    child: args.child,
                });
            }
            h
        }
        _ if !privileged => Handled::Reply(Err(SysError::NotPrivileged)),
        Request::Input => Handled::Reply(Ok(Reply::Input(shared.io.lock().input.pop_front()))),
        Request::Output { device, bytes } => {
            shared
                .io
                .lock()
                .output
                .push(Record::new(*device, bytes.clone()));
            Handled::Reply(Ok(Reply::Done))
        }
        Request::NodeCount => {
            Handled::Reply(Ok(Reply::Count(shared.cluster.topology().nodes() as u32)))
        }
    }
}

fn syscall(shared: &Shared, id: SpaceId, d: &mut SpaceData, args: &SyscallArgs) -> Handled {
    match put_get(shared, id, d, args) {
        Ok(h) => h,
        Err(e) => Handled::Reply(Err(e)),
    }
}

fn check_ranges(args: &SyscallArgs) -> Result<(), SysError> {
    let o = args.options;
    if o.intersects(Options::COPY | Options::MERGE) {
        page_span(args.src, args.len)?;
    }
    if o.intersects(Options::COPY | Options::MERGE | Options::ZERO | Options::PERM) {
        page_span(args.dst, args.len)?;
    }
    Ok(())
}

fn put_get(
    shared: &Shared,
    id: SpaceId,
    d: &mut SpaceData,
    args: &SyscallArgs,
) -> Result<Handled, SysError> {
    args.validate()?;
    if args.call == Call::Ret {
        if id == ROOT {
            return Err(SysError::RootRet);
        }
        return Ok(Handled::Stop(ChildStatus::new(Reason::Ret, args.exit_code)));
    }
    check_ranges(args)?;
    let cluster = &shared.cluster;
    let (node, _) = cluster
        .topology()
        .resolve_child(d.paging.home, args.child)?;
    let o = args.options;
    let tree = o.contains(Options::TREE);

    let mut s = shared.sched.lock();
    let child = match s.spaces[&id].children.get(&args.child) {
        Some(&c) => c,
        None => s.insert(Some(id), args.child, SpaceData::new(node)),
    };
    let mut wait = vec![child];
    // (source root, destination parent, destination number)
    let mut tree_plan = None;
    if tree {
        let (src_owner, dst_parent) = match args.call {
            Call::Put => (id, child),
            _ => (child, id),
        };
        let src = *s.spaces[&src_owner]
            .children
            .get(&args.tree_src)
            .ok_or(SysError::NoTreeSource(args.tree_src))?;
        wait.extend(s.subtree(src));
        if let Some(&old) = s.spaces[&dst_parent].children.get(&args.tree_dst) {
            wait.extend(s.subtree(old));
        }
        tree_plan = Some((src, dst_parent, args.tree_dst));
    }
    wait.sort_unstable();
    wait.dedup();
    wait.retain(|&w| w != id);
    if wait.iter().any(|w| s.spaces[w].state != State::Stopped) {
        s.spaces.get_mut(&id).unwrap().state = State::Waiting(wait);
        return Ok(Handled::Block);
    }
    let child_arc = s.spaces[&child].data.clone();
    drop(s);

    d.paging.migrate(cluster, id, &d.mem, node);
    let mut cg = child_arc.lock();
    let c = &mut *cg;
    if o.contains(Options::MERGE) && c.snap.is_none() {
        return Err(SysError::NoSnapshot);
    }
    // The child's unused reservation returns to the caller.
    if let Some(left) = c.budget.take() {
        if let Some(b) = &mut d.budget {
            *b += left;
        }
    }
    let result = match args.call {
        Call::Put => {
            if o.contains(Options::REGS) {
                let regs = args.regs.expect("validated");
                c.cpu.regs = regs;
                c.entry_regs = regs;
                c.engine = Engine::Fresh;
                c.pending = None;
                c.reply = None;
            }
            if o.contains(Options::COPY) {
                d.paging
                    .touch_range(cluster, id, &d.mem, args.src, args.len);
                c.mem.copy_from(&d.mem, args.src, args.dst, args.len)?;
                c.paging.place_range(cluster, &c.mem, args.dst, args.len);
            } else if o.contains(Options::ZERO) {
                c.mem.zero_range(args.dst, args.len)?;
                c.paging.place_range(cluster, &c.mem, args.dst, args.len);
            }
            if o.contains(Options::PERM) {
                c.mem.set_perms(args.dst, args.len, args.perm)?;
            }
            if let Some((src, parent, number)) = tree_plan {
                tree_copy(shared, src, parent, number, (child, &*c));
            }
            if o.contains(Options::SNAP) {
                c.snap = Some(c.mem.snapshot());
            }
            if o.contains(Options::START) {
                c.budget = match (args.limit, d.budget) {
                    (None, None) => None,
                    (Some(l), None) => Some(l),
                    (l, Some(b)) => {
                        let r = l.map_or(b, |l| l.min(b));
                        d.budget = Some(b - r);
                        Some(r)
                    }
                };
                let mut s = shared.sched.lock();
                s.spaces.get_mut(&child).unwrap().state = State::Runnable;
                s.queue.push_back(child);
                shared.cv.notify_all();
            }
            Reply::Done
        }
        Call::Get => {
            let mut status = c.status.clone();
            if o.contains(Options::REGS) {
                status.regs = Some(c.cpu.regs);
            }
            if o.contains(Options::COPY) {
                c.paging
                    .touch_range(cluster, child, &c.mem, args.src, args.len);
                d.mem.copy_from(&c.mem, args.src, args.dst, args.len)?;
                d.paging.place_range(cluster, &d.mem, args.dst, args.len);
            } else if o.contains(Options::ZERO) {
                d.mem.zero_range(args.dst, args.len)?;
                d.paging.place_range(cluster, &d.mem, args.dst, args.len);
            } else if o.contains(Options::MERGE) {
                c.paging
                    .touch_range(cluster, child, &c.mem, args.src, args.len);
                d.paging
                    .touch_range(cluster, id, &d.mem, args.dst, args.len);
                let snap = c.snap.as_ref().expect("checked above");
                let report = merge(&mut d.mem, args.dst, &c.mem, snap, args.src, args.len)?;
                if let Some(first) = report.conflicts.first() {
                    status.reason = Reason::Conflict;
                    status.code = first.addr;
                    status.conflicts = report.conflicts;
                }
            }
            if o.contains(Options::PERM) {
                d.mem.set_perms(args.dst, args.len, args.perm)?;
            }
            if let Some((src, parent, number)) = tree_plan {
                tree_copy(shared, src, parent, number, (child, &*c));
            }
            Reply::Status(status)
        }
        Call::Ret => unreachable!(),
    };
    Ok(Handled::Reply(Ok(result)))
}

/// Deep-copies the stopped subtree rooted at `src` to child `number` of
/// `parent`, replacing whatever was there. `held` is a space whose data
/// the caller has locked already.
fn tree_copy(
    shared: &Shared,
    src: SpaceId,
    parent: SpaceId,
    number: u32,
    held: (SpaceId, &SpaceData),
) {
    let mut s = shared.sched.lock();
    let members = s.subtree(src);
    let copies: Vec<(SpaceId, Option<SpaceId>, u32, SpaceData)> = members
        .iter()
        .map(|&m| {
            let meta = &s.spaces[&m];
            let data = if m == held.0 {
                held.1.duplicate()
            } else {
                meta.data.lock().duplicate()
            };
            (m, meta.parent, *meta.path.last().unwrap_or(&0), data)
        })
        .collect();
    let mut map = BTreeMap::new();
    for (old, old_parent, n, data) in copies {
        let (p, n) = if old == src {
            (parent, number)
        } else {
            (map[&old_parent.unwrap()], n)
        };
        let new = s.insert(Some(p), n, data);
        map.insert(old, new);
    }
}

/// Convenience: whole-page rounding for callers building ranges.
pub fn pages(len: u64) -> u64 {
    len.div_ceil(PAGE_SIZE as u64) * PAGE_SIZE as u64
}
