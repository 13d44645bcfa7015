//! Host-task guests: deterministic Rust procedures that run inside a space.
//!
//! A host task sees its space only through [`TaskCtx`]: its own memory
//! image, its initial registers, and the kernel calls. Each call is a yield
//! point. There is no clock, randomness or shared state in the surface.
//! The task is an `async` function; the executor polls it with a no-op
//! waker and resumes it when the kernel has answered the pending call.

use std::collections::BTreeMap;
use std::fmt;
use std::future::Future;
use std::pin::Pin;
use std::sync::Arc;
use std::task::{Context, Poll};

use parking_lot::Mutex;

use crate::guestvm::{RegisterFile, Trap, TrapKind};
use crate::memimg::{AccessFault, Perm};

use super::abi::{ChildStatus, Reply, Request, SysError, SysResult, SyscallArgs, HOST_ENTRY_BASE};
use super::iolog::Record;
use super::space::{Pending, SpaceData};
use super::Shared;

/// How a host task finishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuestExit {
    /// Stop for good with this exit code.
    Exit(u32),
    /// Continue at `regs.pc`, as a VM guest or another host entry.
    Jump(RegisterFile),
}

pub type GuestFuture = Pin<Box<dyn Future<Output = GuestExit> + Send>>;
pub type HostFn = Arc<dyn Fn(TaskCtx) -> GuestFuture + Send + Sync>;

/// Named host entries. Entry `i` runs when a space starts at
/// `HOST_ENTRY_BASE + i`.
#[derive(Clone, Default)]
pub struct HostRegistry {
    entries: Vec<(String, HostFn)>,
    by_name: BTreeMap<String, u32>,
}

impl fmt::Debug for HostRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.entries.iter().map(|(n, _)| n))
            .finish()
    }
}

impl HostRegistry {
    pub fn new() -> Self {
        HostRegistry::default()
    }

    /// Registers `f` under `name` and returns its entry pc. Registering a
    /// name twice returns the existing entry.
    pub fn register<F, Fut>(&mut self, name: &str, f: F) -> u32
    where
        F: Fn(TaskCtx) -> Fut + Send + Sync + 'static,
        Fut: Future<Output = GuestExit> + Send + 'static,
    {
        if let Some(&pc) = self.by_name.get(name) {
            return pc;
        }
        let pc = HOST_ENTRY_BASE + self.entries.len() as u32;
        self.entries
            .push((name.to_string(), Arc::new(move |ctx| Box::pin(f(ctx)))));
        self.by_name.insert(name.to_string(), pc);
        pc
    }

    pub fn entry(&self, name: &str) -> Option<u32> {
        self.by_name.get(name).copied()
    }

    pub(crate) fn lookup(&self, pc: u32) -> Option<HostFn> {
        let i = pc.checked_sub(HOST_ENTRY_BASE)? as usize;
        self.entries.get(i).map(|(_, f)| f.clone())
    }
}

/// Panic payload carrying a guest trap out of a host task's memory access.
pub(crate) struct GuestFault(pub Trap);

fn raise(f: AccessFault) -> ! {
    std::panic::resume_unwind(Box::new(GuestFault(Trap {
        kind: TrapKind::AccessFault,
        detail: f.addr,
    })))
}

/// A host task's handle on its own space.
#[derive(Clone)]
pub struct TaskCtx {
    pub(crate) data: Arc<Mutex<SpaceData>>,
    pub(crate) shared: Arc<Shared>,
    pub(crate) id: u64,
    regs: RegisterFile,
}

impl TaskCtx {
    pub(crate) fn new(
        data: Arc<Mutex<SpaceData>>,
        shared: Arc<Shared>,
        id: u64,
        regs: RegisterFile,
    ) -> Self {
        TaskCtx {
            data,
            shared,
            id,
            regs,
        }
    }

    /// Registers the space was started with.
    pub fn regs(&self) -> RegisterFile {
        self.regs
    }

    pub fn arg(&self, r: u8) -> u32 {
        self.regs.get(r)
    }

    /// Reads guest memory; an access fault traps the task.
    pub fn read(&self, addr: u32, buf: &mut [u8]) {
        let mut d = self.data.lock();
        let d = &mut *d;
        d.paging.touch_range(
            &self.shared.cluster,
            self.id,
            &d.mem,
            addr,
            buf.len() as u64,
        );
        if let Err(f) = d.mem.read(addr, buf) {
            raise(f)
        }
    }

    pub fn read_vec(&self, addr: u32, len: usize) -> Vec<u8> {
        let mut v = vec![0; len];
        self.read(addr, &mut v);
        v
    }

    pub fn read_u32(&self, addr: u32) -> u32 {
        let mut b = [0; 4];
        self.read(addr, &mut b);
        u32::from_le_bytes(b)
    }

    pub fn read_u64(&self, addr: u32) -> u64 {
        let mut b = [0; 8];
        self.read(addr, &mut b);
        u64::from_le_bytes(b)
    }

    pub fn write(&self, addr: u32, data: &[u8]) {
        let mut d = self.data.lock();
        let d = &mut *d;
        d.paging.touch_range(
            &self.shared.cluster,
            self.id,
            &d.mem,
            addr,
            data.len() as u64,
        );
        if let Err(f) = d.mem.write(addr, data) {
            raise(f)
        }
    }

    pub fn write_u32(&self, addr: u32, v: u32) {
        self.write(addr, &v.to_le_bytes())
    }

    pub fn write_u64(&self, addr: u32, v: u64) {
        self.write(addr, &v.to_le_bytes())
    }

    /// Maps fresh zero-filled read-write pages over `[addr, addr+len)` in
    /// the task's own image. Both ends must be page aligned.
    pub fn map_zero(&self, addr: u32, len: u64) -> Result<(), SysError> {
        let mut d = self.data.lock();
        d.mem.zero_range(addr, len)?;
        d.mem.set_perms(addr, len, Perm::ReadWrite)?;
        Ok(())
    }

    /// Whether `pc` names a registered host entry.
    pub fn has_entry(&self, pc: u32) -> bool {
        self.shared.registry.lookup(pc).is_some()
    }

    /// Immediate host console line, outside every normative output. A no-op
    /// unless the run enables the debug console.
    pub fn debug(&self, msg: &str) {
        if self.shared.config.debug_console {
            eprintln!("[debug] {msg}");
        }
    }

    fn call(&self, req: Request) -> SysCall {
        SysCall {
            data: self.data.clone(),
            req: Some(req),
        }
    }

    pub async fn put(&self, args: SyscallArgs) -> Result<(), SysError> {
        debug_assert_eq!(args.call, super::abi::Call::Put);
        self.call(Request::Sys(args)).await.map(|_| ())
    }

    pub async fn get(&self, args: SyscallArgs) -> Result<ChildStatus, SysError> {
        debug_assert_eq!(args.call, super::abi::Call::Get);
        match self.call(Request::Sys(args)).await? {
            Reply::Status(s) => Ok(s),
            other => unreachable!("get answered with {other:?}"),
        }
    }

    /// Stops until the parent restarts this space.
    pub async fn ret(&self, code: u32) -> Result<(), SysError> {
        self.call(Request::Sys(SyscallArgs::ret(code)))
            .await
            .map(|_| ())
    }

    /// Next input-log record, `None` at the end (root only).
    pub async fn input(&self) -> Result<Option<Record>, SysError> {
        match self.call(Request::Input).await? {
            Reply::Input(r) => Ok(r),
            other => unreachable!("input answered with {other:?}"),
        }
    }

    /// Appends a record to the system output (root only).
    pub async fn output(&self, device: u32, bytes: impl Into<Vec<u8>>) -> Result<(), SysError> {
        self.call(Request::Output {
            device,
            bytes: bytes.into(),
        })
        .await
        .map(|_| ())
    }

    /// Number of nodes in the cluster (root only).
    pub async fn node_count(&self) -> Result<u32, SysError> {
        match self.call(Request::NodeCount).await? {
            Reply::Count(n) => Ok(n),
            other => unreachable!("node count answered with {other:?}"),
        }
    }
}

struct SysCall {
    data: Arc<Mutex<SpaceData>>,
    req: Option<Request>,
}

impl Future for SysCall {
    type Output = SysResult;

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<SysResult> {
        let this = &mut *self;
        let mut d = this.data.lock();
        if let Some(req) = this.req.take() {
            d.reply = None;
            d.pending = Some(Pending {
                req,
                charged: false,
            });
            return Poll::Pending;
        }
        match d.reply.take() {
            Some(r) => Poll::Ready(r),
            None => Poll::Pending,
        }
    }
}
