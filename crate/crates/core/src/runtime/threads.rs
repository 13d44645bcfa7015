//! Shared-memory threads under deterministic consistency.
//!
//! Each thread is a child space. Fork copies the group's shared region
//! into the child and snapshots it; join merges the child's changes since
//! that snapshot back into the master. Writes become visible to other
//! threads only across join and barrier. Two threads writing the same
//! byte between synchronizations is reported as a conflict.

use std::collections::BTreeMap;

use thiserror::Error;

use super::fs::{reconcile, FsError, FsImage, SyncBase, CONS_IN, CONS_OUT};
use super::{DATA_BASE, FS_MAX, FS_REGION, FS_SCRATCH};
use crate::cluster::child_number;
use crate::guestvm::RegisterFile;
use crate::kernel::abi::{CODE_BASE, STACK_SIZE, STACK_TOP};
use crate::kernel::{ChildStatus, Reason, SysError, SyscallArgs, TaskCtx};

/// Ret code a thread uses to reach a barrier.
pub const BARRIER: u32 = 0xB000_0000;

#[derive(Debug, Error)]
pub enum ThreadError {
    #[error(transparent)]
    Sys(#[from] SysError),
    #[error(transparent)]
    Fs(#[from] FsError),
    #[error("thread {0} already forked")]
    Duplicate(u32),
    #[error("no thread {0}")]
    Unknown(u32),
    #[error("thread {tid}: write/write conflict at {addr:#010x} ({count} bytes)")]
    Conflict {
        tid: u32,
        addr: u32,
        count: usize,
        addrs: Vec<u32>,
    },
    #[error("thread {0} did console I/O")]
    ThreadIo(u32),
    #[error("thread {tid} stopped: {reason} {code:#x}")]
    Stopped {
        tid: u32,
        reason: &'static str,
        code: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackLayout {
    /// Every thread's stack sits at the same address outside the shared
    /// region; fork copies the master's stack.
    Overlapping,
    /// Thread `i` gets `[base + i*size, base + (i+1)*size)`, which must lie
    /// in the shared region so stack addresses can be passed around.
    Disjoint { base: u32, size: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsSharing {
    /// Threads get no file system.
    Excluded,
    /// Each thread gets a replica, reconciled into the master at join.
    Private,
}

#[derive(Debug)]
struct Slot {
    number: u32,
    base: Option<SyncBase>,
}

/// A master's set of threads sharing one memory range.
#[derive(Debug)]
pub struct ThreadGroup {
    shared: (u32, u64),
    private: Vec<(u32, u64)>,
    stacks: StackLayout,
    fs: FsSharing,
    first_child: u32,
    nodes: u32,
    threads: BTreeMap<u32, Slot>,
}

impl ThreadGroup {
    pub fn new(shared_base: u32, shared_len: u64) -> Self {
        ThreadGroup {
            shared: (shared_base, shared_len),
            private: vec![(CODE_BASE, (DATA_BASE - CODE_BASE) as u64)],
            stacks: StackLayout::Overlapping,
            fs: FsSharing::Excluded,
            first_child: 1,
            nodes: 1,
            threads: BTreeMap::new(),
        }
    }

    pub fn stacks(mut self, layout: StackLayout) -> Self {
        self.stacks = layout;
        self
    }

    pub fn fs(mut self, sharing: FsSharing) -> Self {
        self.fs = sharing;
        self
    }

    /// Extra ranges copied to each thread at fork and never merged.
    /// The code area is always included.
    pub fn private_range(mut self, base: u32, len: u64) -> Self {
        self.private.push((base, len));
        self
    }

    /// Local child number of thread 0.
    pub fn first_child(mut self, n: u32) -> Self {
        self.first_child = n;
        self
    }

    /// Places thread `i` on node field `i % nodes`.
    pub fn spread(mut self, nodes: u32) -> Self {
        self.nodes = nodes.max(1);
        self
    }

    pub fn shared(&self) -> (u32, u64) {
        self.shared
    }

    /// Threads forked and not yet joined, in id order.
    pub fn live(&self) -> Vec<u32> {
        self.threads.keys().copied().collect()
    }

    pub fn stack_top(&self, tid: u32) -> u32 {
        match self.stacks {
            StackLayout::Overlapping => STACK_TOP,
            StackLayout::Disjoint { base, size } => base + (tid + 1) * size,
        }
    }

    fn number(&self, tid: u32) -> u32 {
        child_number(tid % self.nodes, self.first_child + tid)
    }

    /// Starts thread `tid` at `regs.pc`. The stack pointer comes from the
    /// stack layout.
    pub async fn fork(
        &mut self,
        ctx: &TaskCtx,
        tid: u32,
        regs: RegisterFile,
    ) -> Result<(), ThreadError> {
        if self.threads.contains_key(&tid) {
            return Err(ThreadError::Duplicate(tid));
        }
        let number = self.number(tid);
        for &(base, len) in &self.private {
            ctx.put(SyscallArgs::put(number).copy(base, base, len))
                .await?;
        }
        if self.stacks == StackLayout::Overlapping {
            let lo = STACK_TOP - STACK_SIZE;
            ctx.put(SyscallArgs::put(number).copy(lo, lo, STACK_SIZE as u64))
                .await?;
        }
        let base = match self.fs {
            FsSharing::Excluded => None,
            FsSharing::Private => {
                ctx.put(SyscallArgs::put(number).copy(FS_REGION, FS_REGION, FS_MAX as u64))
                    .await?;
                Some(load_fs(ctx, FS_REGION)?.sync_base())
            }
        };
        let regs = regs.with(13, self.stack_top(tid));
        let (at, len) = self.shared;
        ctx.put(
            SyscallArgs::put(number)
                .regs(regs)
                .copy(at, at, len)
                .snap()
                .start(),
        )
        .await?;
        self.threads.insert(tid, Slot { number, base });
        Ok(())
    }

    async fn merge(&mut self, ctx: &TaskCtx, tid: u32) -> Result<ChildStatus, ThreadError> {
        let number = self
            .threads
            .get(&tid)
            .ok_or(ThreadError::Unknown(tid))?
            .number;
        let (at, len) = self.shared;
        let st = ctx
            .get(SyscallArgs::get(number).merge(at, at, len).want_regs())
            .await?;
        if st.reason == Reason::Conflict {
            return Err(ThreadError::Conflict {
                tid,
                addr: st.code,
                count: st.conflicts.len(),
                addrs: st.conflicts.iter().map(|c| c.addr).collect(),
            });
        }
        Ok(st)
    }

    /// Waits for thread `tid` to finish and merges its shared writes.
    pub async fn join(&mut self, ctx: &TaskCtx, tid: u32) -> Result<ChildStatus, ThreadError> {
        let st = self.merge(ctx, tid).await?;
        self.threads.remove(&tid);
        Ok(st)
    }

    /// Like [`ThreadGroup::join`], also reconciling the thread's file
    /// system replica into `fs`.
    pub async fn join_fs(
        &mut self,
        ctx: &TaskCtx,
        tid: u32,
        fs: &mut FsImage,
        writer: &str,
    ) -> Result<ChildStatus, ThreadError> {
        let slot = self.threads.get(&tid).ok_or(ThreadError::Unknown(tid))?;
        let (number, base) = (slot.number, slot.base.clone().unwrap_or_default());
        let st = self.join(ctx, tid).await?;
        ctx.get(SyscallArgs::get(number).copy(FS_REGION, FS_SCRATCH, FS_MAX as u64))
            .await?;
        let mut child = load_fs(ctx, FS_SCRATCH)?;
        for f in [CONS_IN, CONS_OUT] {
            if child.io_len(f) != base.get(f).copied().unwrap_or(0) {
                return Err(ThreadError::ThreadIo(tid));
            }
        }
        reconcile(fs, &mut child, &base, writer);
        Ok(st)
    }

    /// Waits for every live thread to reach a barrier, merges them in id
    /// order and restarts them on the combined shared memory. Threads that
    /// finished instead of reaching the barrier are joined. Returns the
    /// ids of those finished threads.
    pub async fn barrier(&mut self, ctx: &TaskCtx) -> Result<Vec<u32>, ThreadError> {
        let mut finished = Vec::new();
        for tid in self.live() {
            let st = self.merge(ctx, tid).await?;
            match (st.reason, st.code) {
                (Reason::Ret, BARRIER) => {}
                (Reason::Halt, _) => finished.push(tid),
                (r, code) => {
                    return Err(ThreadError::Stopped {
                        tid,
                        reason: r.name(),
                        code,
                    })
                }
            }
        }
        for tid in &finished {
            self.threads.remove(tid);
        }
        let (at, len) = self.shared;
        for slot in self.threads.values() {
            ctx.put(
                SyscallArgs::put(slot.number)
                    .copy(at, at, len)
                    .snap()
                    .start(),
            )
            .await?;
        }
        Ok(finished)
    }
}

/// Thread side of [`ThreadGroup::barrier`] for host-task threads.
pub async fn barrier_wait(ctx: &TaskCtx) -> Result<(), SysError> {
    ctx.ret(BARRIER).await
}

/// Reads a file system region written by [`store_fs`] or a process.
pub fn load_fs(ctx: &TaskCtx, at: u32) -> Result<FsImage, FsError> {
    let len = ctx.read_u32(at) as usize;
    if len > FS_MAX as usize {
        return Err(FsError::Malformed(0));
    }
    FsImage::from_bytes(&ctx.read_vec(at + 4, len))
}

/// Writes `fs` into the thread's own file system region.
pub fn store_fs(ctx: &TaskCtx, fs: &FsImage) -> Result<(), FsError> {
    ctx.write(FS_REGION, &fs.to_region(FS_MAX as usize)?);
    Ok(())
}
