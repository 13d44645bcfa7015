//! Unix-style processes: fork, exec, wait and waitpid over Put/Get/Ret.
//!
//! A [`Proc`] is the runtime's view of the calling space. Its process
//! table and file system replica live in fixed regions of the space's own
//! memory, so a forked child or an exec'd program picks them up with
//! [`Proc::attach`]. PIDs are local to each process.
//!
//! A child that runs out of console input, or calls [`Proc::fsync`], stops
//! with a request code instead of an exit. The parent services the
//! request when it next waits on that child and then resumes it.

use std::collections::VecDeque;

use thiserror::Error;

use super::fs::{reconcile, FsError, FsImage, SyncBase, CONS_IN, CONS_OUT};
use super::{
    DEFAULT_FS_SIZE, EXEC_STAGING, FS_MAX, FS_REGION, FS_SCRATCH, MAILBOX, MAIL_SCRATCH,
    PROC_REGION, PROC_REGION_SIZE, RUNTIME_HI, RUNTIME_LO, UNMAPPED,
};
use crate::guestvm::{RegisterFile, INSN_BYTES};
use crate::kernel::abi::{CODE_BASE, STACK_SIZE, STACK_TOP};
use crate::kernel::iolog::{DEV_ARGS, DEV_CONSOLE, DEV_FILE, DEV_FS};
use crate::kernel::{pages, GuestExit, Reason, SysError, SyscallArgs, TaskCtx};

/// Local children available to fork.
pub const MAX_CHILDREN: u32 = 256;
/// Child number reserved for building exec images.
pub const EXEC_CHILD: u32 = 2047;
/// Ret code: the child needs more console input.
pub const IO_INPUT: u32 = 0xF000_0001;
/// Ret code: the child asks for its changes to be propagated.
pub const IO_SYNC: u32 = 0xF000_0002;
/// Exit status base for children that trapped.
pub const TRAP_STATUS: u32 = 128;

const MAIL_EOF: u32 = 1;

pub type Pid = u32;

#[derive(Debug, Error)]
pub enum ProcError {
    #[error(transparent)]
    Sys(#[from] SysError),
    #[error(transparent)]
    Fs(#[from] FsError),
    #[error("all {MAX_CHILDREN} child slots in use")]
    NoFreeChild,
    #[error("no child with pid {0}")]
    UnknownPid(Pid),
    #[error("no children to wait for")]
    NoChildren,
    #[error("exec: {0}")]
    Exec(String),
    #[error("process state region is damaged")]
    BadState,
    #[error("file system size {0:#x} is not a page multiple up to {FS_MAX:#x}")]
    FsSize(u32),
}

/// A program exec can load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Image {
    Host(u32),
    Vm(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ChildEntry {
    pid: Pid,
    number: u32,
    seq: u64,
    name: String,
    base: SyncBase,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct ProcState {
    lineage: String,
    root: bool,
    fs_size: u32,
    next_pid: Pid,
    fork_seq: u64,
    children: Vec<ChildEntry>,
    cons_in_pos: u64,
    cons_out_flushed: u64,
    eof: bool,
    argv: Vec<String>,
    pending_input: VecDeque<Vec<u8>>,
}

struct Enc(Vec<u8>);

impl Enc {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
}

struct Dec<'a>(&'a [u8]);

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProcError> {
        if self.0.len() < n {
            return Err(ProcError::BadState);
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }
    fn u32(&mut self) -> Result<u32, ProcError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ProcError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<Vec<u8>, ProcError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn string(&mut self) -> Result<String, ProcError> {
        String::from_utf8(self.bytes()?).map_err(|_| ProcError::BadState)
    }
}

impl ProcState {
    fn encode(&self) -> Vec<u8> {
        let mut e = Enc(Vec::new());
        e.bytes(self.lineage.as_bytes());
        e.u32(self.root as u32 | (self.eof as u32) << 1);
        e.u32(self.fs_size);
        e.u32(self.next_pid);
        e.u64(self.fork_seq);
        e.u32(self.children.len() as u32);
        for c in &self.children {
            e.u32(c.pid);
            e.u32(c.number);
            e.u64(c.seq);
            e.bytes(c.name.as_bytes());
            e.u32(c.base.len() as u32);
            for (p, n) in &c.base {
                e.bytes(p.as_bytes());
                e.u64(*n);
            }
        }
        e.u64(self.cons_in_pos);
        e.u64(self.cons_out_flushed);
        e.u32(self.argv.len() as u32);
        for a in &self.argv {
            e.bytes(a.as_bytes());
        }
        e.u32(self.pending_input.len() as u32);
        for p in &self.pending_input {
            e.bytes(p);
        }
        e.0
    }

    fn decode(b: &[u8]) -> Result<Self, ProcError> {
        let mut d = Dec(b);
        let lineage = d.string()?;
        let flags = d.u32()?;
        let fs_size = d.u32()?;
        let next_pid = d.u32()?;
        let fork_seq = d.u64()?;
        let mut children = Vec::new();
        for _ in 0..d.u32()? {
            let (pid, number, seq, name) = (d.u32()?, d.u32()?, d.u64()?, d.string()?);
            let mut base = SyncBase::new();
            for _ in 0..d.u32()? {
                let p = d.string()?;
                base.insert(p, d.u64()?);
            }
            children.push(ChildEntry {
                pid,
                number,
                seq,
                name,
                base,
            });
        }
        let cons_in_pos = d.u64()?;
        let cons_out_flushed = d.u64()?;
        let argv = (0..d.u32()?)
            .map(|_| d.string())
            .collect::<Result<_, _>>()?;
        let pending_input = (0..d.u32()?).map(|_| d.bytes()).collect::<Result<_, _>>()?;
        Ok(ProcState {
            lineage,
            root: flags & 1 != 0,
            eof: flags & 2 != 0,
            fs_size,
            next_pid,
            fork_seq,
            children,
            cons_in_pos,
            cons_out_flushed,
            argv,
            pending_input,
        })
    }
}

/// One process's handle on the runtime.
pub struct Proc {
    ctx: TaskCtx,
    st: ProcState,
    fs: FsImage,
}

impl Proc {
    /// Sets up the root process: maps the runtime regions and reads the
    /// whole input log. Arguments become argv, file records become files
    /// and console records are handed out as children ask for input.
    pub async fn root(ctx: TaskCtx, fs_size: u32) -> Result<Proc, ProcError> {
        let mut st = ProcState {
            root: true,
            next_pid: 1,
            ..ProcState::default()
        };
        let mut fs = FsImage::with_console();
        while let Some(r) = ctx.input().await? {
            match r.device {
                DEV_CONSOLE => st.pending_input.push_back(r.bytes),
                DEV_ARGS => st.argv.push(String::from_utf8_lossy(&r.bytes).into_owned()),
                DEV_FILE => {
                    let split = r
                        .bytes
                        .iter()
                        .position(|&b| b == 0)
                        .unwrap_or(r.bytes.len());
                    let path = String::from_utf8_lossy(&r.bytes[..split]).into_owned();
                    let body = r.bytes.get(split + 1..).unwrap_or_default();
                    fs.write_file(&path, body, "/")?;
                }
                _ => {}
            }
        }
        // An `fs_size=<bytes>` argument overrides the program's default.
        let fs_size = match st.argv.iter().find_map(|a| a.strip_prefix("fs_size=")) {
            Some(v) => v.parse().map_err(|_| ProcError::FsSize(0))?,
            None => fs_size,
        };
        if fs_size == 0 || fs_size > FS_MAX || !(fs_size as u64).is_multiple_of(pages(1)) {
            return Err(ProcError::FsSize(fs_size));
        }
        st.fs_size = fs_size;
        ctx.map_zero(PROC_REGION, PROC_REGION_SIZE)?;
        ctx.map_zero(MAILBOX, pages(1) * 2)?;
        ctx.map_zero(FS_REGION, fs_size as u64)?;
        ctx.map_zero(FS_SCRATCH, fs_size as u64)?;
        ctx.map_zero(STACK_TOP - STACK_SIZE, STACK_SIZE as u64)?;
        let p = Proc { ctx, st, fs };
        p.flush()?;
        Ok(p)
    }

    /// Picks up the process state left by the parent's fork or by exec.
    pub fn attach(ctx: TaskCtx) -> Result<Proc, ProcError> {
        let len = ctx.read_u32(PROC_REGION) as usize;
        if len == 0 || len as u64 > PROC_REGION_SIZE - 4 {
            return Err(ProcError::BadState);
        }
        let st = ProcState::decode(&ctx.read_vec(PROC_REGION + 4, len))?;
        let fs = read_fs(&ctx, FS_REGION)?;
        Ok(Proc { ctx, st, fs })
    }

    pub fn ctx(&self) -> &TaskCtx {
        &self.ctx
    }

    pub fn is_root(&self) -> bool {
        self.st.root
    }

    pub fn argv(&self) -> &[String] {
        &self.st.argv
    }

    /// Value of the first `key=value` argument.
    pub fn param(&self, key: &str) -> Option<&str> {
        self.st
            .argv
            .iter()
            .find_map(|a| a.strip_prefix(key)?.strip_prefix('='))
    }

    /// Writer id used in file versions: the fork path from the root.
    pub fn writer(&self) -> &str {
        if self.st.lineage.is_empty() {
            "/"
        } else {
            &self.st.lineage
        }
    }

    pub fn fs(&self) -> &FsImage {
        &self.fs
    }

    pub fn fs_mut(&mut self) -> &mut FsImage {
        &mut self.fs
    }

    /// PIDs of children not yet waited for, in fork order.
    pub fn children(&self) -> Vec<Pid> {
        self.st.children.iter().map(|c| c.pid).collect()
    }

    pub fn write_file(&mut self, path: &str, data: &[u8]) -> Result<(), FsError> {
        let w = self.writer().to_string();
        self.fs.write_file(path, data, &w)
    }

    pub fn read_file(&self, path: &str) -> Result<Vec<u8>, FsError> {
        self.fs.read(path).map(<[u8]>::to_vec)
    }

    pub fn console_write(&mut self, data: &[u8]) {
        self.fs
            .append_io(CONS_OUT, data)
            .expect("console output is append-only");
    }

    /// Reads up to `max` console bytes; empty only at end of input.
    pub async fn console_read(&mut self, max: usize) -> Result<Vec<u8>, ProcError> {
        loop {
            let have = self.fs.io_len(CONS_IN);
            if have > self.st.cons_in_pos {
                let from = self.st.cons_in_pos as usize;
                let n = ((have as usize) - from).min(max);
                let data = self.fs.read(CONS_IN)?[from..from + n].to_vec();
                self.st.cons_in_pos += n as u64;
                return Ok(data);
            }
            if !self.more_input().await? {
                return Ok(Vec::new());
            }
        }
    }

    /// Gets more console input from above. False at end of input.
    async fn more_input(&mut self) -> Result<bool, ProcError> {
        if self.st.eof {
            return Ok(false);
        }
        if self.st.root {
            return Ok(match self.st.pending_input.pop_front() {
                Some(chunk) => {
                    self.fs.append_io(CONS_IN, &chunk)?;
                    true
                }
                None => {
                    self.st.eof = true;
                    false
                }
            });
        }
        let before = self.fs.io_len(CONS_IN);
        self.flush()?;
        self.ctx.ret(IO_INPUT).await?;
        self.reload()?;
        if self.fs.io_len(CONS_IN) > before {
            return Ok(true);
        }
        self.st.eof = true;
        Ok(false)
    }

    /// Propagates this process's changes toward the root now.
    pub async fn fsync(&mut self) -> Result<(), ProcError> {
        if self.st.root {
            return self.flush_console().await;
        }
        self.flush()?;
        self.ctx.ret(IO_SYNC).await?;
        self.reload()
    }

    /// Forks a child that starts at host entry `entry` with a copy of this
    /// process's memory, including its file system. Returns the child's
    /// local PID.
    pub async fn fork(&mut self, entry: u32, argv: &[&str]) -> Result<Pid, ProcError> {
        let number = (1..=MAX_CHILDREN)
            .find(|n| self.st.children.iter().all(|c| c.number != *n))
            .ok_or(ProcError::NoFreeChild)?;
        let pid = self.st.next_pid;
        self.st.next_pid += 1;
        self.st.fork_seq += 1;
        let seq = self.st.fork_seq;
        let child = ProcState {
            lineage: format!("{}/{}", self.st.lineage, seq),
            root: false,
            fs_size: self.st.fs_size,
            next_pid: 1,
            cons_in_pos: self.st.cons_in_pos,
            argv: argv.iter().map(|s| s.to_string()).collect(),
            ..ProcState::default()
        };
        self.write_fs(FS_REGION, &self.fs)?;
        self.write_state(&child)?;
        let regs = RegisterFile::new(entry).with(13, STACK_TOP);
        self.ctx
            .put(
                SyscallArgs::put(number)
                    .regs(regs)
                    .copy(0, 0, UNMAPPED as u64)
                    .start(),
            )
            .await?;
        self.st.children.push(ChildEntry {
            pid,
            number,
            seq,
            name: argv.first().map_or_else(String::new, |s| s.to_string()),
            base: self.fs.sync_base(),
        });
        self.write_state(&self.st)?;
        Ok(pid)
    }

    /// Waits for the earliest-forked child not yet collected.
    pub async fn wait(&mut self) -> Result<(Pid, u32), ProcError> {
        let pid = self.st.children.first().ok_or(ProcError::NoChildren)?.pid;
        Ok((pid, self.waitpid(pid).await?))
    }

    /// Waits for `pid` to finish, serving its I/O requests meanwhile, and
    /// merges its file system changes. Returns the exit status; a trap
    /// yields [`TRAP_STATUS`] plus the stop reason code.
    pub async fn waitpid(&mut self, pid: Pid) -> Result<u32, ProcError> {
        let idx = self
            .st
            .children
            .iter()
            .position(|c| c.pid == pid)
            .ok_or(ProcError::UnknownPid(pid))?;
        let number = self.st.children[idx].number;
        loop {
            let size = self.st.fs_size as u64;
            let status = self
                .ctx
                .get(SyscallArgs::get(number).copy(FS_REGION, FS_SCRATCH, size))
                .await?;
            let request = status.reason == Reason::Ret && matches!(status.code, IO_INPUT | IO_SYNC);
            let mut child_fs = read_fs(&self.ctx, FS_SCRATCH)?;
            let before = child_fs.io_len(CONS_IN);
            self.reconcile_child(idx, &mut child_fs);
            if !request {
                self.st.children.remove(idx);
                self.write_state(&self.st)?;
                self.flush_console().await?;
                return Ok(match status.reason {
                    Reason::Ret | Reason::Halt => status.code,
                    r => TRAP_STATUS + r.code(),
                });
            }
            let mut eof = false;
            if status.code == IO_INPUT && child_fs.io_len(CONS_IN) == before {
                if self.more_input().await? {
                    self.reconcile_child(idx, &mut child_fs);
                } else {
                    eof = true;
                }
            }
            if status.code == IO_SYNC {
                self.fsync().await?;
                self.reconcile_child(idx, &mut child_fs);
            }
            self.flush_console().await?;
            let bytes = child_fs.to_region(self.st.fs_size as usize)?;
            self.ctx.write(FS_SCRATCH, &bytes);
            self.ctx
                .put(SyscallArgs::put(number).copy(
                    FS_SCRATCH,
                    FS_REGION,
                    pages(bytes.len() as u64),
                ))
                .await?;
            self.ctx
                .write_u32(MAIL_SCRATCH, if eof { MAIL_EOF } else { 0 });
            self.ctx
                .put(
                    SyscallArgs::put(number)
                        .copy(MAIL_SCRATCH, MAILBOX, pages(1))
                        .start(),
                )
                .await?;
        }
    }

    fn reconcile_child(&mut self, idx: usize, child_fs: &mut FsImage) {
        let writer = self.writer().to_string();
        let entry = &mut self.st.children[idx];
        reconcile(&mut self.fs, child_fs, &entry.base, &writer);
        entry.base = child_fs.sync_base();
    }

    /// Replaces this process's program with `image`. On success the
    /// returned exit must be handed back to the kernel as the task's
    /// result; process table, file system and console carry over.
    pub async fn exec(&mut self, image: Image, argv: &[&str]) -> Result<GuestExit, ProcError> {
        let c = EXEC_CHILD;
        let code = match &image {
            Image::Host(pc) if self.ctx.has_entry(*pc) => None,
            Image::Host(pc) => return Err(ProcError::Exec(format!("no host entry at {pc:#x}"))),
            Image::Vm(code) if code.is_empty() || code.len() % INSN_BYTES as usize != 0 => {
                return Err(ProcError::Exec(format!(
                    "code length {} is not a whole number of instructions",
                    code.len()
                )))
            }
            Image::Vm(code) if code.len() as u64 > (RUNTIME_LO - CODE_BASE) as u64 => {
                return Err(ProcError::Exec("code too large".into()))
            }
            Image::Vm(code) => Some(code),
        };
        self.st.argv = argv.iter().map(|s| s.to_string()).collect();
        self.flush()?;
        let half = UNMAPPED as u64;
        self.ctx
            .put(SyscallArgs::put(c).copy(UNMAPPED, 0, half))
            .await?;
        let rt = (RUNTIME_HI - RUNTIME_LO) as u64;
        self.ctx
            .put(SyscallArgs::put(c).copy(RUNTIME_LO, RUNTIME_LO, rt))
            .await?;
        let pc = match (&image, code) {
            (_, Some(code)) => {
                let len = pages(code.len() as u64);
                self.ctx.map_zero(EXEC_STAGING, len)?;
                self.ctx.write(EXEC_STAGING, code);
                self.ctx
                    .put(SyscallArgs::put(c).copy(EXEC_STAGING, CODE_BASE, len))
                    .await?;
                CODE_BASE
            }
            (Image::Host(pc), None) => *pc,
            (Image::Vm(_), None) => unreachable!(),
        };
        self.ctx
            .put(SyscallArgs::put(c).zero(STACK_TOP - STACK_SIZE, STACK_SIZE as u64))
            .await?;
        self.ctx.get(SyscallArgs::get(c).copy(0, 0, half)).await?;
        Ok(GuestExit::Jump(RegisterFile::new(pc).with(13, STACK_TOP)))
    }

    /// Ends the process. The root also emits its console tail and the
    /// final file system image.
    pub async fn exit(mut self, code: u32) -> Result<GuestExit, ProcError> {
        if self.st.root {
            self.flush_console().await?;
            self.ctx.output(DEV_FS, self.fs.to_bytes()).await?;
        } else {
            self.flush()?;
        }
        Ok(GuestExit::Exit(code))
    }

    async fn flush_console(&mut self) -> Result<(), ProcError> {
        if !self.st.root {
            return Ok(());
        }
        let out = self.fs.read(CONS_OUT)?;
        let from = self.st.cons_out_flushed as usize;
        if out.len() > from {
            let bytes = out[from..].to_vec();
            self.st.cons_out_flushed = out.len() as u64;
            self.ctx.output(DEV_CONSOLE, bytes).await?;
        }
        Ok(())
    }

    /// Writes the cached state and file system back to their regions.
    fn flush(&self) -> Result<(), ProcError> {
        self.write_fs(FS_REGION, &self.fs)?;
        self.write_state(&self.st)
    }

    fn reload(&mut self) -> Result<(), ProcError> {
        self.fs = read_fs(&self.ctx, FS_REGION)?;
        if self.ctx.read_u32(MAILBOX) & MAIL_EOF != 0 {
            self.st.eof = true;
        }
        Ok(())
    }

    fn write_fs(&self, at: u32, fs: &FsImage) -> Result<(), ProcError> {
        let size = if self.st.fs_size == 0 {
            DEFAULT_FS_SIZE
        } else {
            self.st.fs_size
        };
        self.ctx.write(at, &fs.to_region(size as usize)?);
        Ok(())
    }

    fn write_state(&self, st: &ProcState) -> Result<(), ProcError> {
        let b = st.encode();
        if b.len() as u64 + 4 > PROC_REGION_SIZE {
            return Err(ProcError::BadState);
        }
        self.ctx.write_u32(PROC_REGION, b.len() as u32);
        self.ctx.write(PROC_REGION + 4, &b);
        Ok(())
    }
}

fn read_fs(ctx: &TaskCtx, at: u32) -> Result<FsImage, ProcError> {
    let len = ctx.read_u32(at) as usize;
    if len as u64 > FS_MAX as u64 {
        return Err(ProcError::BadState);
    }
    Ok(FsImage::from_bytes(&ctx.read_vec(at + 4, len))?)
}
