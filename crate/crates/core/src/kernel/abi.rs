//! System call arguments, results and the VM register convention.
//!
//! A VM guest issues `SYS` with:
//!
//! | reg | meaning                                                          |
//! |-----|------------------------------------------------------------------|
//! | r1  | call: 0 Put, 1 Get, 2 Ret, 3 Input, 4 Output, 5 NodeCount        |
//! | r2  | child number; exit code for Ret; device for Output               |
//! | r3  | option bits ([`Options`])                                        |
//! | r4  | source address (Output: payload address)                         |
//! | r5  | destination address (Input: buffer address)                      |
//! | r6  | length (Input: buffer capacity)                                  |
//! | r7  | permission code: 0 none, 1 read-only, 3 read-write               |
//! | r8  | instruction limit for Start, 0 = unlimited                       |
//! | r9  | address of a 68-byte register block (r0..r15, pc) for Regs       |
//! | r10 | Tree: source child number                                        |
//! | r11 | Tree: destination child number                                   |
//!
//! On return r1 holds [`RESULT_OK`] or an error code (`0xFFFF_FFxx`).
//! Get returns the stop reason code in r1 and the exit code (or first
//! conflicting address) in r2; Get with Regs also writes the child's
//! registers to the block at r9. Input returns the record length in r1 and
//! its device in r2, or [`RESULT_EOF`] in r1 once the log is exhausted.
//! NodeCount returns the cluster size in r1.

use bitflags::bitflags;
use thiserror::Error;

use crate::cluster::ClusterError;
use crate::guestvm::{RegisterFile, Trap, TrapKind};
use crate::memimg::{Conflict, MemError, Perm};

/// Program counters at or above this value select host-task entries.
pub const HOST_ENTRY_BASE: u32 = 0xFFFF_0000;
/// Load address of VM program images.
pub const CODE_BASE: u32 = 0x0001_0000;
/// Initial stack pointer (r13) of a VM root.
pub const STACK_TOP: u32 = 0x8000_0000;
pub const STACK_SIZE: u32 = 0x0010_0000;

pub const RESULT_OK: u32 = 0;
pub const RESULT_EOF: u32 = 0xFFFF_FFFF;

pub mod callno {
    pub const PUT: u32 = 0;
    pub const GET: u32 = 1;
    pub const RET: u32 = 2;
    pub const INPUT: u32 = 3;
    pub const OUTPUT: u32 = 4;
    pub const NODE_COUNT: u32 = 5;
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct Options: u32 {
        const REGS = 1 << 0;
        const COPY = 1 << 1;
        const ZERO = 1 << 2;
        const SNAP = 1 << 3;
        const START = 1 << 4;
        const MERGE = 1 << 5;
        const PERM = 1 << 6;
        const TREE = 1 << 7;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Call {
    Put,
    Get,
    Ret,
}

/// Arguments of one Put, Get or Ret.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyscallArgs {
    pub call: Call,
    pub child: u32,
    pub options: Options,
    pub src: u32,
    pub dst: u32,
    pub len: u64,
    pub perm: Perm,
    pub regs: Option<RegisterFile>,
    /// Instruction limit applied by Start; `None` runs unlimited (within
    /// the caller's own limit).
    pub limit: Option<u64>,
    pub tree_src: u32,
    pub tree_dst: u32,
    pub exit_code: u32,
}

impl SyscallArgs {
    fn new(call: Call, child: u32) -> Self {
        SyscallArgs {
            call,
            child,
            options: Options::empty(),
            src: 0,
            dst: 0,
            len: 0,
            perm: Perm::ReadWrite,
            regs: None,
            limit: None,
            tree_src: 0,
            tree_dst: 0,
            exit_code: 0,
        }
    }

    pub fn put(child: u32) -> Self {
        SyscallArgs::new(Call::Put, child)
    }

    pub fn get(child: u32) -> Self {
        SyscallArgs::new(Call::Get, child)
    }

    pub fn ret(code: u32) -> Self {
        SyscallArgs {
            exit_code: code,
            ..SyscallArgs::new(Call::Ret, 0)
        }
    }

    pub fn regs(mut self, regs: RegisterFile) -> Self {
        self.options |= Options::REGS;
        self.regs = Some(regs);
        self
    }

    /// Get(Regs): the child's registers come back in the status.
    pub fn want_regs(mut self) -> Self {
        self.options |= Options::REGS;
        self
    }

    pub fn copy(mut self, src: u32, dst: u32, len: u64) -> Self {
        self.options |= Options::COPY;
        (self.src, self.dst, self.len) = (src, dst, len);
        self
    }

    pub fn zero(mut self, dst: u32, len: u64) -> Self {
        self.options |= Options::ZERO;
        (self.dst, self.len) = (dst, len);
        self
    }

    pub fn merge(mut self, src: u32, dst: u32, len: u64) -> Self {
        self.options |= Options::MERGE;
        (self.src, self.dst, self.len) = (src, dst, len);
        self
    }

    /// Sets permissions on the destination range given by `dst`/`len`.
    pub fn perm(mut self, perm: Perm) -> Self {
        self.options |= Options::PERM;
        self.perm = perm;
        self
    }

    pub fn range(mut self, dst: u32, len: u64) -> Self {
        (self.dst, self.len) = (dst, len);
        self
    }

    pub fn tree(mut self, tree_src: u32, tree_dst: u32) -> Self {
        self.options |= Options::TREE;
        (self.tree_src, self.tree_dst) = (tree_src, tree_dst);
        self
    }

    pub fn snap(mut self) -> Self {
        self.options |= Options::SNAP;
        self
    }

    pub fn start(mut self) -> Self {
        self.options |= Options::START;
        self
    }

    pub fn limit(mut self, limit: u64) -> Self {
        self.limit = Some(limit);
        self
    }

    /// Checks the option matrix.
    pub fn validate(&self) -> Result<(), SysError> {
        let o = self.options;
        match self.call {
            Call::Ret => return Ok(()),
            Call::Put if o.contains(Options::MERGE) => {
                return Err(SysError::BadOption("Merge on Put"))
            }
            Call::Get if o.contains(Options::SNAP) => {
                return Err(SysError::BadOption("Snap on Get"))
            }
            Call::Get if o.contains(Options::START) => {
                return Err(SysError::BadOption("Start on Get"))
            }
            _ => {}
        }
        if o.contains(Options::COPY | Options::ZERO) {
            return Err(SysError::BadOption("Copy with Zero"));
        }
        if o.contains(Options::MERGE) && o.intersects(Options::COPY | Options::ZERO) {
            return Err(SysError::BadOption("Merge with Copy or Zero"));
        }
        if self.call == Call::Put && o.contains(Options::REGS) && self.regs.is_none() {
            return Err(SysError::BadOption("Regs without a register payload"));
        }
        if self.limit == Some(0) {
            return Err(SysError::BadOption("zero instruction limit"));
        }
        Ok(())
    }
}

/// Why a child stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reason {
    /// Explicit Ret; the child resumes after it on the next Start.
    Ret,
    /// `HALT`, or a host task that returned; final.
    Halt,
    Trap(TrapKind),
    InsnLimit,
    /// Returned by Get(Merge) only: the child's changes collided with the
    /// caller's.
    Conflict,
}

impl Reason {
    pub fn code(self) -> u32 {
        match self {
            Reason::Ret => 0,
            Reason::Halt => 1,
            Reason::Trap(TrapKind::DivideByZero) => 2,
            Reason::Trap(TrapKind::AccessFault) => 3,
            Reason::Trap(TrapKind::IllegalInstruction) => 4,
            Reason::InsnLimit => 5,
            Reason::Conflict => 6,
        }
    }

    pub fn from_code(code: u32) -> Option<Reason> {
        Some(match code {
            0 => Reason::Ret,
            1 => Reason::Halt,
            2 => Reason::Trap(TrapKind::DivideByZero),
            3 => Reason::Trap(TrapKind::AccessFault),
            4 => Reason::Trap(TrapKind::IllegalInstruction),
            5 => Reason::InsnLimit,
            6 => Reason::Conflict,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Reason::Ret => "ret",
            Reason::Halt => "halt",
            Reason::Trap(TrapKind::DivideByZero) => "trap(divide-by-zero)",
            Reason::Trap(TrapKind::AccessFault) => "trap(access-fault)",
            Reason::Trap(TrapKind::IllegalInstruction) => "trap(illegal-instruction)",
            Reason::InsnLimit => "insn_limit",
            Reason::Conflict => "conflict",
        }
    }
}

/// What a Get reports about the child.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChildStatus {
    pub reason: Reason,
    /// Exit code for Ret/Halt, trap detail for traps, first conflicting
    /// address for conflicts.
    pub code: u32,
    /// Unused instructions of the child's limit, if it had one.
    pub budget_left: Option<u64>,
    /// Instructions the child itself has executed since it was created.
    pub executed: u64,
    /// Child registers, for Get with Regs.
    pub regs: Option<RegisterFile>,
    pub conflicts: Vec<Conflict>,
}

impl ChildStatus {
    pub fn new(reason: Reason, code: u32) -> Self {
        ChildStatus {
            reason,
            code,
            budget_left: None,
            executed: 0,
            regs: None,
            conflicts: Vec::new(),
        }
    }

    pub fn trap(t: Trap) -> Self {
        ChildStatus::new(Reason::Trap(t.kind), t.detail)
    }

    /// A clean Ret with this exit code.
    pub fn exited(&self, code: u32) -> bool {
        self.reason == Reason::Ret && self.code == code
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SysError {
    #[error("invalid option combination: {0}")]
    BadOption(&'static str),
    #[error("bad memory range: {0}")]
    Range(#[from] MemError),
    #[error(transparent)]
    Node(#[from] ClusterError),
    #[error("child has no snapshot to merge against")]
    NoSnapshot,
    #[error("no child {0:#x} for Tree")]
    NoTreeSource(u32),
    #[error("the root cannot Ret")]
    RootRet,
    #[error("privileged call from an unprivileged space")]
    NotPrivileged,
    #[error("bad permission code {0}")]
    BadPerm(u32),
    #[error("unknown call {0}")]
    BadCall(u32),
}

impl SysError {
    /// Error code returned in r1 to VM guests.
    pub fn code(&self) -> u32 {
        0xFFFF_FF00
            | match self {
                SysError::BadOption(_) => 1,
                SysError::Range(_) => 2,
                SysError::Node(_) => 3,
                SysError::NoSnapshot => 4,
                SysError::NoTreeSource(_) => 5,
                SysError::RootRet => 6,
                SysError::NotPrivileged => 7,
                SysError::BadPerm(_) => 8,
                SysError::BadCall(_) => 9,
            }
    }
}

/// A request from a guest to the kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Sys(SyscallArgs),
    /// Next input-log record (root only).
    Input,
    /// Emit a record to the system output (root only).
    Output {
        device: u32,
        bytes: Vec<u8>,
    },
    /// Cluster size (root only).
    NodeCount,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Done,
    Status(ChildStatus),
    Input(Option<crate::kernel::iolog::Record>),
    Count(u32),
}

pub type SysResult = Result<Reply, SysError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn option_matrix() {
        assert!(SyscallArgs::put(1).merge(0, 0, 0).validate().is_err());
        assert!(SyscallArgs::get(1).snap().validate().is_err());
        assert!(SyscallArgs::get(1).start().validate().is_err());
        assert!(SyscallArgs::put(1)
            .copy(0, 0, 4096)
            .zero(0, 4096)
            .validate()
            .is_err());
        assert!(SyscallArgs::get(1).merge(0, 0, 4096).validate().is_ok());
        assert!(SyscallArgs::put(1)
            .copy(0, 0, 4096)
            .snap()
            .start()
            .validate()
            .is_ok());
        assert!(SyscallArgs::get(1)
            .perm(Perm::ReadOnly)
            .tree(1, 2)
            .validate()
            .is_ok());
        assert!(SyscallArgs::put(1).start().limit(0).validate().is_err());
    }

    #[test]
    fn reason_codes_round_trip() {
        for c in 0..7 {
            assert_eq!(Reason::from_code(c).unwrap().code(), c);
        }
        assert_eq!(Reason::from_code(7), None);
    }
}
