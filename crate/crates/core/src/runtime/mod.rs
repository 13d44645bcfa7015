//! User-level emulation built on Put/Get/Ret: processes with replicated
//! file systems, deterministic-consistency threads and a quantum scheduler
//! for lock-based code.
//!
//! Address-space layout shared by every runtime process:
//!
//! | range | use |
//! |---|---|
//! | `0x0001_0000` | VM code |
//! | `0x1000_0000..0x3F00_0000` | application data, thread shared regions |
//! | `0x3F00_0000` | process state |
//! | `0x3FF0_0000` | mailbox page written by the parent |
//! | `0x4000_0000` | file system region |
//! | `0x4800_0000` | scratch for child file systems |
//! | `0x5000_0000` | exec staging |
//! | `0x7FF0_0000..0x8000_0000` | stack |
//! | `0x8000_0000..` | never mapped |

pub mod dsched;
pub mod fs;
pub mod proc;
pub mod threads;

pub const DATA_BASE: u32 = 0x1000_0000;
pub const PROC_REGION: u32 = 0x3F00_0000;
pub const PROC_REGION_SIZE: u64 = 0x0010_0000;
pub const MAILBOX: u32 = 0x3FF0_0000;
pub const MAIL_SCRATCH: u32 = 0x3FF0_1000;
pub const FS_REGION: u32 = 0x4000_0000;
pub const FS_SCRATCH: u32 = 0x4800_0000;
/// Largest file system region.
pub const FS_MAX: u32 = 0x0800_0000;
pub const DEFAULT_FS_SIZE: u32 = 4 << 20;
pub const EXEC_STAGING: u32 = 0x5000_0000;
pub const RUNTIME_LO: u32 = PROC_REGION;
pub const RUNTIME_HI: u32 = EXEC_STAGING;
/// Start of the upper half, which no runtime process maps.
pub const UNMAPPED: u32 = 0x8000_0000;
