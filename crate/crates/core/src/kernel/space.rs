use crate::cluster::{NodeId, Paging};
use crate::guestvm::{Cpu, RegisterFile};
use crate::memimg::{MemoryImage, Snapshot};

use super::abi::{ChildStatus, Reason, Request, SysResult};
use super::host::GuestFuture;

pub(crate) enum Engine {
    /// Not started since its registers were last set; the pc picks VM or
    /// host execution on the next Start.
    Fresh,
    Vm,
    /// `None` while a worker is polling the future.
    Host(Option<GuestFuture>),
    /// A host task that returned; restarting stops it again at once.
    Done(u32),
}

impl Engine {
    /// State for a structural copy. A suspended host task cannot be
    /// duplicated, so its copy restarts from the entry.
    pub(crate) fn duplicate(&self) -> Engine {
        match self {
            Engine::Fresh | Engine::Host(_) => Engine::Fresh,
            Engine::Vm => Engine::Vm,
            Engine::Done(c) => Engine::Done(*c),
        }
    }
}

pub(crate) struct Pending {
    pub req: Request,
    /// The instruction cost of the call has been paid.
    pub charged: bool,
}

/// Everything a space owns. Only the worker running the space, or the
/// parent while the space is stopped, touches it.
pub(crate) struct SpaceData {
    pub cpu: Cpu,
    /// Registers the current host task started with.
    pub entry_regs: RegisterFile,
    pub mem: MemoryImage,
    pub snap: Option<Snapshot>,
    pub engine: Engine,
    /// Remaining instruction limit, `None` if unlimited.
    pub budget: Option<u64>,
    pub pending: Option<Pending>,
    pub reply: Option<SysResult>,
    pub status: ChildStatus,
    pub paging: Paging,
    pub audit: Vec<super::AuditEntry>,
}

impl SpaceData {
    pub(crate) fn new(home: NodeId) -> Self {
        SpaceData {
            cpu: Cpu::default(),
            entry_regs: RegisterFile::default(),
            mem: MemoryImage::new(),
            snap: None,
            engine: Engine::Fresh,
            budget: None,
            pending: None,
            reply: None,
            status: ChildStatus::new(Reason::Ret, 0),
            paging: Paging::new(home),
            audit: Vec::new(),
        }
    }

    pub(crate) fn duplicate(&self) -> Self {
        let fresh = matches!(self.engine, Engine::Host(_));
        SpaceData {
            cpu: if fresh {
                Cpu::new(self.entry_regs)
            } else {
                self.cpu.clone()
            },
            entry_regs: self.entry_regs,
            mem: self.mem.clone(),
            snap: self.snap.clone(),
            engine: self.engine.duplicate(),
            budget: None,
            pending: if fresh {
                None
            } else {
                self.pending.as_ref().map(|p| Pending {
                    req: p.req.clone(),
                    charged: p.charged,
                })
            },
            reply: None,
            status: self.status.clone(),
            paging: self.paging.fork(),
            audit: Vec::new(),
        }
    }
}
