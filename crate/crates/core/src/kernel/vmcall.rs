//! Register convention between `SYS` and the kernel (see [`super::abi`]).

use crate::guestvm::{GuestMemory, RegisterFile, Trap, TrapKind};
use crate::memimg::Perm;

use super::abi::{
    callno, Call, Options, Reply, Request, SysError, SysResult, SyscallArgs, RESULT_EOF, RESULT_OK,
};

/// Largest payload a VM guest may emit with one Output call.
pub const MAX_OUTPUT: u32 = 1 << 24;

pub enum Decoded {
    Request(Request),
    Error(SysError),
    Trap(Trap),
}

fn fault(addr: u32) -> Trap {
    Trap {
        kind: TrapKind::AccessFault,
        detail: addr,
    }
}

pub fn decode(regs: &RegisterFile, mem: &mut impl GuestMemory) -> Decoded {
    let r = |i: u8| regs.get(i);
    let sys = |call: Call| -> Result<SyscallArgs, SysError> {
        let options = Options::from_bits(r(3)).ok_or(SysError::BadOption("unknown option bits"))?;
        let perm = Perm::from_code(r(7)).ok_or(SysError::BadPerm(r(7)))?;
        Ok(SyscallArgs {
            call,
            child: r(2),
            options,
            src: r(4),
            dst: r(5),
            len: r(6) as u64,
            perm,
            regs: None,
            limit: (r(8) != 0).then_some(r(8) as u64),
            tree_src: r(10),
            tree_dst: r(11),
            exit_code: 0,
        })
    };
    match r(1) {
        callno::PUT | callno::GET => {
            let call = if r(1) == callno::PUT {
                Call::Put
            } else {
                Call::Get
            };
            let mut args = match sys(call) {
                Ok(a) => a,
                Err(e) => return Decoded::Error(e),
            };
            if call == Call::Put && args.options.contains(Options::REGS) {
                let mut b = [0u8; 68];
                if let Err(f) = mem.load(r(9), &mut b) {
                    return Decoded::Trap(fault(f.addr));
                }
                args.regs = Some(RegisterFile::from_bytes(&b));
            }
            Decoded::Request(Request::Sys(args))
        }
        callno::RET => Decoded::Request(Request::Sys(SyscallArgs::ret(r(2)))),
        callno::INPUT => Decoded::Request(Request::Input),
        callno::OUTPUT => {
            if r(6) > MAX_OUTPUT {
                return Decoded::Error(SysError::BadOption("output payload too large"));
            }
            let mut bytes = vec![0; r(6) as usize];
            if let Err(f) = mem.load(r(4), &mut bytes) {
                return Decoded::Trap(fault(f.addr));
            }
            Decoded::Request(Request::Output {
                device: r(2),
                bytes,
            })
        }
        callno::NODE_COUNT => Decoded::Request(Request::NodeCount),
        other => Decoded::Error(SysError::BadCall(other)),
    }
}

/// Writes a result back into the caller's registers and memory. A fault
/// while storing results traps the caller.
pub fn deliver(
    regs: &mut RegisterFile,
    mem: &mut impl GuestMemory,
    result: SysResult,
) -> Result<(), Trap> {
    match result {
        Err(e) => regs.set(1, e.code()),
        Ok(Reply::Done) => regs.set(1, RESULT_OK),
        Ok(Reply::Status(s)) => {
            if let Some(child_regs) = s.regs {
                mem.store(regs.get(9), &child_regs.to_bytes())
                    .map_err(|f| fault(f.addr))?;
            }
            regs.set(1, s.reason.code());
            regs.set(2, s.code);
        }
        Ok(Reply::Input(None)) => regs.set(1, RESULT_EOF),
        Ok(Reply::Input(Some(rec))) => {
            let n = rec.bytes.len().min(regs.get(6) as usize);
            mem.store(regs.get(5), &rec.bytes[..n])
                .map_err(|f| fault(f.addr))?;
            regs.set(1, rec.bytes.len() as u32);
            regs.set(2, rec.device);
        }
        Ok(Reply::Count(n)) => regs.set(1, n),
    }
    Ok(())
}
