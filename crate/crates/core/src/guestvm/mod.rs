//! The guest register machine: instruction set, interpreter with exact
//! instruction counting, and the assembler/disassembler pair.
//!
//! Host-task guests, the other backend, live in [`crate::kernel::host`].

pub mod asm;
pub mod isa;
pub mod vm;

pub use asm::{
    assemble, assemble_at, assemble_symbols, disassemble, AsmError, AsmErrorKind, Assembled,
};
pub use isa::{AluOp, Cond, Instruction, RegisterFile, INSN_BYTES, NUM_REGS};
pub use vm::{Cpu, GuestMemory, Step, StopReason, Trap, TrapKind};
