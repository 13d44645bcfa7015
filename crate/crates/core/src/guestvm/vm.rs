use crate::memimg::{AccessFault, MemoryImage};

use super::isa::{AluOp, Cond, Instruction, RegisterFile, INSN_BYTES};

/// Byte-addressed guest memory as seen by the interpreter.
///
/// Loads take `&mut self` so that wrappers can observe page accesses.
pub trait GuestMemory {
    fn load(&mut self, addr: u32, buf: &mut [u8]) -> Result<(), AccessFault>;
    fn store(&mut self, addr: u32, data: &[u8]) -> Result<(), AccessFault>;
}

impl GuestMemory for MemoryImage {
    fn load(&mut self, addr: u32, buf: &mut [u8]) -> Result<(), AccessFault> {
        self.read(addr, buf)
    }

    fn store(&mut self, addr: u32, data: &[u8]) -> Result<(), AccessFault> {
        self.write(addr, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrapKind {
    DivideByZero,
    AccessFault,
    IllegalInstruction,
}

impl TrapKind {
    pub fn code(self) -> u32 {
        match self {
            TrapKind::DivideByZero => 1,
            TrapKind::AccessFault => 2,
            TrapKind::IllegalInstruction => 3,
        }
    }
}

/// A trap with its detail word (the faulting address for access faults,
/// the pc otherwise).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Trap {
    pub kind: TrapKind,
    pub detail: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Continue,
    /// A `SYS` executed; pc already points past it.
    Syscall,
    /// pc still points at the faulting instruction.
    Trap(Trap),
    /// pc still points at the `HALT`.
    Halt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    BudgetExhausted,
    Syscall,
    Trap(Trap),
    Halt,
}

/// Interpreter state of one space: registers plus the running count of
/// executed instructions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Cpu {
    pub regs: RegisterFile,
    pub executed: u64,
}

impl Cpu {
    pub fn new(regs: RegisterFile) -> Self {
        Cpu { regs, executed: 0 }
    }

    /// Executes exactly one instruction. The counter advances by one
    /// whatever the outcome, faulting instructions included.
    pub fn step(&mut self, mem: &mut impl GuestMemory) -> Step {
        self.executed += 1;
        let pc = self.regs.pc;
        let mut w = [0u8; 8];
        if let Err(f) = mem.load(pc, &mut w) {
            return Step::Trap(Trap {
                kind: TrapKind::AccessFault,
                detail: f.addr,
            });
        }
        let Some(insn) = Instruction::decode(&w) else {
            return Step::Trap(Trap {
                kind: TrapKind::IllegalInstruction,
                detail: pc,
            });
        };
        let r = &mut self.regs;
        let next = pc.wrapping_add(INSN_BYTES);
        let ea = |r: &RegisterFile, base: u8, off: i32| r.get(base).wrapping_add(off as u32);
        let fault = |f: AccessFault| {
            Step::Trap(Trap {
                kind: TrapKind::AccessFault,
                detail: f.addr,
            })
        };
        match insn {
            Instruction::Li { rd, imm } => r.set(rd, imm),
            Instruction::Mov { rd, rs } => r.set(rd, r.get(rs)),
            Instruction::Alu { op, rd, rs1, rs2 } => {
                let (a, b) = (r.get(rs1), r.get(rs2));
                let v = match op {
                    AluOp::Add => a.wrapping_add(b),
                    AluOp::Sub => a.wrapping_sub(b),
                    AluOp::Mul => a.wrapping_mul(b),
                    AluOp::Divu => {
                        if b == 0 {
                            return Step::Trap(Trap {
                                kind: TrapKind::DivideByZero,
                                detail: pc,
                            });
                        }
                        a / b
                    }
                    AluOp::And => a & b,
                    AluOp::Or => a | b,
                    AluOp::Xor => a ^ b,
                    AluOp::Shl => a << (b & 31),
                    AluOp::Shr => a >> (b & 31),
                };
                r.set(rd, v);
            }
            Instruction::Ld { rd, base, offset } => {
                let mut b = [0u8; 4];
                if let Err(f) = mem.load(ea(r, base, offset), &mut b) {
                    return fault(f);
                }
                r.set(rd, u32::from_le_bytes(b));
            }
            Instruction::Ldb { rd, base, offset } => {
                let mut b = [0u8; 1];
                if let Err(f) = mem.load(ea(r, base, offset), &mut b) {
                    return fault(f);
                }
                r.set(rd, b[0] as u32);
            }
            Instruction::St { rs, base, offset } => {
                if let Err(f) = mem.store(ea(r, base, offset), &r.get(rs).to_le_bytes()) {
                    return fault(f);
                }
            }
            Instruction::Stb { rs, base, offset } => {
                if let Err(f) = mem.store(ea(r, base, offset), &[r.get(rs) as u8]) {
                    return fault(f);
                }
            }
            Instruction::Branch {
                cond,
                rs1,
                rs2,
                offset,
            } => {
                let (a, b) = (r.get(rs1), r.get(rs2));
                let taken = match cond {
                    Cond::Eq => a == b,
                    Cond::Ne => a != b,
                    Cond::Ltu => a < b,
                };
                r.pc = if taken {
                    pc.wrapping_add(offset as u32)
                } else {
                    next
                };
                return Step::Continue;
            }
            Instruction::Jal { rd, offset } => {
                r.set(rd, next);
                r.pc = pc.wrapping_add(offset as u32);
                return Step::Continue;
            }
            Instruction::Jr { rs } => {
                r.pc = r.get(rs);
                return Step::Continue;
            }
            Instruction::Sys => {
                r.pc = next;
                return Step::Syscall;
            }
            Instruction::Halt => return Step::Halt,
        }
        r.pc = next;
        Step::Continue
    }

    /// Runs at most `budget` instructions. Returns the number executed and
    /// why execution stopped.
    pub fn run_until(&mut self, mem: &mut impl GuestMemory, budget: u64) -> (u64, StopReason) {
        let mut n = 0;
        while n < budget {
            n += 1;
            match self.step(mem) {
                Step::Continue => {}
                Step::Syscall => return (n, StopReason::Syscall),
                Step::Trap(t) => return (n, StopReason::Trap(t)),
                Step::Halt => return (n, StopReason::Halt),
            }
        }
        (n, StopReason::BudgetExhausted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guestvm::asm::assemble_at;
    use crate::memimg::{Perm, PAGE_SIZE};

    const BASE: u32 = 0x1_0000;

    fn boot(src: &str) -> (Cpu, MemoryImage) {
        let code = assemble_at(src, BASE).unwrap();
        let mut mem = MemoryImage::new();
        mem.load(BASE, &code).unwrap();
        mem.zero_range(0x2_0000, PAGE_SIZE as u64).unwrap();
        (Cpu::new(RegisterFile::new(BASE)), mem)
    }

    #[test]
    fn li_add_two_steps() {
        let (mut cpu, mut mem) = boot("LI r1, 7\nADD r1, r1, r1\nHALT");
        assert_eq!(cpu.step(&mut mem), Step::Continue);
        assert_eq!(cpu.step(&mut mem), Step::Continue);
        assert_eq!(cpu.regs.get(1), 14);
        assert_eq!(cpu.executed, 2);
    }

    #[test]
    fn store_to_read_only_page_traps_and_counts() {
        let (mut cpu, mut mem) = boot("LI r2, 0x20000\nST r1, 0(r2)\nHALT");
        mem.set_perms(0x2_0000, PAGE_SIZE as u64, Perm::ReadOnly)
            .unwrap();
        cpu.step(&mut mem);
        let s = cpu.step(&mut mem);
        assert_eq!(
            s,
            Step::Trap(Trap {
                kind: TrapKind::AccessFault,
                detail: 0x2_0000
            })
        );
        assert_eq!(cpu.executed, 2);
        assert_eq!(cpu.regs.pc, BASE + 8);
    }

    #[test]
    fn load_from_none_page_traps() {
        let (mut cpu, mut mem) = boot("LI r2, 0x20000\nLD r1, 4(r2)\nHALT");
        mem.set_perms(0x2_0000, PAGE_SIZE as u64, Perm::None)
            .unwrap();
        cpu.step(&mut mem);
        assert!(matches!(
            cpu.step(&mut mem),
            Step::Trap(Trap {
                kind: TrapKind::AccessFault,
                ..
            })
        ));
    }

    #[test]
    fn divide_by_zero_traps() {
        let (mut cpu, mut mem) = boot("LI r1, 5\nDIVU r3, r1, r2\nHALT");
        cpu.step(&mut mem);
        assert_eq!(
            cpu.step(&mut mem),
            Step::Trap(Trap {
                kind: TrapKind::DivideByZero,
                detail: BASE + 8
            })
        );
    }

    #[test]
    fn jumping_into_zeroed_memory_is_illegal() {
        let (mut cpu, mut mem) = boot("LI r1, 0x20000\nJR r1");
        cpu.run_until(&mut mem, 2);
        assert!(matches!(
            cpu.step(&mut mem),
            Step::Trap(Trap {
                kind: TrapKind::IllegalInstruction,
                detail: 0x2_0000
            })
        ));
    }

    #[test]
    fn zero_budget_runs_nothing() {
        let (mut cpu, mut mem) = boot("loop: JAL r0, loop");
        assert_eq!(cpu.run_until(&mut mem, 0), (0, StopReason::BudgetExhausted));
        assert_eq!(cpu.executed, 0);
    }

    #[test]
    fn budget_stops_mid_iteration() {
        // Ten instructions per iteration.
        let body = "LI r1, 1\n".repeat(9);
        let (mut cpu, mut mem) = boot(&format!("loop:\n{body}JAL r0, loop"));
        assert_eq!(
            cpu.run_until(&mut mem, 25),
            (25, StopReason::BudgetExhausted)
        );
        assert_eq!(cpu.regs.pc, BASE + 5 * 8);
    }

    #[test]
    fn split_budget_composes() {
        let src = "LI r2, 1\nloop: ADD r1, r1, r2\nMUL r3, r1, r1\nJAL r0, loop";
        let (mut a, mut ma) = boot(src);
        let (mut b, mut mb) = boot(src);
        a.run_until(&mut ma, 25);
        a.run_until(&mut ma, 25);
        b.run_until(&mut mb, 50);
        assert_eq!(a, b);
    }

    #[test]
    fn sys_advances_pc_and_halt_does_not() {
        let (mut cpu, mut mem) = boot("SYS\nHALT");
        assert_eq!(cpu.run_until(&mut mem, 10), (1, StopReason::Syscall));
        assert_eq!(cpu.regs.pc, BASE + 8);
        assert_eq!(cpu.run_until(&mut mem, 10), (1, StopReason::Halt));
        assert_eq!(cpu.regs.pc, BASE + 8);
    }

    mod props {
        use super::*;
        use crate::guestvm::isa::{AluOp, Cond, Instruction};
        use proptest::prelude::*;

        const DATA: u32 = 0x2_0000;

        fn reg() -> impl Strategy<Value = u8> {
            0u8..6
        }

        fn insn() -> impl Strategy<Value = Instruction> {
            let alu = prop_oneof![
                Just(AluOp::Add),
                Just(AluOp::Sub),
                Just(AluOp::Mul),
                Just(AluOp::Divu),
                Just(AluOp::Xor),
                Just(AluOp::Shl),
                Just(AluOp::Shr)
            ];
            let cond = prop_oneof![Just(Cond::Eq), Just(Cond::Ne), Just(Cond::Ltu)];
            let off = (-4i32..6).prop_map(|o| o * 8);
            prop_oneof![
                (
                    reg(),
                    prop_oneof![0u32..16, DATA..DATA + 0x1100, any::<u32>()]
                )
                    .prop_map(|(rd, imm)| Instruction::Li { rd, imm }),
                (alu, reg(), reg(), reg()).prop_map(|(op, rd, rs1, rs2)| Instruction::Alu {
                    op,
                    rd,
                    rs1,
                    rs2
                }),
                (reg(), reg(), -8i32..8).prop_map(|(rd, base, offset)| Instruction::Ld {
                    rd,
                    base,
                    offset
                }),
                (reg(), reg(), -8i32..8).prop_map(|(rs, base, offset)| Instruction::St {
                    rs,
                    base,
                    offset
                }),
                (reg(), reg(), -8i32..8).prop_map(|(rs, base, offset)| Instruction::Stb {
                    rs,
                    base,
                    offset
                }),
                (cond, reg(), reg(), off.clone()).prop_map(|(cond, rs1, rs2, offset)| {
                    Instruction::Branch {
                        cond,
                        rs1,
                        rs2,
                        offset,
                    }
                }),
                (reg(), off).prop_map(|(rd, offset)| Instruction::Jal { rd, offset }),
                Just(Instruction::Sys),
            ]
        }

        fn boot_insns(prog: &[Instruction]) -> (Cpu, MemoryImage) {
            let code: Vec<u8> = prog.iter().flat_map(|i| i.encode()).collect();
            let mut mem = MemoryImage::new();
            mem.load(BASE, &code).unwrap();
            mem.zero_range(DATA, PAGE_SIZE as u64).unwrap();
            (Cpu::new(RegisterFile::new(BASE)), mem)
        }

        fn bytes(mem: &MemoryImage) -> Vec<(u32, Vec<u8>)> {
            mem.pages().map(|(i, _, b)| (i, b.to_vec())).collect()
        }

        /// Runs through syscalls until the budget is spent or the guest
        /// halts or traps.
        fn drive(cpu: &mut Cpu, mem: &mut MemoryImage, mut budget: u64) -> StopReason {
            loop {
                let (ran, why) = cpu.run_until(mem, budget);
                budget -= ran;
                if why != StopReason::Syscall {
                    return why;
                }
                if budget == 0 {
                    return StopReason::BudgetExhausted;
                }
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(256))]

            #[test]
            fn step_is_a_function_of_state(prog in prop::collection::vec(insn(), 1..24), n in 0u64..200) {
                let (mut a, mut ma) = boot_insns(&prog);
                let (mut b, mut mb) = boot_insns(&prog);
                let ra = drive(&mut a, &mut ma, n);
                let rb = drive(&mut b, &mut mb, n);
                prop_assert_eq!(ra, rb);
                prop_assert_eq!(a, b);
                prop_assert_eq!(bytes(&ma), bytes(&mb));
            }

            #[test]
            fn split_budget_is_one_run(prog in prop::collection::vec(insn(), 1..24), k in 0u64..100, m in 0u64..100) {
                let (mut a, mut ma) = boot_insns(&prog);
                let (mut b, mut mb) = boot_insns(&prog);
                let first = drive(&mut a, &mut ma, k);
                if first == StopReason::BudgetExhausted {
                    prop_assert_eq!(a.executed, k);
                    drive(&mut a, &mut ma, m);
                    drive(&mut b, &mut mb, k + m);
                } else {
                    // Stopping early does not depend on how much budget was left.
                    prop_assert!(a.executed <= k);
                    prop_assert_eq!(drive(&mut b, &mut mb, k + m), first);
                }
                prop_assert_eq!(a, b);
                prop_assert_eq!(bytes(&ma), bytes(&mb));
            }

            #[test]
            fn stores_stay_inside_mapped_pages(prog in prop::collection::vec(insn(), 1..24), n in 0u64..300) {
                let (mut cpu, mut mem) = boot_insns(&prog);
                let before: Vec<u32> = mem.page_indices().collect();
                if let StopReason::Trap(t) = drive(&mut cpu, &mut mem, n) {
                    if t.kind == TrapKind::AccessFault {
                        let page = t.detail / PAGE_SIZE as u32;
                        prop_assert!(!before.contains(&page) || mem.page_perm(page) != Some(Perm::ReadWrite));
                    }
                }
                prop_assert_eq!(mem.page_indices().collect::<Vec<_>>(), before);
            }
        }
    }
}
