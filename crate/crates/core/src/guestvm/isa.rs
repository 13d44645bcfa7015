//! Instruction set, register file and binary encoding.
//!
//! Every instruction is one 8-byte word:
//!
//! ```text
//! byte 0   opcode
//! byte 1   a   (rd, or first source register)
//! byte 2   b   (rs1 / base register)
//! byte 3   c   (rs2)
//! byte 4-7 imm (little-endian u32; offsets are two's complement)
//! ```
//!
//! | mnemonic | operands          | effect                                   |
//! |----------|-------------------|------------------------------------------|
//! | `LI`     | rd, imm           | rd = imm                                 |
//! | `MOV`    | rd, rs            | rd = rs                                  |
//! | `ADD` .. `SHR` | rd, rs1, rs2 | rd = rs1 op rs2 (wrapping; shifts use rs2 & 31) |
//! | `DIVU`   | rd, rs1, rs2      | unsigned divide; rs2 = 0 traps           |
//! | `LD`/`LDB` | rd, off(rs1)    | load word / zero-extended byte           |
//! | `ST`/`STB` | rs, off(rs1)    | store word / low byte                    |
//! | `BEQ`/`BNE`/`BLTU` | rs1, rs2, off | branch to pc+off (relative to the branch) |
//! | `JAL`    | rd, off           | rd = pc+8; pc += off                     |
//! | `JR`     | rs                | pc = rs                                  |
//! | `SYS`    |                   | system call, see [`crate::kernel::abi`]  |
//! | `HALT`   |                   | stop for good; exit code in r1           |
//!
//! Unused operand fields must be zero; anything else decodes as an illegal
//! instruction, so the encoding of each instruction is unique.

pub const INSN_BYTES: u32 = 8;
pub const NUM_REGS: usize = 16;

/// Sixteen 32-bit registers and a program counter. `r0` reads as zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct RegisterFile {
    regs: [u32; NUM_REGS],
    pub pc: u32,
}

impl RegisterFile {
    pub fn new(pc: u32) -> Self {
        RegisterFile {
            regs: [0; NUM_REGS],
            pc,
        }
    }

    pub fn get(&self, r: u8) -> u32 {
        if r == 0 {
            0
        } else {
            self.regs[r as usize]
        }
    }

    pub fn set(&mut self, r: u8, value: u32) {
        if r != 0 {
            self.regs[r as usize] = value;
        }
    }

    pub fn with(mut self, r: u8, value: u32) -> Self {
        self.set(r, value);
        self
    }

    /// r0..r15 followed by pc, little-endian: the layout the `Regs` option
    /// uses for VM guests.
    pub fn to_bytes(&self) -> [u8; 68] {
        let mut out = [0u8; 68];
        for i in 0..NUM_REGS {
            out[i * 4..i * 4 + 4].copy_from_slice(&self.get(i as u8).to_le_bytes());
        }
        out[64..68].copy_from_slice(&self.pc.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8; 68]) -> Self {
        let word = |i: usize| u32::from_le_bytes(b[i * 4..i * 4 + 4].try_into().unwrap());
        let mut regs = [0u32; NUM_REGS];
        for (i, r) in regs.iter_mut().enumerate().skip(1) {
            *r = word(i);
        }
        RegisterFile { regs, pc: word(16) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    Divu,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cond {
    Eq,
    Ne,
    Ltu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Instruction {
    Li {
        rd: u8,
        imm: u32,
    },
    Mov {
        rd: u8,
        rs: u8,
    },
    Alu {
        op: AluOp,
        rd: u8,
        rs1: u8,
        rs2: u8,
    },
    Ld {
        rd: u8,
        base: u8,
        offset: i32,
    },
    St {
        rs: u8,
        base: u8,
        offset: i32,
    },
    Ldb {
        rd: u8,
        base: u8,
        offset: i32,
    },
    Stb {
        rs: u8,
        base: u8,
        offset: i32,
    },
    Branch {
        cond: Cond,
        rs1: u8,
        rs2: u8,
        offset: i32,
    },
    Jal {
        rd: u8,
        offset: i32,
    },
    Jr {
        rs: u8,
    },
    Sys,
    Halt,
}

mod op {
    pub const LI: u8 = 1;
    pub const MOV: u8 = 2;
    pub const ADD: u8 = 3;
    pub const SUB: u8 = 4;
    pub const MUL: u8 = 5;
    pub const DIVU: u8 = 6;
    pub const AND: u8 = 7;
    pub const OR: u8 = 8;
    pub const XOR: u8 = 9;
    pub const SHL: u8 = 10;
    pub const SHR: u8 = 11;
    pub const LD: u8 = 12;
    pub const ST: u8 = 13;
    pub const LDB: u8 = 14;
    pub const STB: u8 = 15;
    pub const BEQ: u8 = 16;
    pub const BNE: u8 = 17;
    pub const BLTU: u8 = 18;
    pub const JAL: u8 = 19;
    pub const JR: u8 = 20;
    pub const SYS: u8 = 21;
    pub const HALT: u8 = 22;
}

impl AluOp {
    fn opcode(self) -> u8 {
        match self {
            AluOp::Add => op::ADD,
            AluOp::Sub => op::SUB,
            AluOp::Mul => op::MUL,
            AluOp::Divu => op::DIVU,
            AluOp::And => op::AND,
            AluOp::Or => op::OR,
            AluOp::Xor => op::XOR,
            AluOp::Shl => op::SHL,
            AluOp::Shr => op::SHR,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "ADD",
            AluOp::Sub => "SUB",
            AluOp::Mul => "MUL",
            AluOp::Divu => "DIVU",
            AluOp::And => "AND",
            AluOp::Or => "OR",
            AluOp::Xor => "XOR",
            AluOp::Shl => "SHL",
            AluOp::Shr => "SHR",
        }
    }

    pub const ALL: [AluOp; 9] = [
        AluOp::Add,
        AluOp::Sub,
        AluOp::Mul,
        AluOp::Divu,
        AluOp::And,
        AluOp::Or,
        AluOp::Xor,
        AluOp::Shl,
        AluOp::Shr,
    ];
}

impl Cond {
    pub fn mnemonic(self) -> &'static str {
        match self {
            Cond::Eq => "BEQ",
            Cond::Ne => "BNE",
            Cond::Ltu => "BLTU",
        }
    }
}

fn word(opcode: u8, a: u8, b: u8, c: u8, imm: u32) -> [u8; 8] {
    let i = imm.to_le_bytes();
    [opcode, a, b, c, i[0], i[1], i[2], i[3]]
}

impl Instruction {
    pub fn encode(&self) -> [u8; 8] {
        match *self {
            Instruction::Li { rd, imm } => word(op::LI, rd, 0, 0, imm),
            Instruction::Mov { rd, rs } => word(op::MOV, rd, rs, 0, 0),
            Instruction::Alu { op, rd, rs1, rs2 } => word(op.opcode(), rd, rs1, rs2, 0),
            Instruction::Ld { rd, base, offset } => word(op::LD, rd, base, 0, offset as u32),
            Instruction::St { rs, base, offset } => word(op::ST, rs, base, 0, offset as u32),
            Instruction::Ldb { rd, base, offset } => word(op::LDB, rd, base, 0, offset as u32),
            Instruction::Stb { rs, base, offset } => word(op::STB, rs, base, 0, offset as u32),
            Instruction::Branch {
                cond,
                rs1,
                rs2,
                offset,
            } => {
                let code = match cond {
                    Cond::Eq => op::BEQ,
                    Cond::Ne => op::BNE,
                    Cond::Ltu => op::BLTU,
                };
                word(code, rs1, rs2, 0, offset as u32)
            }
            Instruction::Jal { rd, offset } => word(op::JAL, rd, 0, 0, offset as u32),
            Instruction::Jr { rs } => word(op::JR, rs, 0, 0, 0),
            Instruction::Sys => word(op::SYS, 0, 0, 0, 0),
            Instruction::Halt => word(op::HALT, 0, 0, 0, 0),
        }
    }

    /// Decodes one instruction word; `None` for anything that is not the
    /// canonical encoding of an instruction.
    pub fn decode(w: &[u8; 8]) -> Option<Instruction> {
        let (opc, a, b, c) = (w[0], w[1], w[2], w[3]);
        let imm = u32::from_le_bytes([w[4], w[5], w[6], w[7]]);
        let reg = |r: u8| (r as usize) < NUM_REGS;
        if !reg(a) || !reg(b) || !reg(c) {
            return None;
        }
        let only = |need_b: bool, need_c: bool, need_imm: bool| {
            (need_b || b == 0) && (need_c || c == 0) && (need_imm || imm == 0)
        };
        let insn = match opc {
            op::LI if only(false, false, true) => Instruction::Li { rd: a, imm },
            op::MOV if only(true, false, false) => Instruction::Mov { rd: a, rs: b },
            op::ADD..=op::SHR if only(true, true, false) => {
                let op = AluOp::ALL[(opc - op::ADD) as usize];
                Instruction::Alu {
                    op,
                    rd: a,
                    rs1: b,
                    rs2: c,
                }
            }
            op::LD if only(true, false, true) => Instruction::Ld {
                rd: a,
                base: b,
                offset: imm as i32,
            },
            op::ST if only(true, false, true) => Instruction::St {
                rs: a,
                base: b,
                offset: imm as i32,
            },
            op::LDB if only(true, false, true) => Instruction::Ldb {
                rd: a,
                base: b,
                offset: imm as i32,
            },
            op::STB if only(true, false, true) => Instruction::Stb {
                rs: a,
                base: b,
                offset: imm as i32,
            },
            op::BEQ | op::BNE | op::BLTU if only(true, false, true) => {
                let cond = match opc {
                    op::BEQ => Cond::Eq,
                    op::BNE => Cond::Ne,
                    _ => Cond::Ltu,
                };
                Instruction::Branch {
                    cond,
                    rs1: a,
                    rs2: b,
                    offset: imm as i32,
                }
            }
            op::JAL if only(false, false, true) => Instruction::Jal {
                rd: a,
                offset: imm as i32,
            },
            op::JR if only(false, false, false) => Instruction::Jr { rs: a },
            op::SYS if a == 0 && only(false, false, false) => Instruction::Sys,
            op::HALT if a == 0 && only(false, false, false) => Instruction::Halt,
            _ => return None,
        };
        Some(insn)
    }
}
