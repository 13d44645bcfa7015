//! Line-oriented assembler and canonical disassembler.
//!
//! Source is one statement per line: an optional `label:`, then an
//! instruction or directive. `;` and `#` start comments. Directives:
//! `.word`, `.byte` (comma-separated expressions), `.ascii "text"`,
//! `.space n`, `.align n` and `.equ NAME, value`. Expressions are numbers
//! (decimal, `0x`, `0b`, `'c'`) and symbols joined with `+`/`-`.
//!
//! Branch and `JAL` targets that mention a label are encoded relative to
//! the branch; purely numeric targets are taken as the raw offset, which is
//! what the disassembler prints. `LI` and load/store offsets use absolute
//! values, so a label there yields its load address.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use super::isa::{AluOp, Cond, Instruction, INSN_BYTES, NUM_REGS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("undefined symbol `{0}`")]
    UndefinedSymbol(String),
    #[error("duplicate symbol `{0}`")]
    DuplicateSymbol(String),
    #[error("operand out of range: {0}")]
    OperandRange(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

fn err<T>(line: usize, kind: AsmErrorKind) -> Result<T, AsmError> {
    Err(AsmError { line, kind })
}

fn syntax<T>(line: usize, msg: impl Into<String>) -> Result<T, AsmError> {
    err(line, AsmErrorKind::Syntax(msg.into()))
}

#[derive(Debug, Clone)]
enum Term {
    Num(i64),
    Sym(String),
}

#[derive(Debug, Clone)]
struct Expr {
    terms: Vec<(i64, Term)>,
}

#[derive(Debug, Clone)]
enum Operand {
    Reg(u8),
    Expr(Expr),
    Mem(Expr, u8),
}

#[derive(Debug, Clone)]
enum Stmt {
    Insn { mnemonic: String, ops: Vec<Operand> },
    Words(Vec<Expr>),
    Bytes(Vec<Expr>),
    Raw(Vec<u8>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Symbol {
    Label(u32),
    Const(i64),
}

fn parse_number(tok: &str) -> Option<i64> {
    let t = tok.trim();
    if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        return i64::from_str_radix(h, 16).ok();
    }
    if let Some(b) = t.strip_prefix("0b") {
        return i64::from_str_radix(b, 2).ok();
    }
    if t.len() == 3 && t.starts_with('\'') && t.ends_with('\'') {
        return Some(t.as_bytes()[1] as i64);
    }
    if t.starts_with(|c: char| c.is_ascii_digit()) {
        return t.parse().ok();
    }
    None
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_expr(line: usize, text: &str) -> Result<Expr, AsmError> {
    let text = text.trim();
    if text.is_empty() {
        return syntax(line, "missing operand");
    }
    let mut terms = Vec::new();
    let mut sign = 1i64;
    let mut cur = String::new();
    let flush = |cur: &mut String, sign: i64, terms: &mut Vec<(i64, Term)>| {
        let t = cur.trim().to_string();
        cur.clear();
        if t.is_empty() {
            return syntax(line, "empty term in expression");
        }
        if let Some(n) = parse_number(&t) {
            terms.push((sign, Term::Num(n)));
        } else if is_ident(&t) {
            terms.push((sign, Term::Sym(t)));
        } else {
            return syntax(line, format!("bad term `{t}`"));
        }
        Ok(())
    };
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    // Leading sign.
    while i < chars.len() && (chars[i] == '-' || chars[i] == '+' || chars[i] == ' ') {
        if chars[i] == '-' {
            sign = -sign;
        }
        i += 1;
    }
    let mut in_char = false;
    while i < chars.len() {
        let c = chars[i];
        if c == '\'' {
            in_char = !in_char;
            cur.push(c);
        } else if !in_char && (c == '+' || c == '-') && !cur.trim().is_empty() {
            flush(&mut cur, sign, &mut terms)?;
            sign = if c == '-' { -1 } else { 1 };
        } else {
            cur.push(c);
        }
        i += 1;
    }
    flush(&mut cur, sign, &mut terms)?;
    Ok(Expr { terms })
}

fn parse_reg(tok: &str) -> Option<u8> {
    let t = tok.trim();
    let n = t.strip_prefix('r').or_else(|| t.strip_prefix('R'))?;
    let v: u8 = n.parse().ok()?;
    ((v as usize) < NUM_REGS && n == v.to_string()).then_some(v)
}

fn parse_operand(line: usize, tok: &str) -> Result<Operand, AsmError> {
    let t = tok.trim();
    if let Some(r) = parse_reg(t) {
        return Ok(Operand::Reg(r));
    }
    if t.ends_with(')') {
        if let Some(open) = t.rfind('(') {
            let base = &t[open + 1..t.len() - 1];
            let Some(r) = parse_reg(base) else {
                return syntax(line, format!("bad base register `{base}`"));
            };
            let off = t[..open].trim();
            let expr = if off.is_empty() {
                Expr {
                    terms: vec![(1, Term::Num(0))],
                }
            } else {
                parse_expr(line, off)?
            };
            return Ok(Operand::Mem(expr, r));
        }
    }
    Ok(Operand::Expr(parse_expr(line, t)?))
}

fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_char = false;
    for c in s.chars() {
        match c {
            '\'' => {
                in_char = !in_char;
                cur.push(c);
            }
            ',' if !in_char => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() || !out.is_empty() {
        out.push(cur);
    }
    out
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    let mut in_char = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' if !in_char => in_str = !in_str,
            '\'' if !in_str => in_char = !in_char,
            ';' | '#' if !in_str && !in_char => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_string(line: usize, s: &str) -> Result<Vec<u8>, AsmError> {
    let s = s.trim();
    if !(s.len() >= 2 && s.starts_with('"') && s.ends_with('"')) {
        return syntax(line, "expected quoted string");
    }
    let mut out = Vec::new();
    let mut chars = s[1..s.len() - 1].chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push(b'\n'),
                Some('t') => out.push(b'\t'),
                Some('0') => out.push(0),
                Some('\\') => out.push(b'\\'),
                Some('"') => out.push(b'"'),
                other => return syntax(line, format!("bad escape {other:?}")),
            }
        } else {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
        }
    }
    Ok(out)
}

struct Assembler {
    base: u32,
    symbols: HashMap<String, (Symbol, usize)>,
    // (line, offset, statement)
    items: Vec<(usize, u32, Stmt)>,
    offset: u32,
}

impl Assembler {
    fn define(&mut self, line: usize, name: &str, sym: Symbol) -> Result<(), AsmError> {
        if self.symbols.insert(name.to_string(), (sym, line)).is_some() {
            return err(line, AsmErrorKind::DuplicateSymbol(name.to_string()));
        }
        Ok(())
    }

    fn const_value(&self, line: usize, e: &Expr) -> Result<i64, AsmError> {
        let mut v = 0i64;
        for (sign, t) in &e.terms {
            let x = match t {
                Term::Num(n) => *n,
                Term::Sym(s) => match self.symbols.get(s) {
                    Some((Symbol::Const(c), _)) => *c,
                    Some((Symbol::Label(o), _)) => self.base as i64 + *o as i64,
                    None => return err(line, AsmErrorKind::UndefinedSymbol(s.clone())),
                },
            };
            v = v.wrapping_add(sign * x);
        }
        Ok(v)
    }

    /// Value and whether the expression mentions a label.
    fn value(&self, line: usize, e: &Expr) -> Result<(i64, bool), AsmError> {
        let mentions_label = e.terms.iter().any(|(_, t)| {
            matches!(t, Term::Sym(s) if matches!(self.symbols.get(s), Some((Symbol::Label(_), _))))
        });
        Ok((self.const_value(line, e)?, mentions_label))
    }

    fn pass1(&mut self, src: &str) -> Result<(), AsmError> {
        for (idx, raw) in src.lines().enumerate() {
            let line = idx + 1;
            let mut text = strip_comment(raw).trim();
            // Labels, possibly several, before the statement.
            while let Some(colon) = text.find(':') {
                let name = text[..colon].trim();
                if !is_ident(name) || name.starts_with('.') {
                    break;
                }
                self.define(line, name, Symbol::Label(self.offset))?;
                text = text[colon + 1..].trim();
            }
            if text.is_empty() {
                continue;
            }
            let (head, rest) = match text.find(char::is_whitespace) {
                Some(i) => (&text[..i], text[i..].trim()),
                None => (text, ""),
            };
            let head_lc = head.to_ascii_lowercase();
            let stmt = match head_lc.as_str() {
                ".equ" => {
                    let parts = split_operands(rest);
                    if parts.len() != 2 || !is_ident(parts[0].trim()) {
                        return syntax(line, ".equ expects NAME, value");
                    }
                    let v = self.const_value(line, &parse_expr(line, &parts[1])?)?;
                    self.define(line, parts[0].trim(), Symbol::Const(v))?;
                    continue;
                }
                ".word" => Stmt::Words(
                    split_operands(rest)
                        .iter()
                        .map(|p| parse_expr(line, p))
                        .collect::<Result<_, _>>()?,
                ),
                ".byte" => Stmt::Bytes(
                    split_operands(rest)
                        .iter()
                        .map(|p| parse_expr(line, p))
                        .collect::<Result<_, _>>()?,
                ),
                ".ascii" => Stmt::Raw(parse_string(line, rest)?),
                ".space" | ".align" => {
                    let n = self.const_value(line, &parse_expr(line, rest)?)?;
                    if !(0..=1 << 24).contains(&n) {
                        return err(line, AsmErrorKind::OperandRange(format!("{head} {n}")));
                    }
                    let pad = if head_lc == ".space" {
                        n as u32
                    } else if n == 0 {
                        0
                    } else {
                        (n as u32 - self.offset % n as u32) % n as u32
                    };
                    Stmt::Raw(vec![0; pad as usize])
                }
                d if d.starts_with('.') => {
                    return syntax(line, format!("unknown directive `{head}`"))
                }
                _ => {
                    let ops = split_operands(rest)
                        .iter()
                        .map(|p| parse_operand(line, p))
                        .collect::<Result<Vec<_>, _>>()?;
                    Stmt::Insn {
                        mnemonic: head.to_ascii_uppercase(),
                        ops,
                    }
                }
            };
            let size = match &stmt {
                Stmt::Insn { .. } => INSN_BYTES,
                Stmt::Words(w) => 4 * w.len() as u32,
                Stmt::Bytes(b) => b.len() as u32,
                Stmt::Raw(r) => r.len() as u32,
            };
            self.items.push((line, self.offset, stmt));
            self.offset = self.offset.checked_add(size).ok_or(AsmError {
                line,
                kind: AsmErrorKind::OperandRange("image too large".into()),
            })?;
        }
        Ok(())
    }

    fn insn(
        &self,
        line: usize,
        at: u32,
        mnemonic: &str,
        ops: &[Operand],
    ) -> Result<Instruction, AsmError> {
        let want = |n: usize| -> Result<(), AsmError> {
            if ops.len() != n {
                return syntax(
                    line,
                    format!("{mnemonic} takes {n} operand(s), got {}", ops.len()),
                );
            }
            Ok(())
        };
        let reg = |i: usize| -> Result<u8, AsmError> {
            match &ops[i] {
                Operand::Reg(r) => Ok(*r),
                _ => syntax(
                    line,
                    format!("{mnemonic}: operand {} must be a register", i + 1),
                ),
            }
        };
        let imm32 = |i: usize| -> Result<u32, AsmError> {
            let Operand::Expr(e) = &ops[i] else {
                return syntax(
                    line,
                    format!("{mnemonic}: operand {} must be a value", i + 1),
                );
            };
            let (v, _) = self.value(line, e)?;
            if !(i32::MIN as i64..=u32::MAX as i64).contains(&v) {
                return err(
                    line,
                    AsmErrorKind::OperandRange(format!("{v} does not fit 32 bits")),
                );
            }
            Ok(v as u32)
        };
        let target = |i: usize| -> Result<i32, AsmError> {
            let Operand::Expr(e) = &ops[i] else {
                return syntax(
                    line,
                    format!("{mnemonic}: operand {} must be a target", i + 1),
                );
            };
            let (v, rel) = self.value(line, e)?;
            let off = if rel {
                v - (self.base as i64 + at as i64)
            } else {
                v
            };
            i32::try_from(off).map_err(|_| AsmError {
                line,
                kind: AsmErrorKind::OperandRange(format!("offset {off}")),
            })
        };
        let mem = |i: usize| -> Result<(u8, i32), AsmError> {
            let Operand::Mem(e, base) = &ops[i] else {
                return syntax(
                    line,
                    format!("{mnemonic}: operand {} must be off(reg)", i + 1),
                );
            };
            let (v, _) = self.value(line, e)?;
            if !(i32::MIN as i64..=u32::MAX as i64).contains(&v) {
                return err(line, AsmErrorKind::OperandRange(format!("offset {v}")));
            }
            Ok((*base, v as u32 as i32))
        };
        let alu = AluOp::ALL.iter().find(|op| op.mnemonic() == mnemonic);
        if let Some(&op) = alu {
            want(3)?;
            return Ok(Instruction::Alu {
                op,
                rd: reg(0)?,
                rs1: reg(1)?,
                rs2: reg(2)?,
            });
        }
        Ok(match mnemonic {
            "LI" => {
                want(2)?;
                Instruction::Li {
                    rd: reg(0)?,
                    imm: imm32(1)?,
                }
            }
            "MOV" => {
                want(2)?;
                Instruction::Mov {
                    rd: reg(0)?,
                    rs: reg(1)?,
                }
            }
            "LD" | "LDB" | "ST" | "STB" => {
                want(2)?;
                let r = reg(0)?;
                let (base, offset) = mem(1)?;
                match mnemonic {
                    "LD" => Instruction::Ld {
                        rd: r,
                        base,
                        offset,
                    },
                    "LDB" => Instruction::Ldb {
                        rd: r,
                        base,
                        offset,
                    },
                    "ST" => Instruction::St {
                        rs: r,
                        base,
                        offset,
                    },
                    _ => Instruction::Stb {
                        rs: r,
                        base,
                        offset,
                    },
                }
            }
            "BEQ" | "BNE" | "BLTU" => {
                want(3)?;
                let cond = match mnemonic {
                    "BEQ" => Cond::Eq,
                    "BNE" => Cond::Ne,
                    _ => Cond::Ltu,
                };
                Instruction::Branch {
                    cond,
                    rs1: reg(0)?,
                    rs2: reg(1)?,
                    offset: target(2)?,
                }
            }
            "JAL" => {
                want(2)?;
                Instruction::Jal {
                    rd: reg(0)?,
                    offset: target(1)?,
                }
            }
            "JR" => {
                want(1)?;
                Instruction::Jr { rs: reg(0)? }
            }
            "SYS" => {
                want(0)?;
                Instruction::Sys
            }
            "HALT" => {
                want(0)?;
                Instruction::Halt
            }
            other => return syntax(line, format!("unknown mnemonic `{other}`")),
        })
    }

    fn pass2(&self) -> Result<Vec<u8>, AsmError> {
        let mut out = Vec::with_capacity(self.offset as usize);
        for (line, at, stmt) in &self.items {
            let line = *line;
            match stmt {
                Stmt::Insn { mnemonic, ops } => {
                    out.extend_from_slice(&self.insn(line, *at, mnemonic, ops)?.encode())
                }
                Stmt::Words(ws) => {
                    for w in ws {
                        let (v, _) = self.value(line, w)?;
                        if !(i32::MIN as i64..=u32::MAX as i64).contains(&v) {
                            return err(line, AsmErrorKind::OperandRange(format!(".word {v}")));
                        }
                        out.extend_from_slice(&(v as u32).to_le_bytes());
                    }
                }
                Stmt::Bytes(bs) => {
                    for b in bs {
                        let (v, _) = self.value(line, b)?;
                        if !(-128..=255).contains(&v) {
                            return err(line, AsmErrorKind::OperandRange(format!(".byte {v}")));
                        }
                        out.push(v as u8);
                    }
                }
                Stmt::Raw(r) => out.extend_from_slice(r),
            }
        }
        Ok(out)
    }
}

/// Assembles `src` for loading at address `base`.
pub fn assemble_at(src: &str, base: u32) -> Result<Vec<u8>, AsmError> {
    let mut a = Assembler {
        base,
        symbols: HashMap::new(),
        items: Vec::new(),
        offset: 0,
    };
    a.pass1(src)?;
    a.pass2()
}

/// Code plus the address of every label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assembled {
    pub code: Vec<u8>,
    pub labels: std::collections::BTreeMap<String, u32>,
}

impl Assembled {
    pub fn label(&self, name: &str) -> Option<u32> {
        self.labels.get(name).copied()
    }
}

/// Like [`assemble_at`], also returning the label table.
pub fn assemble_symbols(src: &str, base: u32) -> Result<Assembled, AsmError> {
    let mut a = Assembler {
        base,
        symbols: HashMap::new(),
        items: Vec::new(),
        offset: 0,
    };
    a.pass1(src)?;
    let code = a.pass2()?;
    let labels = a
        .symbols
        .iter()
        .filter_map(|(k, (s, _))| match s {
            Symbol::Label(o) => Some((k.clone(), base.wrapping_add(*o))),
            Symbol::Const(_) => None,
        })
        .collect();
    Ok(Assembled { code, labels })
}

/// Assembles `src` for loading at address 0.
pub fn assemble(src: &str) -> Result<Vec<u8>, AsmError> {
    assemble_at(src, 0)
}

/// Renders one instruction in canonical form.
pub fn format_insn(insn: &Instruction) -> String {
    match *insn {
        Instruction::Li { rd, imm } => format!("LI r{rd}, {imm:#x}"),
        Instruction::Mov { rd, rs } => format!("MOV r{rd}, r{rs}"),
        Instruction::Alu { op, rd, rs1, rs2 } => format!("{} r{rd}, r{rs1}, r{rs2}", op.mnemonic()),
        Instruction::Ld { rd, base, offset } => format!("LD r{rd}, {offset}(r{base})"),
        Instruction::Ldb { rd, base, offset } => format!("LDB r{rd}, {offset}(r{base})"),
        Instruction::St { rs, base, offset } => format!("ST r{rs}, {offset}(r{base})"),
        Instruction::Stb { rs, base, offset } => format!("STB r{rs}, {offset}(r{base})"),
        Instruction::Branch {
            cond,
            rs1,
            rs2,
            offset,
        } => {
            format!("{} r{rs1}, r{rs2}, {offset}", cond.mnemonic())
        }
        Instruction::Jal { rd, offset } => format!("JAL r{rd}, {offset}"),
        Instruction::Jr { rs } => format!("JR r{rs}"),
        Instruction::Sys => "SYS".to_string(),
        Instruction::Halt => "HALT".to_string(),
    }
}

/// Canonical text for a flat image. Words that are not valid instructions
/// print as `.word` pairs and a short tail as `.byte`s, so the output
/// always reassembles to the same bytes.
pub fn disassemble(code: &[u8]) -> String {
    let mut out = String::new();
    let mut chunks = code.chunks_exact(INSN_BYTES as usize);
    for c in &mut chunks {
        let w: &[u8; 8] = c.try_into().unwrap();
        match Instruction::decode(w) {
            Some(i) => writeln!(out, "{}", format_insn(&i)).unwrap(),
            None => {
                for half in w.chunks(4) {
                    let v = u32::from_le_bytes(half.try_into().unwrap());
                    writeln!(out, ".word {v:#010x}").unwrap();
                }
            }
        }
    }
    for b in chunks.remainder() {
        writeln!(out, ".byte {b:#04x}").unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halt_is_one_word() {
        assert_eq!(
            assemble("HALT").unwrap(),
            Instruction::Halt.encode().to_vec()
        );
    }

    #[test]
    fn backward_branch_round_trips() {
        let code = assemble("loop: LI r1, 0\nBNE r1, r0, loop").unwrap();
        let text = disassemble(&code);
        assert_eq!(text, "LI r1, 0x0\nBNE r1, r0, -8\n");
        assert_eq!(assemble(&text).unwrap(), code);
    }

    #[test]
    fn forward_label_and_absolute_li() {
        let code = assemble_at(
            "LI r2, data\nJAL r15, end\ndata: .word 7\nend: HALT",
            0x1000,
        )
        .unwrap();
        let text = disassemble(&code[..16]);
        assert_eq!(text, "LI r2, 0x1010\nJAL r15, 12\n");
    }

    #[test]
    fn directives_and_comments() {
        let src = r#"
            .equ N, 3 ; count
            start:  # nothing here
            .byte 1, N, 'a'
            .align 4
            .ascii "hi\n"
            .space 2
        "#;
        assert_eq!(
            assemble(src).unwrap(),
            vec![1, 3, b'a', 0, b'h', b'i', b'\n', 0, 0]
        );
    }

    #[test]
    fn memory_operands() {
        let code = assemble("LD r1, -4(r2)\nSTB r3, (r4)\nST r5, 0x10+4(r6)").unwrap();
        assert_eq!(
            disassemble(&code),
            "LD r1, -4(r2)\nSTB r3, 0(r4)\nST r5, 20(r6)\n"
        );
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = assemble("HALT\nFROB r1").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(matches!(e.kind, AsmErrorKind::Syntax(_)));
        let e = assemble("\n\nBEQ r1, r2, nowhere").unwrap_err();
        assert_eq!(
            e,
            AsmError {
                line: 3,
                kind: AsmErrorKind::UndefinedSymbol("nowhere".into())
            }
        );
        let e = assemble("LI r1, 0x100000000").unwrap_err();
        assert!(matches!(e.kind, AsmErrorKind::OperandRange(_)));
        let e = assemble("ADD r1, r2, r16").unwrap_err();
        assert!(matches!(e.kind, AsmErrorKind::Syntax(_)));
        let e = assemble("a: HALT\na: HALT").unwrap_err();
        assert!(matches!(e.kind, AsmErrorKind::DuplicateSymbol(_)));
        let e = assemble(".byte 300").unwrap_err();
        assert!(matches!(e.kind, AsmErrorKind::OperandRange(_)));
    }

    #[test]
    fn data_that_is_not_code_disassembles_as_words() {
        let code = assemble(".word 0xdeadbeef, 0\n.byte 9").unwrap();
        let text = disassemble(&code);
        assert_eq!(text, ".word 0xdeadbeef\n.word 0x00000000\n.byte 0x09\n");
        assert_eq!(assemble(&text).unwrap(), code);
    }

    #[test]
    fn deterministic_output() {
        let src = "x: LI r1, x\nloop: ADD r1, r1, r1\nBLTU r1, r2, loop\nHALT";
        assert_eq!(assemble(src).unwrap(), assemble(src).unwrap());
    }
}
