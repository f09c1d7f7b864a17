//! A small 16-register load/store ISA and its assembly text format.
//!
//! ```text
//! # comment
//! .word 0x1000 42        # initial data: mem[0x1000] = 42
//! .core 1                # following instructions belong to core 1
//! start:
//!     add  r1, r2, r3    # third operand may be a register ...
//!     add  r1, r1, 8     # ... or an immediate / label
//!     ld   r4, r1, 16    # r4 = mem[r1 + 16]
//!     st   r4, r1, 24    # mem[r1 + 24] = r4
//!     blt  r1, r2, start
//!     halt
//! ```
//!
//! `r0` reads as zero and ignores writes. Data addresses are byte addresses
//! of 8-byte words; the low three bits are ignored and addresses wrap at the
//! configured memory size.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_REGS: usize = 16;
pub const WORD_BYTES: u64 = 8;
/// Bytes of address space occupied by one instruction (for the I-cache).
pub const INSN_BYTES: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg(u8);

impl Reg {
    pub const ZERO: Reg = Reg(0);

    pub fn new(idx: u8) -> Option<Self> {
        ((idx as usize) < NUM_REGS).then_some(Reg(idx))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Instruction class, as reported in the committed timeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Opcode {
    Alu,
    Mul,
    Div,
    Load,
    Store,
    Branch,
    Jmp,
    Rdcycle,
    Fence,
    Halt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AluFn {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Slt,
    Sltu,
}

impl AluFn {
    pub fn eval(self, a: u64, b: u64) -> u64 {
        match self {
            AluFn::Add => a.wrapping_add(b),
            AluFn::Sub => a.wrapping_sub(b),
            AluFn::And => a & b,
            AluFn::Or => a | b,
            AluFn::Xor => a ^ b,
            AluFn::Shl => a.wrapping_shl((b & 63) as u32),
            AluFn::Shr => a.wrapping_shr((b & 63) as u32),
            AluFn::Slt => u64::from((a as i64) < (b as i64)),
            AluFn::Sltu => u64::from(a < b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cond {
    Eq,
    Ne,
    Lt,
    Ge,
}

impl Cond {
    pub fn taken(self, a: u64, b: u64) -> bool {
        match self {
            Cond::Eq => a == b,
            Cond::Ne => a != b,
            Cond::Lt => (a as i64) < (b as i64),
            Cond::Ge => (a as i64) >= (b as i64),
        }
    }
}

/// Decoded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    Alu(AluFn),
    Mul,
    Div,
    Rem,
    Load,
    Store,
    Branch(Cond),
    /// Direct jump to `target`.
    Jmp,
    /// Indirect jump to the instruction index held in `src1`.
    JmpReg,
    Rdcycle,
    Fence,
    Halt,
}

/// Second ALU operand: a register or an immediate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    Imm(i64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Insn {
    pub kind: Kind,
    pub dst: Option<Reg>,
    pub src1: Option<Reg>,
    pub src2: Option<Operand>,
    /// Branch / jump target (instruction index).
    pub target: Option<usize>,
}

impl Insn {
    pub fn opcode(&self) -> Opcode {
        match self.kind {
            Kind::Alu(_) => Opcode::Alu,
            Kind::Mul => Opcode::Mul,
            Kind::Div | Kind::Rem => Opcode::Div,
            Kind::Load => Opcode::Load,
            Kind::Store => Opcode::Store,
            Kind::Branch(_) => Opcode::Branch,
            Kind::Jmp | Kind::JmpReg => Opcode::Jmp,
            Kind::Rdcycle => Opcode::Rdcycle,
            Kind::Fence => Opcode::Fence,
            Kind::Halt => Opcode::Halt,
        }
    }

    pub fn halt() -> Self {
        Insn { kind: Kind::Halt, dst: None, src1: None, src2: None, target: None }
    }

    /// Registers read by this instruction.
    pub fn sources(&self) -> [Option<Reg>; 2] {
        let second = match self.src2 {
            Some(Operand::Reg(r)) => Some(r),
            _ => None,
        };
        [self.src1, second]
    }

    /// Registers an instruction waits on before issue. Stores read their
    /// value register from `dst`.
    pub fn reads(&self) -> [Option<Reg>; 2] {
        match self.kind {
            Kind::Store => [self.src1, self.dst],
            _ => self.sources(),
        }
    }

    /// Register written at completion, if any (`r0` is never written).
    pub fn writes(&self) -> Option<Reg> {
        match self.kind {
            Kind::Store => None,
            _ => self.dst.filter(|r| *r != Reg::ZERO),
        }
    }

    /// Memory offset / immediate part of the second operand.
    pub fn imm(&self) -> i64 {
        match self.src2 {
            Some(Operand::Imm(v)) => v,
            _ => 0,
        }
    }
}

/// Instructions for one core.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreProgram {
    pub insns: Vec<Insn>,
    pub labels: BTreeMap<String, usize>,
}

impl CoreProgram {
    pub fn len(&self) -> usize {
        self.insns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.insns.is_empty()
    }
}

/// Decoded program image: per-core code plus the initial data segment.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub cores: Vec<CoreProgram>,
    pub data: BTreeMap<u64, u64>,
}

impl Program {
    /// Instruction count across all cores.
    pub fn len(&self) -> usize {
        self.cores.iter().map(CoreProgram::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: range error: {msg}")]
    Range { line: usize, msg: String },
}

impl AsmError {
    pub fn line(&self) -> usize {
        match self {
            AsmError::Parse { line, .. } | AsmError::Range { line, .. } => *line,
        }
    }
}

/// Operand as written, before label resolution.
#[derive(Debug, Clone)]
enum RawImm {
    Num(i64),
    Label(String),
}

struct Pending {
    line: usize,
    core: usize,
    index: usize,
    imm: RawImm,
    is_target: bool,
}

/// Parses assembly text, rejecting unknown mnemonics and registers.
///
/// `mem_bytes` bounds `.word` addresses.
pub fn load_program(text: &str, mem_bytes: u64) -> Result<Program, AsmError> {
    let mut cores: Vec<CoreProgram> = vec![CoreProgram::default()];
    let mut current = 0usize;
    let mut data = BTreeMap::new();
    let mut pending: Vec<Pending> = Vec::new();
    // labels are global across cores so a `.core` section may address another's code
    let mut labels: HashMap<String, (usize, usize)> = HashMap::new();

    for (lineno, raw_line) in text.lines().enumerate() {
        let line = lineno + 1;
        let mut body = raw_line.split('#').next().unwrap_or("").trim();
        let parse_err = |msg: String| AsmError::Parse { line, msg };

        while let Some(colon) = body.find(':') {
            let (label, rest) = body.split_at(colon);
            let label = label.trim();
            if !is_ident(label) {
                return Err(parse_err(format!("malformed label `{label}`")));
            }
            if labels.insert(label.to_string(), (current, cores[current].len())).is_some() {
                return Err(parse_err(format!("duplicate label `{label}`")));
            }
            let here = cores[current].len();
            cores[current].labels.insert(label.to_string(), here);
            body = rest[1..].trim();
        }
        if body.is_empty() {
            continue;
        }

        let (mnemonic, args) = match body.find(char::is_whitespace) {
            Some(i) => (&body[..i], body[i..].trim()),
            None => (body, ""),
        };
        let args: Vec<&str> = if args.is_empty() { Vec::new() } else { args.split(',').map(str::trim).collect() };
        let mnemonic = mnemonic.to_ascii_lowercase();

        match mnemonic.as_str() {
            ".word" => {
                let parts: Vec<&str> = args.iter().flat_map(|a| a.split_whitespace()).collect();
                if parts.len() != 2 {
                    return Err(parse_err(".word expects `addr value`".into()));
                }
                let addr = parse_num(parts[0]).ok_or_else(|| parse_err(format!("bad address `{}`", parts[0])))?;
                let value = parse_num(parts[1]).ok_or_else(|| parse_err(format!("bad value `{}`", parts[1])))?;
                if addr < 0 || addr as u64 >= mem_bytes {
                    return Err(AsmError::Range {
                        line,
                        msg: format!("address {addr:#x} outside memory ({mem_bytes:#x} bytes)"),
                    });
                }
                if !(addr as u64).is_multiple_of(WORD_BYTES) {
                    return Err(AsmError::Range { line, msg: format!("address {addr:#x} is not word aligned") });
                }
                data.insert(addr as u64, value as u64);
                continue;
            }
            ".core" => {
                let idx = args
                    .first()
                    .and_then(|a| parse_num(a))
                    .filter(|v| (0..8).contains(v))
                    .ok_or_else(|| parse_err(".core expects a core index 0..8".into()))?
                    as usize;
                while cores.len() <= idx {
                    cores.push(CoreProgram::default());
                }
                current = idx;
                continue;
            }
            _ => {}
        }

        let index = cores[current].len();
        let reg = |s: &str| parse_reg(s, line);
        let expect = |n: usize| -> Result<(), AsmError> {
            if args.len() == n {
                Ok(())
            } else {
                Err(AsmError::Parse { line, msg: format!("`{mnemonic}` expects {n} operands, got {}", args.len()) })
            }
        };
        let mut push_imm = |imm: RawImm, is_target: bool| {
            pending.push(Pending { line, core: current, index, imm, is_target });
        };

        let alu = |f: AluFn| Kind::Alu(f);
        let insn = match mnemonic.as_str() {
            "add" | "sub" | "and" | "or" | "xor" | "shl" | "shr" | "slt" | "sltu" | "mul" | "div" | "rem" => {
                expect(3)?;
                let kind = match mnemonic.as_str() {
                    "add" => alu(AluFn::Add),
                    "sub" => alu(AluFn::Sub),
                    "and" => alu(AluFn::And),
                    "or" => alu(AluFn::Or),
                    "xor" => alu(AluFn::Xor),
                    "shl" => alu(AluFn::Shl),
                    "shr" => alu(AluFn::Shr),
                    "slt" => alu(AluFn::Slt),
                    "sltu" => alu(AluFn::Sltu),
                    "mul" => Kind::Mul,
                    "div" => Kind::Div,
                    _ => Kind::Rem,
                };
                let src2 = reg_or_imm(args[2], line, &mut push_imm)?;
                Insn { kind, dst: Some(reg(args[0])?), src1: Some(reg(args[1])?), src2: Some(src2), target: None }
            }
            "li" => {
                expect(2)?;
                let src2 = imm_operand(args[1], line, &mut push_imm)?;
                Insn {
                    kind: alu(AluFn::Add),
                    dst: Some(reg(args[0])?),
                    src1: Some(Reg::ZERO),
                    src2: Some(src2),
                    target: None,
                }
            }
            "mov" => {
                expect(2)?;
                Insn {
                    kind: alu(AluFn::Add),
                    dst: Some(reg(args[0])?),
                    src1: Some(reg(args[1])?),
                    src2: Some(Operand::Imm(0)),
                    target: None,
                }
            }
            "nop" => {
                expect(0)?;
                Insn {
                    kind: alu(AluFn::Add),
                    dst: Some(Reg::ZERO),
                    src1: Some(Reg::ZERO),
                    src2: Some(Operand::Imm(0)),
                    target: None,
                }
            }
            "ld" => {
                expect(3)?;
                let src2 = imm_operand(args[2], line, &mut push_imm)?;
                Insn {
                    kind: Kind::Load,
                    dst: Some(reg(args[0])?),
                    src1: Some(reg(args[1])?),
                    src2: Some(src2),
                    target: None,
                }
            }
            "st" => {
                // st value, base, offset ; value register travels in `dst`
                expect(3)?;
                let src2 = imm_operand(args[2], line, &mut push_imm)?;
                Insn {
                    kind: Kind::Store,
                    dst: Some(reg(args[0])?),
                    src1: Some(reg(args[1])?),
                    src2: Some(src2),
                    target: None,
                }
            }
            "beq" | "bne" | "blt" | "bge" => {
                expect(3)?;
                let cond = match mnemonic.as_str() {
                    "beq" => Cond::Eq,
                    "bne" => Cond::Ne,
                    "blt" => Cond::Lt,
                    _ => Cond::Ge,
                };
                let a = reg(args[0])?;
                let b = reg(args[1])?;
                push_imm(raw_imm(args[2], line)?, true);
                Insn { kind: Kind::Branch(cond), dst: None, src1: Some(a), src2: Some(Operand::Reg(b)), target: None }
            }
            "jmp" => {
                expect(1)?;
                push_imm(raw_imm(args[0], line)?, true);
                Insn { kind: Kind::Jmp, dst: None, src1: None, src2: None, target: None }
            }
            "jr" => {
                expect(1)?;
                Insn { kind: Kind::JmpReg, dst: None, src1: Some(reg(args[0])?), src2: None, target: None }
            }
            "rdcycle" => {
                expect(1)?;
                Insn { kind: Kind::Rdcycle, dst: Some(reg(args[0])?), src1: None, src2: None, target: None }
            }
            "fence" => {
                expect(0)?;
                Insn { kind: Kind::Fence, dst: None, src1: None, src2: None, target: None }
            }
            "halt" => {
                expect(0)?;
                Insn::halt()
            }
            other => return Err(parse_err(format!("unknown opcode `{other}`"))),
        };
        cores[current].insns.push(insn);
    }

    for p in pending {
        let value = match &p.imm {
            RawImm::Num(v) => *v,
            RawImm::Label(name) => match labels.get(name) {
                Some(&(_, idx)) => idx as i64,
                None => return Err(AsmError::Parse { line: p.line, msg: format!("undefined label `{name}`") }),
            },
        };
        let len = cores[p.core].insns.len();
        let insn = &mut cores[p.core].insns[p.index];
        if p.is_target {
            if value < 0 || value as usize > len {
                return Err(AsmError::Range { line: p.line, msg: format!("branch target {value} outside program") });
            }
            insn.target = Some(value as usize);
        } else {
            insn.src2 = Some(Operand::Imm(value));
        }
    }

    Ok(Program { cores, data })
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_num(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(&hex.replace('_', ""), 16).ok()? as i64
    } else {
        body.replace('_', "").parse::<u64>().ok()? as i64
    };
    Some(if neg { v.wrapping_neg() } else { v })
}

fn parse_reg(s: &str, line: usize) -> Result<Reg, AsmError> {
    let digits = s
        .strip_prefix('r')
        .or_else(|| s.strip_prefix('R'))
        .ok_or_else(|| AsmError::Parse { line, msg: format!("expected register, got `{s}`") })?;
    let idx: usize =
        digits.parse().map_err(|_| AsmError::Parse { line, msg: format!("expected register, got `{s}`") })?;
    if idx >= NUM_REGS {
        return Err(AsmError::Range { line, msg: format!("register r{idx} out of range (r0..r{})", NUM_REGS - 1) });
    }
    Ok(Reg(idx as u8))
}

fn raw_imm(s: &str, line: usize) -> Result<RawImm, AsmError> {
    if let Some(v) = parse_num(s) {
        Ok(RawImm::Num(v))
    } else if is_ident(s) {
        Ok(RawImm::Label(s.to_string()))
    } else {
        Err(AsmError::Parse { line, msg: format!("bad immediate `{s}`") })
    }
}

fn imm_operand(s: &str, line: usize, push: &mut impl FnMut(RawImm, bool)) -> Result<Operand, AsmError> {
    match raw_imm(s, line)? {
        RawImm::Num(v) => Ok(Operand::Imm(v)),
        label => {
            push(label, false);
            Ok(Operand::Imm(0))
        }
    }
}

fn reg_or_imm(s: &str, line: usize, push: &mut impl FnMut(RawImm, bool)) -> Result<Operand, AsmError> {
    let looks_like_reg =
        s.len() > 1 && (s.starts_with('r') || s.starts_with('R')) && s[1..].chars().all(|c| c.is_ascii_digit());
    if looks_like_reg {
        parse_reg(s, line).map(Operand::Reg)
    } else {
        imm_operand(s, line, push)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MEM: u64 = 1 << 20;

    #[test]
    fn halt_only() {
        let p = load_program("halt", MEM).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.cores[0].insns[0].opcode(), Opcode::Halt);
    }

    #[test]
    fn unknown_opcode_names_line() {
        let err = load_program("bogus r1", MEM).unwrap_err();
        assert_eq!(err.line(), 1);
        assert!(matches!(err, AsmError::Parse { .. }));
    }

    #[test]
    fn register_out_of_range() {
        let err = load_program("nop\nadd r1, r16, r2", MEM).unwrap_err();
        assert_eq!(err, AsmError::Range { line: 2, msg: "register r16 out of range (r0..r15)".into() });
    }

    #[test]
    fn word_out_of_range() {
        let err = load_program(".word 0x200000 1", MEM).unwrap_err();
        assert!(matches!(err, AsmError::Range { line: 1, .. }));
    }

    #[test]
    fn labels_and_immediates() {
        let src = "
            .word 0x100 7
            top: li r1, 3      # comment
            add r2, r1, r1
            add r2, r2, -1
            ld r3, r0, 0x100
            st r3, r0, 0x108
            bne r2, r0, top
            li r4, done
            jr r4
            done: halt
        ";
        let p = load_program(src, MEM).unwrap();
        let c = &p.cores[0];
        assert_eq!(c.len(), 9);
        assert_eq!(c.insns[5].target, Some(0));
        assert_eq!(c.insns[6].src2, Some(Operand::Imm(8)));
        assert_eq!(c.insns[2].src2, Some(Operand::Imm(-1)));
        assert_eq!(p.data.get(&0x100), Some(&7));
    }

    #[test]
    fn core_sections() {
        let p = load_program("halt\n.core 1\nnop\nhalt", MEM).unwrap();
        assert_eq!(p.cores.len(), 2);
        assert_eq!(p.cores[1].len(), 2);
    }

    #[test]
    fn undefined_label() {
        let err = load_program("jmp nowhere", MEM).unwrap_err();
        assert!(matches!(err, AsmError::Parse { line: 1, .. }));
    }
}
