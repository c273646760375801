//! The toy x86-64 subset: registers, operands, instructions, programs.
//!
//! Instructions occupy a fixed 4-byte stride starting at the code base
//! (0x1000 unless a `.base` directive says otherwise). The textual grammar
//! is handled by [`asm`], the inverse by [`print`].

pub mod abi;
pub mod asm;
pub mod print;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use abi::Abi;
pub use asm::{assemble, AsmError};
pub use print::print_program;

/// Width of one instruction slot in bytes.
pub const INSTR_STRIDE: u64 = 4;
/// Default address of the first instruction.
pub const DEFAULT_BASE: u64 = 0x1000;

/// General purpose registers in hardware encoding order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gpr {
    Rax,
    Rcx,
    Rdx,
    Rbx,
    Rsp,
    Rbp,
    Rsi,
    Rdi,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
}

impl Gpr {
    pub const ALL: [Gpr; 16] = [
        Gpr::Rax,
        Gpr::Rcx,
        Gpr::Rdx,
        Gpr::Rbx,
        Gpr::Rsp,
        Gpr::Rbp,
        Gpr::Rsi,
        Gpr::Rdi,
        Gpr::R8,
        Gpr::R9,
        Gpr::R10,
        Gpr::R11,
        Gpr::R12,
        Gpr::R13,
        Gpr::R14,
        Gpr::R15,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Gpr {
        Gpr::ALL[i]
    }

    pub fn name64(self) -> &'static str {
        [
            "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11",
            "r12", "r13", "r14", "r15",
        ][self.index()]
    }

    pub fn name32(self) -> &'static str {
        [
            "eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi", "r8d", "r9d", "r10d",
            "r11d", "r12d", "r13d", "r14d", "r15d",
        ][self.index()]
    }
}

/// Register operand width. `Byte` exists only for the `cl` shift count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegWidth {
    Q,
    D,
    B,
}

impl RegWidth {
    pub fn bits(self) -> u32 {
        match self {
            RegWidth::Q => 64,
            RegWidth::D => 32,
            RegWidth::B => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Reg {
    pub gpr: Gpr,
    pub width: RegWidth,
}

impl Reg {
    pub const fn q(gpr: Gpr) -> Reg {
        Reg { gpr, width: RegWidth::Q }
    }

    pub const fn d(gpr: Gpr) -> Reg {
        Reg { gpr, width: RegWidth::D }
    }

    pub fn parse(name: &str) -> Option<Reg> {
        if name == "cl" {
            return Some(Reg { gpr: Gpr::Rcx, width: RegWidth::B });
        }
        for g in Gpr::ALL {
            if g.name64() == name {
                return Some(Reg::q(g));
            }
            if g.name32() == name {
                return Some(Reg::d(g));
            }
        }
        None
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.width {
            RegWidth::Q => f.write_str(self.gpr.name64()),
            RegWidth::D => f.write_str(self.gpr.name32()),
            RegWidth::B => f.write_str("cl"),
        }
    }
}

/// Status flags modeled by the ISA.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Flag {
    Zf,
    Sf,
    Cf,
    Of,
}

impl Flag {
    pub const ALL: [Flag; 4] = [Flag::Zf, Flag::Sf, Flag::Cf, Flag::Of];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["zf", "sf", "cf", "of"][self.index()]
    }
}

/// Condition codes for `jcc` and `cmovcc`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    E,
    Ne,
    L,
    Le,
    G,
    Ge,
    B,
    Be,
    A,
    Ae,
    S,
    Ns,
    O,
    No,
}

impl Cond {
    pub const ALL: [Cond; 14] = [
        Cond::E,
        Cond::Ne,
        Cond::L,
        Cond::Le,
        Cond::G,
        Cond::Ge,
        Cond::B,
        Cond::Be,
        Cond::A,
        Cond::Ae,
        Cond::S,
        Cond::Ns,
        Cond::O,
        Cond::No,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            Cond::E => "e",
            Cond::Ne => "ne",
            Cond::L => "l",
            Cond::Le => "le",
            Cond::G => "g",
            Cond::Ge => "ge",
            Cond::B => "b",
            Cond::Be => "be",
            Cond::A => "a",
            Cond::Ae => "ae",
            Cond::S => "s",
            Cond::Ns => "ns",
            Cond::O => "o",
            Cond::No => "no",
        }
    }

    pub fn parse_suffix(s: &str) -> Option<Cond> {
        let c = match s {
            "e" | "z" => Cond::E,
            "ne" | "nz" => Cond::Ne,
            "l" => Cond::L,
            "le" => Cond::Le,
            "g" => Cond::G,
            "ge" => Cond::Ge,
            "b" | "c" => Cond::B,
            "be" => Cond::Be,
            "a" => Cond::A,
            "ae" | "nc" => Cond::Ae,
            "s" => Cond::S,
            "ns" => Cond::Ns,
            "o" => Cond::O,
            "no" => Cond::No,
            _ => return None,
        };
        Some(c)
    }

    /// Evaluate against concrete flag values `[zf, sf, cf, of]`.
    pub fn eval(self, flags: [bool; 4]) -> bool {
        let [zf, sf, cf, of] = flags;
        match self {
            Cond::E => zf,
            Cond::Ne => !zf,
            Cond::L => sf != of,
            Cond::Le => zf || sf != of,
            Cond::G => !zf && sf == of,
            Cond::Ge => sf == of,
            Cond::B => cf,
            Cond::Be => cf || zf,
            Cond::A => !cf && !zf,
            Cond::Ae => !cf,
            Cond::S => sf,
            Cond::Ns => !sf,
            Cond::O => of,
            Cond::No => !of,
        }
    }
}

/// `[base + index*scale + disp]` with an access size in bytes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemOperand {
    pub base: Option<Gpr>,
    pub index: Option<Gpr>,
    pub scale: u8,
    pub disp: i64,
    pub size: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    Imm(i64),
    Mem(MemOperand),
    Label(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mnemonic {
    Mov,
    Lea,
    Add,
    Sub,
    Imul,
    And,
    Or,
    Xor,
    Not,
    Neg,
    Shl,
    Shr,
    Sar,
    Cmp,
    Test,
    Push,
    Pop,
    Inc,
    Dec,
    Cmov(Cond),
    Jmp,
    Jcc(Cond),
    Call,
    Ret,
    Nop,
}

impl Mnemonic {
    pub fn arity(self) -> usize {
        use Mnemonic::*;
        match self {
            Ret | Nop => 0,
            Not | Neg | Push | Pop | Inc | Dec | Jmp | Jcc(_) | Call => 1,
            _ => 2,
        }
    }

    pub fn name(self) -> String {
        use Mnemonic::*;
        match self {
            Mov => "mov".into(),
            Lea => "lea".into(),
            Add => "add".into(),
            Sub => "sub".into(),
            Imul => "imul".into(),
            And => "and".into(),
            Or => "or".into(),
            Xor => "xor".into(),
            Not => "not".into(),
            Neg => "neg".into(),
            Shl => "shl".into(),
            Shr => "shr".into(),
            Sar => "sar".into(),
            Cmp => "cmp".into(),
            Test => "test".into(),
            Push => "push".into(),
            Pop => "pop".into(),
            Inc => "inc".into(),
            Dec => "dec".into(),
            Cmov(c) => format!("cmov{}", c.suffix()),
            Jmp => "jmp".into(),
            Jcc(c) => format!("j{}", c.suffix()),
            Call => "call".into(),
            Ret => "ret".into(),
            Nop => "nop".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Mnemonic> {
        use Mnemonic::*;
        let m = match s {
            "mov" => Mov,
            "lea" => Lea,
            "add" => Add,
            "sub" => Sub,
            "imul" => Imul,
            "and" => And,
            "or" => Or,
            "xor" => Xor,
            "not" => Not,
            "neg" => Neg,
            "shl" | "sal" => Shl,
            "shr" => Shr,
            "sar" => Sar,
            "cmp" => Cmp,
            "test" => Test,
            "push" => Push,
            "pop" => Pop,
            "inc" => Inc,
            "dec" => Dec,
            "jmp" => Jmp,
            "call" => Call,
            "ret" => Ret,
            "nop" => Nop,
            _ => {
                if let Some(rest) = s.strip_prefix("cmov") {
                    return Cond::parse_suffix(rest).map(Cmov);
                }
                if let Some(rest) = s.strip_prefix('j') {
                    return Cond::parse_suffix(rest).map(Jcc);
                }
                return None;
            }
        };
        Some(m)
    }
}

/// Exploration-relevant classification of an instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstructionCategory {
    NoOp,
    Normal,
    FunctionReturn,
    IndirectJump,
    DirectJump,
    ConditionalBranch,
    IndirectFunctionCall,
    DirectFunctionCall,
}

impl InstructionCategory {
    /// Whether lifting of the current block stops after this instruction.
    pub fn stops_block(self) -> bool {
        use InstructionCategory::*;
        !matches!(self, NoOp | Normal | DirectFunctionCall)
    }

    /// Whether the block's outgoing edges must be proven.
    pub fn needs_proof(self) -> bool {
        use InstructionCategory::*;
        matches!(self, FunctionReturn | IndirectJump | ConditionalBranch | IndirectFunctionCall)
    }
}

/// Classify an instruction by its control-flow behavior.
pub fn categorize(instr: &MachineInstruction) -> InstructionCategory {
    use InstructionCategory::*;
    let target_is_label = matches!(instr.operands.first(), Some(Operand::Label(_)));
    match instr.mnemonic {
        Mnemonic::Nop => NoOp,
        Mnemonic::Ret => FunctionReturn,
        Mnemonic::Jmp if target_is_label => DirectJump,
        Mnemonic::Jmp => IndirectJump,
        Mnemonic::Jcc(_) => ConditionalBranch,
        Mnemonic::Call if target_is_label => DirectFunctionCall,
        Mnemonic::Call => IndirectFunctionCall,
        _ => Normal,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineInstruction {
    pub address: u64,
    pub mnemonic: Mnemonic,
    pub operands: Vec<Operand>,
    pub category: InstructionCategory,
    /// Resolved addresses for every `Label` operand, in operand order.
    pub label_targets: Vec<u64>,
}

impl MachineInstruction {
    pub fn fallthrough(&self) -> u64 {
        self.address.wrapping_add(INSTR_STRIDE)
    }

    /// Target of a direct jump/branch/call.
    pub fn direct_target(&self) -> Option<u64> {
        match self.operands.first() {
            Some(Operand::Label(_)) => self.label_targets.first().copied(),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub instructions: BTreeMap<u64, MachineInstruction>,
    pub data: BTreeMap<u64, u8>,
    pub labels: BTreeMap<String, u64>,
    pub entry: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("fell off code at {0:#x}: address is not mapped")]
    Unmapped(u64),
    #[error("fell off code at {0:#x}: address holds data, not code")]
    NotCode(u64),
}

impl Program {
    pub fn decode_at(&self, addr: u64) -> Result<&MachineInstruction, DecodeError> {
        decode_at(self, addr)
    }

    pub fn is_code(&self, addr: u64) -> bool {
        self.instructions.contains_key(&addr)
    }

    pub fn label_of(&self, addr: u64) -> Option<&str> {
        self.labels.iter().find(|(_, &a)| a == addr).map(|(n, _)| n.as_str())
    }

    /// Read `size` little-endian bytes of program data.
    pub fn read_data(&self, addr: u64, size: u32) -> Option<u64> {
        let mut v = 0u64;
        for i in 0..size as u64 {
            let b = *self.data.get(&addr.wrapping_add(i))?;
            v |= (b as u64) << (8 * i);
        }
        Some(v)
    }

    /// Contiguous `[lo, hi)` ranges covered by `.data` bytes.
    pub fn data_ranges(&self) -> Vec<(u64, u64)> {
        let mut out: Vec<(u64, u64)> = Vec::new();
        for &a in self.data.keys() {
            match out.last_mut() {
                Some((_, hi)) if *hi == a => *hi = a + 1,
                _ => out.push((a, a + 1)),
            }
        }
        out
    }
}

pub fn decode_at(program: &Program, addr: u64) -> Result<&MachineInstruction, DecodeError> {
    if let Some(i) = program.instructions.get(&addr) {
        return Ok(i);
    }
    if program.data.contains_key(&addr) {
        Err(DecodeError::NotCode(addr))
    } else {
        Err(DecodeError::Unmapped(addr))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instr(m: Mnemonic, ops: Vec<Operand>) -> MachineInstruction {
        let mut i = MachineInstruction {
            address: 0x1000,
            mnemonic: m,
            operands: ops,
            category: InstructionCategory::Normal,
            label_targets: vec![],
        };
        i.category = categorize(&i);
        i
    }

    #[test]
    fn categories_follow_exploration_table() {
        use InstructionCategory::*;
        let l = || Operand::Label("L".into());
        let r = || Operand::Reg(Reg::q(Gpr::Rax));
        assert_eq!(instr(Mnemonic::Jcc(Cond::E), vec![l()]).category, ConditionalBranch);
        assert_eq!(instr(Mnemonic::Nop, vec![]).category, NoOp);
        assert_eq!(instr(Mnemonic::Ret, vec![]).category, FunctionReturn);
        assert_eq!(instr(Mnemonic::Jmp, vec![r()]).category, IndirectJump);
        assert_eq!(instr(Mnemonic::Jmp, vec![l()]).category, DirectJump);
        assert_eq!(instr(Mnemonic::Call, vec![r()]).category, IndirectFunctionCall);
        assert_eq!(instr(Mnemonic::Call, vec![l()]).category, DirectFunctionCall);
        assert_eq!(instr(Mnemonic::Add, vec![r(), Operand::Imm(1)]).category, Normal);

        assert!(FunctionReturn.stops_block() && FunctionReturn.needs_proof());
        assert!(DirectJump.stops_block() && !DirectJump.needs_proof());
        assert!(!DirectFunctionCall.stops_block() && !DirectFunctionCall.needs_proof());
        assert!(IndirectFunctionCall.stops_block() && IndirectFunctionCall.needs_proof());
        assert!(!Normal.stops_block() && !NoOp.stops_block());
    }

    #[test]
    fn mnemonic_names_roundtrip() {
        let mut all = vec![
            Mnemonic::Mov,
            Mnemonic::Lea,
            Mnemonic::Add,
            Mnemonic::Sub,
            Mnemonic::Imul,
            Mnemonic::And,
            Mnemonic::Or,
            Mnemonic::Xor,
            Mnemonic::Not,
            Mnemonic::Neg,
            Mnemonic::Shl,
            Mnemonic::Shr,
            Mnemonic::Sar,
            Mnemonic::Cmp,
            Mnemonic::Test,
            Mnemonic::Push,
            Mnemonic::Pop,
            Mnemonic::Inc,
            Mnemonic::Dec,
            Mnemonic::Jmp,
            Mnemonic::Call,
            Mnemonic::Ret,
            Mnemonic::Nop,
        ];
        for c in Cond::ALL {
            all.push(Mnemonic::Cmov(c));
            all.push(Mnemonic::Jcc(c));
        }
        for m in all {
            assert_eq!(Mnemonic::parse(&m.name()), Some(m), "{}", m.name());
        }
        assert_eq!(Mnemonic::parse("jz"), Some(Mnemonic::Jcc(Cond::E)));
        assert_eq!(Mnemonic::parse("jzz"), None);
    }

    #[test]
    fn register_aliases() {
        assert_eq!(Reg::parse("eax"), Some(Reg::d(Gpr::Rax)));
        assert_eq!(Reg::parse("r15d"), Some(Reg::d(Gpr::R15)));
        assert_eq!(Reg::parse("rsp"), Some(Reg::q(Gpr::Rsp)));
        assert_eq!(Reg::parse("ax"), None);
    }
}
