//! Reference interpreter for the toy ISA.

use std::collections::BTreeSet;

use super::{ExecError, Memory, WriteEvent, ARG_LIMIT, DEFAULT_STEP_BUDGET, FRAME_LIMIT, RETURN_SENTINEL, STACK_BASE};
use crate::ir::{mask, sext};
use crate::machine::{
    Abi, Cond, Flag, Gpr, MachineInstruction, MemOperand, Mnemonic, Operand, Program, RegWidth,
    INSTR_STRIDE,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MachineState {
    pub regs: [u64; 16],
    /// zf, sf, cf, of
    pub flags: [bool; 4],
    pub rip: u64,
    pub mem: Memory,
}

impl MachineState {
    pub fn new() -> MachineState {
        MachineState { regs: [0; 16], flags: [false; 4], rip: 0, mem: Memory::default() }
    }

    pub fn reg(&self, g: Gpr) -> u64 {
        self.regs[g.index()]
    }

    pub fn set_reg(&mut self, g: Gpr, v: u64) {
        self.regs[g.index()] = v;
    }

    pub fn flag(&self, f: Flag) -> bool {
        self.flags[f.index()]
    }

    fn set_flag(&mut self, f: Flag, v: bool) {
        self.flags[f.index()] = v;
    }

    /// Entry state for calling a function: program data mapped, return
    /// sentinel at the stack base, arguments placed per `abi`, every other
    /// register zero.
    pub fn for_call(program: &Program, entry: u64, args: &[u64], abi: Abi) -> MachineState {
        let mut s = MachineState::new();
        for (&a, &b) in &program.data {
            s.mem.bytes.insert(a, b);
        }
        s.set_reg(Gpr::Rsp, STACK_BASE);
        s.mem.write(STACK_BASE, 8, RETURN_SENTINEL);
        let regs = abi.arg_regs();
        for (i, &v) in args.iter().enumerate() {
            if i < regs.len() {
                s.set_reg(regs[i], v);
            } else {
                let off = abi.stack_arg_offset() + 8 * (i - regs.len()) as u64;
                s.mem.write(STACK_BASE + off, 8, v);
            }
        }
        s.rip = entry;
        s
    }
}

impl Default for MachineState {
    fn default() -> Self {
        MachineState::new()
    }
}

fn width_of(ops: &[Operand]) -> u32 {
    match ops.first() {
        Some(Operand::Reg(r)) => r.width.bits(),
        Some(Operand::Mem(m)) => m.size as u32 * 8,
        _ => 64,
    }
}

fn msb(v: u64, w: u32) -> bool {
    (v >> (w - 1)) & 1 == 1
}

pub fn effective_address(s: &MachineState, m: &MemOperand) -> u64 {
    let mut a = m.disp as u64;
    if let Some(b) = m.base {
        a = a.wrapping_add(s.reg(b));
    }
    if let Some(i) = m.index {
        a = a.wrapping_add(s.reg(i).wrapping_mul(m.scale as u64));
    }
    a
}

struct Exec<'a> {
    s: &'a mut MachineState,
    instr: &'a MachineInstruction,
    writes: &'a mut Vec<WriteEvent>,
}

impl Exec<'_> {
    fn read(&self, k: usize, w: u32) -> Result<u64, ExecError> {
        let v = match &self.instr.operands[k] {
            Operand::Reg(r) => self.s.reg(r.gpr),
            Operand::Imm(i) => *i as u64,
            Operand::Mem(m) => self.s.mem.read(effective_address(self.s, m), w / 8)?,
            Operand::Label(_) => self.instr.label_targets[0],
        };
        Ok(v & mask(w))
    }

    fn write(&mut self, k: usize, w: u32, v: u64) {
        let v = v & mask(w);
        match &self.instr.operands[k] {
            Operand::Reg(r) => match r.width {
                RegWidth::Q | RegWidth::D => self.s.set_reg(r.gpr, v),
                RegWidth::B => unreachable!("byte registers are never written"),
            },
            Operand::Mem(m) => {
                let a = effective_address(self.s, m);
                self.s.mem.write(a, w / 8, v);
                self.writes.push((a, w / 8, v));
            }
            _ => unreachable!("write to non-lvalue"),
        }
    }

    fn zs(&mut self, r: u64, w: u32) {
        self.s.set_flag(Flag::Zf, r & mask(w) == 0);
        self.s.set_flag(Flag::Sf, msb(r, w));
    }

    fn push(&mut self, v: u64) {
        let sp = self.s.reg(Gpr::Rsp).wrapping_sub(8);
        self.s.set_reg(Gpr::Rsp, sp);
        self.s.mem.write(sp, 8, v);
        self.writes.push((sp, 8, v));
    }

    fn pop(&mut self) -> Result<u64, ExecError> {
        let sp = self.s.reg(Gpr::Rsp);
        let v = self.s.mem.read(sp, 8)?;
        self.s.set_reg(Gpr::Rsp, sp.wrapping_add(8));
        Ok(v)
    }

    /// Execute one instruction, returning the next instruction pointer.
    fn step(&mut self) -> Result<u64, ExecError> {
        let i = self.instr;
        let ops = &i.operands;
        let w = width_of(ops);
        let next = i.fallthrough();
        let flags = self.s.flags;
        match i.mnemonic {
            Mnemonic::Nop => {}
            Mnemonic::Mov => {
                let v = self.read(1, w)?;
                self.write(0, w, v);
            }
            Mnemonic::Lea => {
                let Operand::Mem(m) = &ops[1] else { unreachable!() };
                let a = effective_address(self.s, m);
                self.write(0, w, a);
            }
            Mnemonic::Add => {
                let (a, b) = (self.read(0, w)?, self.read(1, w)?);
                let r = a.wrapping_add(b) & mask(w);
                self.write(0, w, r);
                self.zs(r, w);
                self.s.set_flag(Flag::Cf, r < a);
                self.s.set_flag(Flag::Of, msb((a ^ r) & (b ^ r), w));
            }
            Mnemonic::Sub | Mnemonic::Cmp => {
                let (a, b) = (self.read(0, w)?, self.read(1, w)?);
                let r = a.wrapping_sub(b) & mask(w);
                if i.mnemonic == Mnemonic::Sub {
                    self.write(0, w, r);
                }
                self.zs(r, w);
                self.s.set_flag(Flag::Cf, a < b);
                self.s.set_flag(Flag::Of, msb((a ^ b) & (a ^ r), w));
            }
            Mnemonic::And | Mnemonic::Or | Mnemonic::Xor | Mnemonic::Test => {
                let (a, b) = (self.read(0, w)?, self.read(1, w)?);
                let r = match i.mnemonic {
                    Mnemonic::Or => a | b,
                    Mnemonic::Xor => a ^ b,
                    _ => a & b,
                };
                if i.mnemonic != Mnemonic::Test {
                    self.write(0, w, r);
                }
                self.zs(r, w);
                self.s.set_flag(Flag::Cf, false);
                self.s.set_flag(Flag::Of, false);
            }
            Mnemonic::Not => {
                let a = self.read(0, w)?;
                self.write(0, w, !a);
            }
            Mnemonic::Neg => {
                let a = self.read(0, w)?;
                let r = a.wrapping_neg() & mask(w);
                self.write(0, w, r);
                self.zs(r, w);
                self.s.set_flag(Flag::Cf, a != 0);
                self.s.set_flag(Flag::Of, a == 1u64 << (w - 1));
            }
            Mnemonic::Inc | Mnemonic::Dec => {
                let a = self.read(0, w)?;
                let inc = i.mnemonic == Mnemonic::Inc;
                let r = if inc { a.wrapping_add(1) } else { a.wrapping_sub(1) } & mask(w);
                self.write(0, w, r);
                self.zs(r, w);
                let of = if inc { a == mask(w - 1) } else { a == 1u64 << (w - 1) };
                self.s.set_flag(Flag::Of, of);
            }
            Mnemonic::Imul => {
                let (a, b) = (self.read(0, w)?, self.read(1, w)?);
                let full = (sext(a, w) as i64 as i128) * (sext(b, w) as i64 as i128);
                let r = (full as u64) & mask(w);
                self.write(0, w, r);
                self.zs(r, w);
                let ovf = sext(r, w) as i64 as i128 != full;
                self.s.set_flag(Flag::Cf, ovf);
                self.s.set_flag(Flag::Of, ovf);
            }
            Mnemonic::Shl | Mnemonic::Shr | Mnemonic::Sar => {
                let a = self.read(0, w)?;
                let c = self.read(1, 8)? & if w == 64 { 63 } else { 31 };
                if c == 0 {
                    self.write(0, w, a);
                } else {
                    let (r, cf) = match i.mnemonic {
                        Mnemonic::Shl => {
                            // Narrow operands can be shifted past their width.
                            let cf = c <= w as u64 && (a >> (w as u64 - c)) & 1 == 1;
                            ((a << c) & mask(w), cf)
                        }
                        Mnemonic::Shr => (a >> c, (a >> (c - 1)) & 1 == 1),
                        _ => {
                            let sa = sext(a, w) as i64;
                            ((sa >> c) as u64 & mask(w), (sa >> (c - 1)) & 1 == 1)
                        }
                    };
                    self.write(0, w, r);
                    self.zs(r, w);
                    self.s.set_flag(Flag::Cf, cf);
                    if c == 1 {
                        let of = match i.mnemonic {
                            Mnemonic::Shl => msb(r, w) != cf,
                            Mnemonic::Shr => msb(a, w),
                            _ => false,
                        };
                        self.s.set_flag(Flag::Of, of);
                    }
                }
            }
            Mnemonic::Cmov(cc) => {
                let src = self.read(1, w)?;
                let cur = self.read(0, w)?;
                let v = if cc.eval(flags) { src } else { cur };
                self.write(0, w, v);
            }
            Mnemonic::Push => {
                let v = self.read(0, 64)?;
                self.push(v);
            }
            Mnemonic::Pop => {
                let v = self.pop()?;
                self.write(0, 64, v);
            }
            Mnemonic::Jmp => return self.read(0, 64),
            Mnemonic::Jcc(cc) => {
                return Ok(if cc.eval(flags) { i.label_targets[0] } else { next });
            }
            Mnemonic::Call => {
                let t = self.read(0, 64)?;
                self.push(next);
                return Ok(t);
            }
            Mnemonic::Ret => return self.pop(),
        }
        Ok(next)
    }
}

/// Execute a single instruction at `s.rip`, updating `s` (including rip).
pub fn step(program: &Program, s: &mut MachineState, writes: &mut Vec<WriteEvent>) -> Result<(), ExecError> {
    if s.rip % INSTR_STRIDE != 0 {
        return Err(ExecError::MisalignedRip(s.rip));
    }
    let instr = program.decode_at(s.rip)?;
    let next = Exec { s, instr, writes }.step()?;
    s.rip = next;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MachineRun {
    pub ret: u64,
    pub writes: Vec<WriteEvent>,
    /// Block-level edges (block start, next pc) taken at stop instructions.
    pub edges: BTreeSet<(u64, u64)>,
    pub steps: u64,
    pub final_state: MachineState,
}

pub fn run_machine(program: &Program, entry: u64, args: &[u64], abi: Abi) -> Result<MachineRun, ExecError> {
    run_machine_budget(program, entry, args, abi, DEFAULT_STEP_BUDGET)
}

pub fn run_machine_budget(
    program: &Program,
    entry: u64,
    args: &[u64],
    abi: Abi,
    budget: u64,
) -> Result<MachineRun, ExecError> {
    let mut s = MachineState::for_call(program, entry, args, abi);
    let mut writes = Vec::new();
    let mut edges = BTreeSet::new();
    let mut block_start = entry;
    let mut steps = 0u64;
    let lo = STACK_BASE - FRAME_LIMIT - 64;
    let hi = STACK_BASE + ARG_LIMIT;
    while s.rip != RETURN_SENTINEL {
        if steps >= budget {
            return Err(ExecError::BudgetExhausted(budget));
        }
        steps += 1;
        let at = s.rip;
        let cat = program.decode_at(at).map(|i| i.category);
        step(program, &mut s, &mut writes)?;
        let sp = s.reg(Gpr::Rsp);
        if sp < lo || sp > hi {
            return Err(ExecError::StackOutOfRange(sp));
        }
        if let Ok(c) = cat {
            if c.stops_block() {
                if s.rip != RETURN_SENTINEL {
                    edges.insert((block_start, s.rip));
                }
                block_start = s.rip;
            }
        }
    }
    Ok(MachineRun { ret: s.reg(Gpr::Rax), writes, edges, steps, final_state: s })
}

/// Condition flags as a `[zf, sf, cf, of]` array; handy for `Cond::eval`.
pub fn flags_of(s: &MachineState) -> [bool; 4] {
    s.flags
}

pub fn eval_cond(s: &MachineState, c: Cond) -> bool {
    c.eval(s.flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::assemble;

    fn run(src: &str, args: &[u64]) -> Result<MachineRun, ExecError> {
        let p = assemble(src).unwrap();
        run_machine(&p, p.entry, args, Abi::Win64)
    }

    #[test]
    fn identity_returns_argument() {
        assert_eq!(run("mov rax, rcx\nret", &[7]).unwrap().ret, 7);
    }

    #[test]
    fn xor_self_sets_zero_flag() {
        let p = assemble("xor rax, rax\nret").unwrap();
        let mut s = MachineState::for_call(&p, p.entry, &[], Abi::Win64);
        s.set_reg(Gpr::Rax, 0xdead);
        s.flags = [false, true, true, true];
        step(&p, &mut s, &mut vec![]).unwrap();
        assert_eq!(s.reg(Gpr::Rax), 0);
        assert_eq!(s.flags, [true, false, false, false]);
    }

    #[test]
    fn add_flags() {
        let p = assemble("add rax, rcx\nret").unwrap();
        let mut s = MachineState::for_call(&p, p.entry, &[1], Abi::Win64);
        s.set_reg(Gpr::Rax, u64::MAX);
        step(&p, &mut s, &mut vec![]).unwrap();
        assert_eq!(s.reg(Gpr::Rax), 0);
        assert_eq!(s.flags, [true, false, true, false]);
        s.set_reg(Gpr::Rax, i64::MAX as u64);
        s.rip = p.entry;
        step(&p, &mut s, &mut vec![]).unwrap();
        assert_eq!(s.flags, [false, true, false, true]);
    }

    #[test]
    fn thirty_two_bit_writes_zero_extend() {
        let r = run("mov rax, -1\nmov eax, 5\nret", &[]).unwrap();
        assert_eq!(r.ret, 5);
        let r = run("mov rax, -1\nadd eax, 1\nret", &[]).unwrap();
        assert_eq!(r.ret, 0);
    }

    #[test]
    fn infinite_loop_exhausts_budget() {
        let p = assemble("l:\n jmp l").unwrap();
        assert_eq!(
            run_machine_budget(&p, p.entry, &[], Abi::Win64, 1000),
            Err(ExecError::BudgetExhausted(1000))
        );
    }

    #[test]
    fn stack_arguments_and_edges() {
        let src = "\
  mov rax, qword [rsp + 40]
  cmp rcx, 3
  jl small
  add rax, 1
small:
  ret";
        let r = run(src, &[5, 0, 0, 0, 10]).unwrap();
        assert_eq!(r.ret, 11);
        assert!(r.edges.contains(&(0x1000, 0x100c)));
        let r = run(src, &[1, 0, 0, 0, 10]).unwrap();
        assert_eq!(r.ret, 10);
        assert!(r.edges.contains(&(0x1000, 0x1010)));
    }

    #[test]
    fn shifts_and_unmapped_reads() {
        assert_eq!(run("mov rax, 1\nshl rax, 63\nshr rax, 62\nret", &[]).unwrap().ret, 2);
        assert_eq!(run("mov rcx, 4\nmov rax, -16\nsar rax, cl\nret", &[]).unwrap().ret, u64::MAX);
        assert!(matches!(run("mov rax, qword [0x9000]\nret", &[]), Err(ExecError::Unmapped(0x9000))));
    }
}
