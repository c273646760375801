//! Translation of machine instructions into IR over the state record.
//!
//! Each basic block becomes a function `(state: ptr, pc: i64) -> i64` that
//! returns the next program counter. Memory is reached only through the
//! `memread`/`memwrite` intrinsics.

use thiserror::Error;

use crate::ir::state::{flag_field, gpr_field, RIP};
use crate::ir::{BinOp, Cursor, Function, Pred, Ty, UnOp, Value};
use crate::machine::{
    Cond, DecodeError, Flag, Gpr, InstructionCategory, MachineInstruction, MemOperand, Mnemonic, Operand, Program,
    RegWidth,
};

pub const DEFAULT_MAX_BLOCK_LEN: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LiftError {
    #[error("cannot lift `{mnemonic}` at {addr:#x}")]
    Unsupported { addr: u64, mnemonic: String },
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("block at {0:#x} exceeds the maximum block length")]
    TooLong(u64),
    #[error("call at {addr:#x} targets {target:#x} inside the function under recovery")]
    IntraFunctionCall { addr: u64, target: u64 },
}

#[derive(Clone, Debug)]
pub struct LiftedBlock {
    pub entry: u64,
    pub body: Function,
    pub terminator_category: InstructionCategory,
    /// Successors known without proof (direct jumps and fallthroughs).
    pub static_successors: Vec<u64>,
    /// Addresses of the lifted instructions, in order.
    pub instrs: Vec<u64>,
}

impl LiftedBlock {
    pub fn last_addr(&self) -> u64 {
        *self.instrs.last().unwrap()
    }
}

pub fn block_fn_name(addr: u64) -> String {
    format!("bb_{addr:x}")
}

/// IR emission context for one block function.
pub struct Emitter<'a> {
    pub c: Cursor<'a>,
    pub state: Value,
}

impl Emitter<'_> {
    fn field(&mut self, i: usize) -> Value {
        let s = self.state;
        self.c.field_addr(s, i)
    }

    pub fn get_reg64(&mut self, g: Gpr) -> Value {
        let p = self.field(gpr_field(g));
        self.c.load(Ty::I64, p)
    }

    pub fn set_reg64(&mut self, g: Gpr, v: Value) {
        let p = self.field(gpr_field(g));
        self.c.store(p, v);
    }

    pub fn get_flag(&mut self, f: Flag) -> Value {
        let p = self.field(flag_field(f));
        let b = self.c.load(Ty::I8, p);
        self.c.trunc(b, Ty::I1)
    }

    pub fn set_flag(&mut self, f: Flag, v: Value) {
        let b = self.c.zext(v, Ty::I8);
        let p = self.field(flag_field(f));
        self.c.store(p, b);
    }

    fn k(&mut self, ty: Ty, v: u64) -> Value {
        self.c.konst(ty, v)
    }

    fn address(&mut self, m: &MemOperand) -> Value {
        let mut a = self.k(Ty::I64, m.disp as u64);
        if let Some(b) = m.base {
            let r = self.get_reg64(b);
            a = self.c.bin(BinOp::Add, r, a);
        }
        if let Some(i) = m.index {
            let r = self.get_reg64(i);
            let s = self.c.bin_k(BinOp::Mul, r, m.scale as u64);
            a = self.c.bin(BinOp::Add, a, s);
        }
        a
    }

    fn read(&mut self, op: &Operand, ty: Ty, targets: &[u64]) -> Value {
        match op {
            Operand::Reg(r) => {
                let v = self.get_reg64(r.gpr);
                self.c.trunc(v, ty)
            }
            Operand::Imm(i) => self.k(ty, *i as u64),
            Operand::Mem(m) => {
                let a = self.address(m);
                self.c.mem_read(ty, a)
            }
            Operand::Label(_) => self.k(ty, targets[0]),
        }
    }

    fn write(&mut self, op: &Operand, v: Value) {
        match op {
            Operand::Reg(r) => {
                let w = match r.width {
                    RegWidth::Q => v,
                    _ => self.c.zext(v, Ty::I64),
                };
                self.set_reg64(r.gpr, w);
            }
            Operand::Mem(m) => {
                let a = self.address(m);
                self.c.mem_write(a, v);
            }
            _ => unreachable!("write to non-lvalue"),
        }
    }

    fn msb(&mut self, v: Value) -> Value {
        let z = self.k(self.c.f.ty(v), 0);
        self.c.icmp(Pred::Slt, v, z)
    }

    fn set_zs(&mut self, r: Value) {
        let z = self.k(self.c.f.ty(r), 0);
        let zf = self.c.icmp(Pred::Eq, r, z);
        self.set_flag(Flag::Zf, zf);
        let sf = self.msb(r);
        self.set_flag(Flag::Sf, sf);
    }

    fn not1(&mut self, v: Value) -> Value {
        self.c.un(UnOp::Not, v)
    }

    pub fn cond(&mut self, cc: Cond) -> Value {
        let flag = |e: &mut Self, f| e.get_flag(f);
        match cc {
            Cond::E => flag(self, Flag::Zf),
            Cond::Ne => {
                let z = flag(self, Flag::Zf);
                self.not1(z)
            }
            Cond::S => flag(self, Flag::Sf),
            Cond::Ns => {
                let s = flag(self, Flag::Sf);
                self.not1(s)
            }
            Cond::O => flag(self, Flag::Of),
            Cond::No => {
                let o = flag(self, Flag::Of);
                self.not1(o)
            }
            Cond::B => flag(self, Flag::Cf),
            Cond::Ae => {
                let c = flag(self, Flag::Cf);
                self.not1(c)
            }
            Cond::Be => {
                let c = flag(self, Flag::Cf);
                let z = flag(self, Flag::Zf);
                self.c.bin(BinOp::Or, c, z)
            }
            Cond::A => {
                let c = flag(self, Flag::Cf);
                let z = flag(self, Flag::Zf);
                let o = self.c.bin(BinOp::Or, c, z);
                self.not1(o)
            }
            Cond::L | Cond::Ge | Cond::Le | Cond::G => {
                let s = flag(self, Flag::Sf);
                let o = flag(self, Flag::Of);
                let lt = self.c.bin(BinOp::Xor, s, o);
                match cc {
                    Cond::L => lt,
                    Cond::Ge => self.not1(lt),
                    _ => {
                        let z = flag(self, Flag::Zf);
                        let le = self.c.bin(BinOp::Or, z, lt);
                        if cc == Cond::Le {
                            le
                        } else {
                            self.not1(le)
                        }
                    }
                }
            }
        }
    }

    fn push(&mut self, v: Value) {
        let sp = self.get_reg64(Gpr::Rsp);
        let nsp = self.c.bin_k(BinOp::Sub, sp, 8);
        self.c.mem_write(nsp, v);
        self.set_reg64(Gpr::Rsp, nsp);
    }

    fn pop(&mut self) -> Value {
        let sp = self.get_reg64(Gpr::Rsp);
        let v = self.c.mem_read(Ty::I64, sp);
        let nsp = self.c.bin_k(BinOp::Add, sp, 8);
        self.set_reg64(Gpr::Rsp, nsp);
        v
    }
}

fn op_width(ops: &[Operand]) -> Ty {
    match ops.first() {
        Some(Operand::Reg(r)) => Ty::int(r.width.bits()),
        Some(Operand::Mem(m)) => Ty::int(m.size as u32 * 8),
        _ => Ty::I64,
    }
}

/// Caller-saved state a call summary overwrites with unknowns.
const CLOBBERED: [Gpr; 7] = [Gpr::Rax, Gpr::Rcx, Gpr::Rdx, Gpr::R8, Gpr::R9, Gpr::R10, Gpr::R11];

/// Emit the architectural effect of `instr`. Returns the next-pc value.
pub fn lift_instruction(program: &Program, instr: &MachineInstruction, e: &mut Emitter) -> Result<Value, LiftError> {
    let ops = &instr.operands;
    let ty = op_width(ops);
    let tg = &instr.label_targets;
    let next = e.k(Ty::I64, instr.fallthrough());
    match instr.mnemonic {
        Mnemonic::Nop => {}
        Mnemonic::Mov => {
            let v = e.read(&ops[1], ty, tg);
            e.write(&ops[0], v);
        }
        Mnemonic::Lea => {
            let Operand::Mem(m) = &ops[1] else { unreachable!("lea takes memory") };
            let a = e.address(m);
            let a = e.c.trunc(a, ty);
            e.write(&ops[0], a);
        }
        Mnemonic::Add | Mnemonic::Sub | Mnemonic::Cmp => {
            let a = e.read(&ops[0], ty, tg);
            let b = e.read(&ops[1], ty, tg);
            let (r, cf, of) = if instr.mnemonic == Mnemonic::Add {
                let r = e.c.bin(BinOp::Add, a, b);
                let cf = e.c.icmp(Pred::Ult, r, a);
                let x1 = e.c.bin(BinOp::Xor, a, r);
                let x2 = e.c.bin(BinOp::Xor, b, r);
                let x = e.c.bin(BinOp::And, x1, x2);
                (r, cf, e.msb(x))
            } else {
                let r = e.c.bin(BinOp::Sub, a, b);
                let cf = e.c.icmp(Pred::Ult, a, b);
                let x1 = e.c.bin(BinOp::Xor, a, b);
                let x2 = e.c.bin(BinOp::Xor, a, r);
                let x = e.c.bin(BinOp::And, x1, x2);
                (r, cf, e.msb(x))
            };
            if instr.mnemonic != Mnemonic::Cmp {
                e.write(&ops[0], r);
            }
            e.set_zs(r);
            e.set_flag(Flag::Cf, cf);
            e.set_flag(Flag::Of, of);
        }
        Mnemonic::And | Mnemonic::Or | Mnemonic::Xor | Mnemonic::Test => {
            let a = e.read(&ops[0], ty, tg);
            let b = e.read(&ops[1], ty, tg);
            let bop = match instr.mnemonic {
                Mnemonic::Or => BinOp::Or,
                Mnemonic::Xor => BinOp::Xor,
                _ => BinOp::And,
            };
            let r = e.c.bin(bop, a, b);
            if instr.mnemonic != Mnemonic::Test {
                e.write(&ops[0], r);
            }
            e.set_zs(r);
            let f = e.k(Ty::I1, 0);
            e.set_flag(Flag::Cf, f);
            e.set_flag(Flag::Of, f);
        }
        Mnemonic::Not => {
            let a = e.read(&ops[0], ty, tg);
            let r = e.c.un(UnOp::Not, a);
            e.write(&ops[0], r);
        }
        Mnemonic::Neg => {
            let a = e.read(&ops[0], ty, tg);
            let r = e.c.un(UnOp::Neg, a);
            e.write(&ops[0], r);
            e.set_zs(r);
            let z = e.k(ty, 0);
            let cf = e.c.icmp(Pred::Ne, a, z);
            e.set_flag(Flag::Cf, cf);
            let min = e.k(ty, 1u64 << (ty.bits() - 1));
            let of = e.c.icmp(Pred::Eq, a, min);
            e.set_flag(Flag::Of, of);
        }
        Mnemonic::Inc | Mnemonic::Dec => {
            let a = e.read(&ops[0], ty, tg);
            let inc = instr.mnemonic == Mnemonic::Inc;
            let r = e.c.bin_k(if inc { BinOp::Add } else { BinOp::Sub }, a, 1);
            e.write(&ops[0], r);
            e.set_zs(r);
            let lim = if inc { crate::ir::mask(ty.bits() - 1) } else { 1u64 << (ty.bits() - 1) };
            let lim = e.k(ty, lim);
            let of = e.c.icmp(Pred::Eq, a, lim);
            e.set_flag(Flag::Of, of);
        }
        Mnemonic::Imul => {
            let a = e.read(&ops[0], ty, tg);
            let b = e.read(&ops[1], ty, tg);
            let r = e.c.bin(BinOp::Mul, a, b);
            let ovf = if ty == Ty::I64 {
                // The quotient test detects overflow except for MIN * -1,
                // where the division itself wraps.
                let z = e.k(ty, 0);
                let one = e.k(ty, 1);
                let a_zero = e.c.icmp(Pred::Eq, a, z);
                let d = e.c.select(a_zero, one, a);
                let q = e.c.bin(BinOp::SDiv, r, d);
                let qne = e.c.icmp(Pred::Ne, q, b);
                let m1 = e.k(ty, u64::MAX);
                let min = e.k(ty, 1 << 63);
                let am1 = e.c.icmp(Pred::Eq, a, m1);
                let bmin = e.c.icmp(Pred::Eq, b, min);
                let special = e.c.bin(BinOp::And, am1, bmin);
                let bad = e.c.bin(BinOp::Or, qne, special);
                let nz = e.not1(a_zero);
                e.c.bin(BinOp::And, nz, bad)
            } else {
                let wa = e.c.sext(a, Ty::I64);
                let wb = e.c.sext(b, Ty::I64);
                let p = e.c.bin(BinOp::Mul, wa, wb);
                let rs = e.c.sext(r, Ty::I64);
                e.c.icmp(Pred::Ne, p, rs)
            };
            e.write(&ops[0], r);
            e.set_zs(r);
            e.set_flag(Flag::Cf, ovf);
            e.set_flag(Flag::Of, ovf);
        }
        Mnemonic::Shl | Mnemonic::Shr | Mnemonic::Sar => {
            let a = e.read(&ops[0], ty, tg);
            let raw = match &ops[1] {
                Operand::Imm(i) => e.k(ty, *i as u64),
                Operand::Reg(r) => {
                    let v = e.get_reg64(r.gpr);
                    let b = e.c.trunc(v, Ty::I8);
                    e.c.zext(b, ty)
                }
                _ => unreachable!("shift count is imm or cl"),
            };
            let cnt = e.c.bin_k(BinOp::And, raw, if ty == Ty::I64 { 63 } else { 31 });
            let zero = e.k(ty, 0);
            let one = e.k(ty, 1);
            let nz = e.c.icmp(Pred::Ne, cnt, zero);
            let is1 = e.c.icmp(Pred::Eq, cnt, one);
            let (r, cf_bits, of_new) = match instr.mnemonic {
                Mnemonic::Shl => {
                    let r = e.c.bin(BinOp::Shl, a, cnt);
                    let w = e.k(ty, ty.bits() as u64);
                    let back = e.c.bin(BinOp::Sub, w, cnt);
                    let out = e.c.bin(BinOp::LShr, a, back);
                    let cf = e.c.trunc(out, Ty::I1);
                    let top = e.msb(r);
                    let of = e.c.bin(BinOp::Xor, top, cf);
                    (r, cf, of)
                }
                Mnemonic::Shr => {
                    let r = e.c.bin(BinOp::LShr, a, cnt);
                    let c1 = e.c.bin(BinOp::Sub, cnt, one);
                    let out = e.c.bin(BinOp::LShr, a, c1);
                    let cf = e.c.trunc(out, Ty::I1);
                    let of = e.msb(a);
                    (r, cf, of)
                }
                _ => {
                    let r = e.c.bin(BinOp::AShr, a, cnt);
                    let c1 = e.c.bin(BinOp::Sub, cnt, one);
                    let out = e.c.bin(BinOp::AShr, a, c1);
                    let cf = e.c.trunc(out, Ty::I1);
                    let of = e.k(Ty::I1, 0);
                    (r, cf, of)
                }
            };
            e.write(&ops[0], r);
            let zf_new = e.c.icmp(Pred::Eq, r, zero);
            let sf_new = e.msb(r);
            for (flag, new, guard) in
                [(Flag::Zf, zf_new, nz), (Flag::Sf, sf_new, nz), (Flag::Cf, cf_bits, nz), (Flag::Of, of_new, is1)]
            {
                let old = e.get_flag(flag);
                let v = e.c.select(guard, new, old);
                e.set_flag(flag, v);
            }
        }
        Mnemonic::Cmov(cc) => {
            let src = e.read(&ops[1], ty, tg);
            let cur = e.read(&ops[0], ty, tg);
            let c = e.cond(cc);
            let v = e.c.select(c, src, cur);
            e.write(&ops[0], v);
        }
        Mnemonic::Push => {
            let v = e.read(&ops[0], Ty::I64, tg);
            e.push(v);
        }
        Mnemonic::Pop => {
            let v = e.pop();
            e.write(&ops[0], v);
        }
        Mnemonic::Jmp => return Ok(e.read(&ops[0], Ty::I64, tg)),
        Mnemonic::Jcc(cc) => {
            let c = e.cond(cc);
            let t = e.k(Ty::I64, tg[0]);
            return Ok(e.c.select(c, t, next));
        }
        Mnemonic::Call => {
            let target = e.read(&ops[0], Ty::I64, tg);
            if instr.category == InstructionCategory::DirectFunctionCall {
                let t = tg[0];
                if program.is_code(t) {
                    return Err(LiftError::IntraFunctionCall { addr: instr.address, target: t });
                }
                // The return address is written below the stack pointer and
                // popped again by the callee.
                let sp = e.get_reg64(Gpr::Rsp);
                let slot = e.c.bin_k(BinOp::Sub, sp, 8);
                e.c.mem_write(slot, next);
                for g in CLOBBERED {
                    let u = e.c.unknown(Ty::I64);
                    e.set_reg64(g, u);
                }
                for f in Flag::ALL {
                    let u = e.c.unknown(Ty::I1);
                    e.set_flag(f, u);
                }
                return Ok(next);
            }
            e.push(next);
            return Ok(target);
        }
        Mnemonic::Ret => return Ok(e.pop()),
    }
    Ok(next)
}

fn new_block_fn(name: String) -> Function {
    let mut f = Function::new(name, &[Ty::Ptr, Ty::I64], Ty::I64);
    f.add_block();
    f
}

fn finish(f: &mut Function, npc: Value) {
    let b = f.entry();
    let state = f.params[0];
    let mut c = Cursor::new(f, b);
    let p = c.field_addr(state, RIP);
    c.store(p, npc);
    c.ret(Some(npc));
}

/// Lift the basic block starting at `addr`.
pub fn lift_block(program: &Program, addr: u64) -> Result<LiftedBlock, LiftError> {
    lift_block_limit(program, addr, DEFAULT_MAX_BLOCK_LEN)
}

pub fn lift_block_limit(program: &Program, addr: u64, max_len: usize) -> Result<LiftedBlock, LiftError> {
    let mut f = new_block_fn(block_fn_name(addr));
    f.blocks[0].addr = Some(addr);
    let (state, pc) = (f.params[0], f.params[1]);
    let b = f.entry();
    {
        let mut c = Cursor::new(&mut f, b);
        let p = c.field_addr(state, RIP);
        c.store(p, pc);
    }
    let mut pcaddr = addr;
    let mut instrs = Vec::new();
    loop {
        if instrs.len() >= max_len {
            return Err(LiftError::TooLong(addr));
        }
        let instr = program.decode_at(pcaddr)?;
        instrs.push(pcaddr);
        let npc = {
            let mut e = Emitter { c: Cursor::new(&mut f, b), state };
            lift_instruction(program, instr, &mut e)?
        };
        if instr.category.stops_block() {
            finish(&mut f, npc);
            let succ = match instr.category {
                InstructionCategory::DirectJump => vec![instr.label_targets[0]],
                InstructionCategory::ConditionalBranch => vec![instr.label_targets[0], instr.fallthrough()],
                _ => vec![],
            };
            return Ok(LiftedBlock {
                entry: addr,
                body: f,
                terminator_category: instr.category,
                static_successors: succ,
                instrs,
            });
        }
        pcaddr = instr.fallthrough();
    }
}

/// Lift exactly one instruction into a block-shaped function.
pub fn lift_one(program: &Program, addr: u64) -> Result<Function, LiftError> {
    let instr = program.decode_at(addr)?;
    let mut f = new_block_fn(format!("insn_{addr:x}"));
    let (state, pc) = (f.params[0], f.params[1]);
    let b = f.entry();
    {
        let mut c = Cursor::new(&mut f, b);
        let p = c.field_addr(state, RIP);
        c.store(p, pc);
    }
    let npc = {
        let mut e = Emitter { c: Cursor::new(&mut f, b), state };
        lift_instruction(program, instr, &mut e)?
    };
    finish(&mut f, npc);
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::{IrEnv, MachineState, RtVal};
    use crate::ir::{verify, Module, Op};
    use crate::machine::{assemble, Abi};

    fn run_block(p: &Program, lb: &LiftedBlock, s: &MachineState) -> (u64, MachineState) {
        let mut m = Module::new();
        m.add(lb.body.clone());
        let mut env = IrEnv::new(s.mem.clone());
        let st = env.alloc_state(s);
        let name = lb.body.name.clone();
        let r = crate::exec::ir::run_ir_values(&m, &name, &[st, RtVal::Int(lb.entry)], &mut env).unwrap();
        let mut out = MachineState::new();
        env.read_state(st, &mut out).unwrap();
        out.mem = env.mem;
        let _ = p;
        match r {
            Some(RtVal::Int(v)) => (v, out),
            _ => panic!("block returned no pc"),
        }
    }

    #[test]
    fn direct_jump_block() {
        let p = assemble("mov rax, 1\njmp l\nnop\nl:\nret").unwrap();
        let b = lift_block(&p, 0x1000).unwrap();
        assert_eq!(b.terminator_category, InstructionCategory::DirectJump);
        assert_eq!(b.static_successors, vec![0x100c]);
        verify(&b.body).unwrap();
    }

    #[test]
    fn jcc_returns_select_and_has_no_joins() {
        let p = assemble("cmp rcx, 3\njz l\nnop\nl:\nret").unwrap();
        let b = lift_block(&p, 0x1000).unwrap();
        assert_eq!(b.body.layout.len(), 1);
        let ret = b.body.terminator(b.body.entry()).unwrap();
        let npc = b.body.args(ret)[0];
        assert_eq!(b.body.op(npc), Some(&Op::Select));
        for v in b.body.insts() {
            assert!(!matches!(b.body.op(v), Some(Op::Br(_) | Op::CondBr(..) | Op::Phi(_))));
        }
    }

    #[test]
    fn ret_pops_return_address() {
        let p = assemble("ret").unwrap();
        let b = lift_block(&p, 0x1000).unwrap();
        let s = MachineState::for_call(&p, 0x1000, &[], Abi::Win64);
        let (npc, out) = run_block(&p, &b, &s);
        assert_eq!(npc, crate::exec::RETURN_SENTINEL);
        assert_eq!(out.reg(Gpr::Rsp), crate::exec::STACK_BASE + 8);
    }

    #[test]
    fn intra_function_call_is_rejected() {
        let p = assemble("call f\nret\nf:\nret").unwrap();
        assert!(matches!(lift_block(&p, 0x1000), Err(LiftError::IntraFunctionCall { .. })));
        let p = assemble("call ext\nret\n.base 0x9000\next:").unwrap();
        let b = lift_block(&p, 0x1000).unwrap();
        assert_eq!(b.instrs, vec![0x1000, 0x1004]);
    }

    #[test]
    fn runaway_block() {
        let src: String = (0..10).map(|_| "nop\n").collect::<String>() + "ret";
        let p = assemble(&src).unwrap();
        assert_eq!(lift_block_limit(&p, 0x1000, 5).unwrap_err(), LiftError::TooLong(0x1000));
    }
}
