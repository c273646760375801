//! IR interpreter over the same byte memory model as the machine.

use std::collections::HashMap;

use super::machine::MachineState;
use super::{ExecError, Memory, WriteEvent, DEFAULT_STEP_BUDGET};
use crate::ir::state::{flag_field, NUM_FIELDS, RIP};
use crate::ir::{AllocaKind, Block, Function, Module, Op, Ty, Value, ValueDef};
use crate::machine::{Abi, Flag, Gpr, Program};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RtVal {
    Int(u64),
    Ptr { obj: u32, field: Option<u16> },
    /// Result of an `unknown`: any value. Errors once it reaches control
    /// flow, an address, machine memory or a function result.
    Poison,
}

impl RtVal {
    fn int(self) -> Result<u64, ExecError> {
        match self {
            RtVal::Int(v) => Ok(v),
            RtVal::Poison => Err(ExecError::Unknown),
            RtVal::Ptr { .. } => Err(ExecError::Type("expected an integer, found a pointer".into())),
        }
    }
}

#[derive(Clone, Debug)]
enum Obj {
    Cell(Option<RtVal>),
    State(Box<[Option<RtVal>; NUM_FIELDS]>),
    /// Storage aliasing machine memory at this address.
    Mirror(u64),
}

#[derive(Clone, Debug)]
pub struct IrEnv {
    pub mem: Memory,
    objects: Vec<Obj>,
    globals: HashMap<String, u32>,
    pub steps: u64,
    pub budget: u64,
    pub writes: Vec<WriteEvent>,
}

impl IrEnv {
    pub fn new(mem: Memory) -> IrEnv {
        IrEnv {
            mem,
            objects: Vec::new(),
            globals: HashMap::new(),
            steps: 0,
            budget: DEFAULT_STEP_BUDGET,
            writes: Vec::new(),
        }
    }

    /// Memory preloaded with a program's data bytes.
    pub fn for_program(p: &Program) -> IrEnv {
        let mut m = Memory::default();
        for (&a, &b) in &p.data {
            m.bytes.insert(a, b);
        }
        IrEnv::new(m)
    }

    fn alloc(&mut self, o: Obj) -> u32 {
        self.objects.push(o);
        self.objects.len() as u32 - 1
    }

    /// Allocate a state record holding the given machine registers and flags.
    pub fn alloc_state(&mut self, s: &MachineState) -> RtVal {
        let mut cells = [None; NUM_FIELDS];
        for g in Gpr::ALL {
            cells[g.index()] = Some(RtVal::Int(s.reg(g)));
        }
        for f in Flag::ALL {
            cells[flag_field(f)] = Some(RtVal::Int(s.flag(f) as u64));
        }
        cells[RIP] = Some(RtVal::Int(s.rip));
        RtVal::Ptr { obj: self.alloc(Obj::State(Box::new(cells))), field: None }
    }

    fn state_cells(&self, p: RtVal) -> Result<&[Option<RtVal>; NUM_FIELDS], ExecError> {
        if let RtVal::Ptr { obj, field: None } = p {
            if let Obj::State(cells) = &self.objects[obj as usize] {
                return Ok(cells);
            }
        }
        Err(ExecError::Type("not a state pointer".into()))
    }

    /// One field of a state record; `None` if never written.
    pub fn read_field(&self, p: RtVal, i: usize) -> Result<Option<RtVal>, ExecError> {
        Ok(self.state_cells(p)?[i])
    }

    /// Read back a state record as registers, flags and rip. Unset and
    /// unknown fields read as zero.
    pub fn read_state(&self, p: RtVal, into: &mut MachineState) -> Result<(), ExecError> {
        let cells = self.state_cells(p)?;
        let get = |i: usize| match cells[i] {
            Some(RtVal::Int(v)) => v,
            _ => 0,
        };
        for g in Gpr::ALL {
            into.set_reg(g, get(g.index()));
        }
        for f in Flag::ALL {
            into.flags[f.index()] = get(flag_field(f)) & 1 == 1;
        }
        into.rip = get(RIP);
        Ok(())
    }

    fn load(&mut self, p: RtVal, ty: Ty) -> Result<RtVal, ExecError> {
        let RtVal::Ptr { obj, field } = p else {
            return Err(match p {
                RtVal::Poison => ExecError::Unknown,
                _ => ExecError::Type("load from integer".into()),
            });
        };
        let v = match (&self.objects[obj as usize], field) {
            (Obj::Cell(c), None) => c.ok_or(ExecError::Uninitialized)?,
            (Obj::State(cells), Some(i)) => cells[i as usize].ok_or(ExecError::Uninitialized)?,
            // Unwritten machine memory is indeterminate, not a fault: a
            // promoted slot may be loaded before its first store.
            (Obj::Mirror(a), None) => match self.mem.read(*a, ty.bits() / 8) {
                Ok(x) => RtVal::Int(x),
                Err(ExecError::Unmapped(_)) => RtVal::Poison,
                Err(e) => return Err(e),
            },
            _ => return Err(ExecError::Type("load through malformed pointer".into())),
        };
        Ok(match v {
            RtVal::Int(x) => RtVal::Int(x & ty.mask()),
            other => other,
        })
    }

    fn store(&mut self, p: RtVal, v: RtVal, ty: Ty) -> Result<(), ExecError> {
        let RtVal::Ptr { obj, field } = p else {
            return Err(match p {
                RtVal::Poison => ExecError::Unknown,
                _ => ExecError::Type("store to integer".into()),
            });
        };
        let v = match v {
            RtVal::Int(x) => RtVal::Int(x & ty.mask()),
            other => other,
        };
        match (&mut self.objects[obj as usize], field) {
            (Obj::Cell(c), None) => *c = Some(v),
            (Obj::State(cells), Some(i)) => cells[i as usize] = Some(v),
            (Obj::Mirror(a), None) => {
                let a = *a;
                let x = v.int()?;
                self.mem.write(a, ty.bits() / 8, x);
                self.writes.push((a, ty.bits() / 8, x));
            }
            _ => return Err(ExecError::Type("store through malformed pointer".into())),
        }
        Ok(())
    }

    fn global(&mut self, m: &Module, name: &str) -> Result<RtVal, ExecError> {
        if let Some(&o) = self.globals.get(name) {
            return Ok(RtVal::Ptr { obj: o, field: None });
        }
        let g = m.globals.get(name).ok_or_else(|| ExecError::Type(format!("unknown global @{name}")))?;
        let o = self.alloc(match g.mirror {
            Some(a) => Obj::Mirror(a),
            None => Obj::Cell(None),
        });
        self.globals.insert(name.to_string(), o);
        Ok(RtVal::Ptr { obj: o, field: None })
    }
}

fn tick(env: &mut IrEnv) -> Result<(), ExecError> {
    env.steps += 1;
    if env.steps > env.budget {
        Err(ExecError::BudgetExhausted(env.budget))
    } else {
        Ok(())
    }
}

/// Evaluate one pure, non-memory instruction over concrete operands.
/// Shared with constant folding.
pub fn eval_pure(op: &Op, ty: Ty, arg_tys: &[Ty], args: &[u64]) -> Result<u64, ExecError> {
    let bits = ty.bits();
    Ok(match op {
        Op::Bin(b) => b.eval(args[0], args[1], bits).ok_or(ExecError::DivisionByZero)?,
        Op::Un(u) => u.eval(args[0], bits),
        Op::Icmp(p) => p.eval(args[0], args[1], arg_tys[0].bits()) as u64,
        Op::Select => {
            if args[0] & 1 == 1 {
                args[1]
            } else {
                args[2]
            }
        }
        Op::Cast(c) => c.eval(args[0], arg_tys[0].bits(), bits),
        _ => return Err(ExecError::Type(format!("{op:?} is not a pure operation"))),
    })
}

fn call(m: &Module, f: &Function, args: &[RtVal], env: &mut IrEnv, depth: usize) -> Result<Option<RtVal>, ExecError> {
    if args.len() != f.params.len() {
        return Err(ExecError::Arity { expected: f.params.len(), got: args.len() });
    }
    if depth > 64 {
        return Err(ExecError::Type("call depth exceeded".into()));
    }
    let mut vals: Vec<Option<RtVal>> = vec![None; f.values.len()];
    for (i, &p) in f.params.iter().enumerate() {
        vals[p.idx()] = Some(args[i]);
    }
    let get = |vals: &Vec<Option<RtVal>>, v: Value| -> Result<RtVal, ExecError> {
        match f.values[v.idx()].def {
            ValueDef::Const(c) => Ok(RtVal::Int(c)),
            _ => vals[v.idx()].ok_or_else(|| ExecError::Type(format!("value %{} used before definition", v.0))),
        }
    };
    let mut block = f.entry();
    let mut prev: Option<Block> = None;
    loop {
        let insts = &f.blocks[block.idx()].insts;
        // Phis read their inputs simultaneously.
        let mut k = 0;
        let mut phi_vals = Vec::new();
        while k < insts.len() {
            let v = insts[k];
            let inst = f.inst(v).unwrap();
            let Op::Phi(blocks) = &inst.op else { break };
            let p = prev.ok_or_else(|| ExecError::Type("phi in entry block".into()))?;
            let i = blocks.iter().position(|&b| b == p).ok_or_else(|| ExecError::Type("phi lacks incoming".into()))?;
            phi_vals.push((v, get(&vals, inst.args[i])?));
            k += 1;
        }
        for (v, x) in phi_vals {
            tick(env)?;
            vals[v.idx()] = Some(x);
        }
        let mut next: Option<Block> = None;
        for &v in &insts[k..] {
            tick(env)?;
            let inst = f.inst(v).unwrap();
            let ty = f.ty(v);
            let result = match &inst.op {
                Op::Unknown => Some(RtVal::Poison),
                Op::Select => match get(&vals, inst.args[0])? {
                    RtVal::Poison => Some(RtVal::Poison),
                    c => Some(get(&vals, inst.args[if c.int()? & 1 == 1 { 1 } else { 2 }])?),
                },
                Op::Bin(_) | Op::Un(_) | Op::Icmp(_) | Op::Cast(_) => {
                    let mut a = Vec::with_capacity(inst.args.len());
                    let mut poison = false;
                    for &x in &inst.args {
                        match get(&vals, x)? {
                            RtVal::Poison => poison = true,
                            r => a.push(r.int()?),
                        }
                    }
                    if poison {
                        Some(RtVal::Poison)
                    } else {
                        let tys: Vec<Ty> = inst.args.iter().map(|&x| f.ty(x)).collect();
                        Some(RtVal::Int(eval_pure(&inst.op, ty, &tys, &a)?))
                    }
                }
                Op::Phi(_) => unreachable!("phi after non-phi"),
                Op::FieldAddr(i) => match get(&vals, inst.args[0])? {
                    RtVal::Ptr { obj, field: None } => Some(RtVal::Ptr { obj, field: Some(*i) }),
                    _ => return Err(ExecError::Type("fieldaddr on non-record".into())),
                },
                Op::Load => {
                    let p = get(&vals, inst.args[0])?;
                    Some(env.load(p, ty)?)
                }
                Op::Store => {
                    let p = get(&vals, inst.args[0])?;
                    let x = get(&vals, inst.args[1])?;
                    env.store(p, x, f.ty(inst.args[1]))?;
                    None
                }
                Op::Alloca(AllocaKind::Scalar(_)) => Some(RtVal::Ptr { obj: env.alloc(Obj::Cell(None)), field: None }),
                Op::Alloca(AllocaKind::State) => {
                    Some(RtVal::Ptr { obj: env.alloc(Obj::State(Box::new([None; NUM_FIELDS]))), field: None })
                }
                Op::GlobalAddr(n) => Some(env.global(m, n)?),
                Op::MemRead => {
                    let a = get(&vals, inst.args[0])?.int()?;
                    Some(RtVal::Int(env.mem.read(a, ty.bits() / 8)?))
                }
                Op::MemWrite => {
                    let a = get(&vals, inst.args[0])?.int()?;
                    let x = get(&vals, inst.args[1])?.int()?;
                    let sz = f.ty(inst.args[1]).bits() / 8;
                    env.mem.write(a, sz, x);
                    env.writes.push((a, sz, x));
                    None
                }
                Op::Call(name) => {
                    let callee = m.get(name).ok_or_else(|| ExecError::NoFunction(name.clone()))?;
                    let mut a = Vec::with_capacity(inst.args.len());
                    for &x in &inst.args {
                        a.push(get(&vals, x)?);
                    }
                    call(m, callee, &a, env, depth + 1)?
                }
                Op::Br(t) => {
                    next = Some(*t);
                    None
                }
                Op::CondBr(t, e) => {
                    let c = get(&vals, inst.args[0])?.int()?;
                    next = Some(if c & 1 == 1 { *t } else { *e });
                    None
                }
                Op::Ret => {
                    return match inst.args.first() {
                        Some(&x) => Ok(Some(get(&vals, x)?)),
                        None => Ok(None),
                    };
                }
            };
            vals[v.idx()] = result;
        }
        let n = next.ok_or_else(|| ExecError::Type("block without terminator".into()))?;
        prev = Some(block);
        block = n;
    }
}

/// Run `fname` on integer arguments and return its integer result.
pub fn run_ir(m: &Module, fname: &str, args: &[u64], env: &mut IrEnv) -> Result<Option<u64>, ExecError> {
    let f = m.get(fname).ok_or_else(|| ExecError::NoFunction(fname.to_string()))?;
    let a: Vec<RtVal> = args.iter().map(|&x| RtVal::Int(x)).collect();
    match call(m, f, &a, env, 0)? {
        None => Ok(None),
        Some(v) => Ok(Some(v.int()?)),
    }
}

/// Run `fname` on arbitrary runtime values.
pub fn run_ir_values(m: &Module, fname: &str, args: &[RtVal], env: &mut IrEnv) -> Result<Option<RtVal>, ExecError> {
    let f = m.get(fname).ok_or_else(|| ExecError::NoFunction(fname.to_string()))?;
    call(m, f, args, env, 0)
}

/// Context-switch shim: fill a state record from the call arguments (all
/// other registers zero, stack pointer at the virtual stack), run the
/// state-form function, and read the return register back.
pub fn run_state_form(
    m: &Module,
    fname: &str,
    program: &Program,
    entry: u64,
    args: &[u64],
    abi: Abi,
) -> Result<(u64, IrEnv), ExecError> {
    let s = MachineState::for_call(program, entry, args, abi);
    let mut env = IrEnv::new(s.mem.clone());
    let st = env.alloc_state(&s);
    run_ir_values(m, fname, &[st], &mut env)?;
    match env.read_field(st, abi.ret_reg().index())? {
        Some(RtVal::Int(v)) => Ok((v, env)),
        Some(RtVal::Poison) => Err(ExecError::Unknown),
        _ => Err(ExecError::Uninitialized),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    #[test]
    fn constant_function_returns_constant() {
        let m = parse_module("define i64 @k() {\nb0:\n  ret i64 42\n}\n").unwrap();
        let mut env = IrEnv::new(Memory::default());
        assert_eq!(run_ir(&m, "k", &[], &mut env), Ok(Some(42)));
    }

    #[test]
    fn unknown_is_an_error_and_division_traps() {
        let m = parse_module(
            "define i64 @u() {\nb0:\n  %0 = unknown i64\n  ret %0\n}\n\
             define i64 @d(i64 %0) {\nb0:\n  %1 = udiv i64 i64 7, %0\n  ret %1\n}\n",
        )
        .unwrap();
        let mut env = IrEnv::new(Memory::default());
        assert_eq!(run_ir(&m, "u", &[], &mut env), Err(ExecError::Unknown));
        let dead = parse_module(
            "define i64 @f(i64 %0) {\nb0:\n  %1 = unknown i64\n  %2 = add i64 %1, %0\n  %3 = sub i64 %2, %2\n  ret %0\n}\n",
        )
        .unwrap();
        assert_eq!(run_ir(&dead, "f", &[4], &mut env), Ok(Some(4)));
        assert_eq!(run_ir(&m, "d", &[0], &mut env), Err(ExecError::DivisionByZero));
        assert_eq!(run_ir(&m, "d", &[2], &mut env), Ok(Some(3)));
    }

    #[test]
    fn unwritten_mirror_reads_as_poison() {
        let src = "@g = global i64 mirror 0x200\n\n\
define i64 @dead(i64 %0) {\nb0:\n  %1 = globaladdr ptr @g\n  %2 = load i64 %1\n  ret %0\n}\n\
define i64 @live() {\nb0:\n  %0 = globaladdr ptr @g\n  %1 = load i64 %0\n  ret %1\n}\n";
        let m = parse_module(src).unwrap();
        let mut env = IrEnv::new(Memory::default());
        assert_eq!(run_ir(&m, "dead", &[9], &mut env), Ok(Some(9)));
        assert_eq!(run_ir(&m, "live", &[], &mut env), Err(ExecError::Unknown));
    }

    #[test]
    fn loops_phis_memory_and_globals() {
        let src = "\
@g = global i64 mirror 0x100

define i64 @sum(i64 %0) {
b0:
  br b1
b1:
  %1 = phi i64 [i64 0, b0], [%4, b1]
  %2 = phi i64 [i64 0, b0], [%5, b1]
  %4 = add i64 %1, i64 1
  %5 = add i64 %2, %1
  %6 = icmp.ult i1 %4, %0
  condbr %6, b1, b2
b2:
  %7 = globaladdr ptr @g
  store %7, %5
  %8 = memread i64 i64 0x100
  ret %8
}
";
        let m = parse_module(src).unwrap();
        let mut env = IrEnv::new(Memory::default());
        assert_eq!(run_ir(&m, "sum", &[5], &mut env), Ok(Some(10)));
        assert_eq!(env.writes, vec![(0x100, 8, 10)]);
        env.budget = 50;
        env.steps = 0;
        assert_eq!(run_ir(&m, "sum", &[1000], &mut env), Err(ExecError::BudgetExhausted(50)));
    }

    #[test]
    fn state_records() {
        let src = "\
define void @f(ptr %0) {
b0:
  %1 = fieldaddr.rcx ptr %0
  %2 = load i64 %1
  %3 = fieldaddr.rax ptr %0
  %4 = mul i64 %2, i64 3
  store %3, %4
  ret
}
";
        let m = parse_module(src).unwrap();
        let p = crate::machine::assemble("ret").unwrap();
        let (rax, _) = run_state_form(&m, "f", &p, p.entry, &[5], Abi::Win64).unwrap();
        assert_eq!(rax, 15);
    }
}
