//! Signature recovery and the argument-based wrapper.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::stack::{ResidualClass, StackSlotMap};
use super::{param_field, ret_blocks, At, RecoverError};
use crate::exec::STACK_BASE;
use crate::ir::dom::dominators_reachable;
use crate::ir::state::{field_ty, gpr_field, NUM_FIELDS, RAX, RSP};
use crate::ir::{BinOp, Cursor, Function, Module, Op, Ty, Value};
use crate::machine::Abi;
use crate::opt::{inline_calls, run_pipeline, OptConfig, OptContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveredSignature {
    pub register_args: u32,
    pub stack_args: u32,
    pub returns_value: bool,
}

impl RecoveredSignature {
    pub fn arg_count(&self) -> u32 {
        self.register_args + self.stack_args
    }
}

fn position(f: &Function, v: Value) -> (crate::ir::Block, usize) {
    let b = f.block_of(v).unwrap();
    (b, f.blocks[b.idx()].insts.iter().position(|&x| x == v).unwrap())
}

/// Count register arguments by walking the ABI order from the last
/// register: the first register whose earliest access (one dominating all
/// its other accesses) is a load fixes the count. Stack arguments come from
/// the residual globals and imply every register argument is used.
pub fn recover_register_arguments(
    f: &Function,
    abi: Abi,
    slots: &StackSlotMap,
    diags: &mut Vec<String>,
) -> RecoveredSignature {
    let st = f.params[0];
    let dt = dominators_reachable(f);
    let regs = abi.arg_regs();
    let stack_args = slots.stack_arg_count(abi);
    let mut register_args = 0;
    if stack_args > 0 {
        register_args = regs.len() as u32;
    } else {
        for (i, &r) in regs.iter().enumerate().rev() {
            let field = gpr_field(r);
            let accesses: Vec<Value> = f
                .insts()
                .into_iter()
                .filter(|&v| match f.op(v) {
                    Some(Op::Load) | Some(Op::Store) => param_field(f, f.args(v)[0], st) == Some(field),
                    _ => false,
                })
                .collect();
            if !accesses.iter().any(|&v| f.op(v) == Some(&Op::Load)) {
                continue;
            }
            let dominates = |a: Value, b: Value| {
                let ((ba, pa), (bb, pb)) = (position(f, a), position(f, b));
                if ba == bb {
                    pa <= pb
                } else {
                    dt.dominates(ba, bb)
                }
            };
            match accesses.iter().find(|&&a| accesses.iter().all(|&b| dominates(a, b))) {
                Some(&a) if f.op(a) == Some(&Op::Load) => {
                    register_args = i as u32 + 1;
                    break;
                }
                Some(_) => {}
                None => diags.push(format!(
                    "warning: {}: no access to {} dominates the others; not treated as an argument",
                    f.name,
                    crate::ir::field_name(field)
                )),
            }
        }
    }
    RecoveredSignature { register_args, stack_args, returns_value: returns_value(f) }
}

/// The return register is written on every path to a return.
fn returns_value(f: &Function) -> bool {
    let st = f.params[0];
    let rets = ret_blocks(f);
    !rets.is_empty()
        && rets.iter().all(|&b| {
            f.blocks[b.idx()].insts.iter().any(|&v| {
                f.op(v) == Some(&Op::Store)
                    && param_field(f, f.args(v)[0], st) == Some(RAX)
                    && !may_be_entry_value(f, f.args(v)[1], st)
            })
        })
}

fn may_be_entry_value(f: &Function, v: Value, st: Value) -> bool {
    let mut seen = HashSet::new();
    let mut work = vec![v];
    while let Some(v) = work.pop() {
        if !seen.insert(v) {
            continue;
        }
        match f.op(v) {
            Some(Op::Load) if param_field(f, f.args(v)[0], st) == Some(RAX) => return true,
            Some(Op::Phi(_)) => work.extend_from_slice(f.args(v)),
            Some(Op::Select) => work.extend_from_slice(&f.args(v)[1..]),
            _ => {}
        }
    }
    false
}

/// Output of reconstruction: either an argument-based function or the
/// state-form fallback.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub module: Module,
    pub func: String,
    pub state_form: bool,
}

/// Wrap the state-form function `func` in a function taking the recovered
/// arguments: fill a local state record (unused registers and flags are
/// unknown, rsp is the stack base), call it, return rax. Stack-argument
/// globals become the trailing parameters. Falls back to the state form if
/// anything tied to the record survives optimization.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_function(
    m: &Module,
    func: &str,
    name: &str,
    sig: &RecoveredSignature,
    abi: Abi,
    slots: &StackSlotMap,
    opt: &OptConfig,
    diags: &mut Vec<String>,
) -> Result<Reconstruction, RecoverError> {
    let inner = m.functions.get(func).ok_or_else(|| RecoverError::NoFunction(func.into()))?;
    let nparams = sig.arg_count() as usize;
    let ret_ty = if sig.returns_value { Ty::I64 } else { Ty::Void };
    let mut w = Function::new(name, &vec![Ty::I64; nparams], ret_ty);
    let b = w.add_block();
    let params = w.params.clone();
    let regs = abi.arg_regs();
    let mut c = Cursor::new(&mut w, b);
    let st = c.ins(Ty::Ptr, Op::Alloca(crate::ir::AllocaKind::State), vec![]);
    for i in 0..NUM_FIELDS {
        let v = match regs.iter().position(|&r| gpr_field(r) == i) {
            Some(k) if k < sig.register_args as usize => params[k],
            _ if i == RSP => c.konst(Ty::I64, STACK_BASE),
            _ => c.unknown(field_ty(i)),
        };
        let p = c.field_addr(st, i);
        c.store(p, v);
    }
    c.call(Ty::Void, func, vec![st]);
    if sig.returns_value {
        let p = c.field_addr(st, RAX);
        let r = c.load(Ty::I64, p);
        c.ret(Some(r));
    } else {
        c.ret(None);
    }
    inline_calls(&mut w, &[(func.to_string(), inner.clone())].into())?;
    bind_stack_arguments(&mut w, slots, abi, sig.register_args as usize);
    let mut out = Module::new();
    out.globals = m.globals.clone();
    let mut ctx = OptContext::new(opt.clone());
    ctx.globals = Some(out.globals.clone());
    run_pipeline(&mut w, &mut ctx);
    diags.append(&mut ctx.diagnostics);
    if let Some(why) = leftover(&w, slots) {
        diags.push(format!("warning: {name}: {why}; keeping the state-record form"));
        return Ok(Reconstruction { module: m.clone(), func: func.to_string(), state_form: true });
    }
    out.add(w);
    out.remove_unused_globals();
    Ok(Reconstruction { module: out, func: name.to_string(), state_form: false })
}

/// Replace reads of stack-argument globals with parameters and drop writes
/// to them.
fn bind_stack_arguments(w: &mut Function, slots: &StackSlotMap, abi: Abi, first: usize) {
    let base = abi.stack_arg_offset() as i64;
    let args: Vec<(String, i64)> = slots
        .residual_globals
        .iter()
        .filter(|r| r.class == ResidualClass::StackArgument)
        .map(|r| (r.global.clone(), r.offset - base))
        .collect();
    let users = w.users();
    for v in w.insts() {
        let Some(Op::GlobalAddr(n)) = w.op(v) else { continue };
        let Some((_, rel)) = args.iter().find(|(g, _)| g == n) else { continue };
        let k = first + (*rel / 8) as usize;
        let byte = (*rel % 8) as u64;
        for &u in users.get(&v).into_iter().flatten() {
            match w.op(u) {
                Some(Op::Load) if k < w.params.len() => {
                    let ty = w.ty(u);
                    let p = w.params[k];
                    let mut at = At::before(w, u);
                    let shifted = if byte > 0 { at.bin_k(BinOp::LShr, p, 8 * byte) } else { p };
                    let val = at.resize(shifted, ty);
                    w.replace_all_uses(u, val);
                    w.remove(u);
                }
                Some(Op::Store) => w.remove(u),
                _ => {}
            }
        }
    }
}

fn leftover(w: &Function, slots: &StackSlotMap) -> Option<String> {
    let stack_globals: HashSet<&str> = slots.slots.values().map(|s| s.global.as_str()).collect();
    for v in w.insts() {
        match w.op(v)? {
            Op::FieldAddr(i) => return Some(format!("state field {} still accessed", crate::ir::field_name(*i as usize))),
            Op::Alloca(crate::ir::AllocaKind::State) => return Some("state record still allocated".into()),
            Op::Unknown => return Some("depends on a value that is not an argument".into()),
            Op::Load => {
                if let Some(Op::GlobalAddr(n)) = w.op(w.args(v)[0]) {
                    if stack_globals.contains(n.as_str()) {
                        return Some(format!("reads caller stack through @{n}"));
                    }
                }
            }
            _ => {}
        }
    }
    None
}
