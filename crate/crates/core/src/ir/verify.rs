//! Structural, typing and SSA checks.

use std::collections::{HashMap, HashSet};
use std::fmt;

use super::dom::dominators_reachable;
use super::state::NUM_FIELDS;
use super::{Block, CastOp, Function, Module, Op, Ty, Value, ValueDef};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub block: Option<Block>,
    pub value: Option<Value>,
    pub msg: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(b) = self.block {
            write!(f, "b{}: ", b.0)?;
        }
        if let Some(v) = self.value {
            write!(f, "%{}: ", v.0)?;
        }
        f.write_str(&self.msg)
    }
}

struct Checker {
    out: Vec<Violation>,
}

impl Checker {
    fn err(&mut self, b: Option<Block>, v: Option<Value>, msg: impl Into<String>) {
        self.out.push(Violation { block: b, value: v, msg: msg.into() });
    }
}

/// Check `f` in isolation. Call targets are not resolved.
pub fn verify(f: &Function) -> Result<(), Vec<Violation>> {
    verify_with(f, None)
}

/// Check every function of `m`, resolving calls against the module.
pub fn verify_module(m: &Module) -> Result<(), Vec<Violation>> {
    let mut all = Vec::new();
    for f in m.functions.values() {
        if let Err(mut v) = verify_with(f, Some(m)) {
            for x in v.iter_mut() {
                x.msg = format!("@{}: {}", f.name, x.msg);
            }
            all.extend(v);
        }
    }
    if all.is_empty() {
        Ok(())
    } else {
        Err(all)
    }
}

fn verify_with(f: &Function, m: Option<&Module>) -> Result<(), Vec<Violation>> {
    let mut c = Checker { out: Vec::new() };
    if f.layout.is_empty() {
        c.err(None, None, "function has no blocks");
        return Err(c.out);
    }
    let layout: HashSet<Block> = f.layout.iter().copied().collect();
    if layout.len() != f.layout.len() {
        c.err(None, None, "block listed twice in layout");
    }

    // Placement: every placed instruction knows its block, and appears once.
    let mut pos: HashMap<Value, (Block, usize)> = HashMap::new();
    for &b in &f.layout {
        let insts = &f.blocks[b.idx()].insts;
        for (i, &v) in insts.iter().enumerate() {
            match f.inst(v) {
                None => c.err(Some(b), Some(v), "non-instruction placed in block"),
                Some(inst) => {
                    if inst.block != Some(b) {
                        c.err(Some(b), Some(v), "instruction block back-reference is stale");
                    }
                    if pos.insert(v, (b, i)).is_some() {
                        c.err(Some(b), Some(v), "instruction placed twice");
                    }
                    let last = i + 1 == insts.len();
                    if inst.op.is_terminator() && !last {
                        c.err(Some(b), Some(v), "terminator in the middle of a block");
                    }
                    if matches!(inst.op, Op::Phi(_)) && i > 0 && !matches!(f.op(insts[i - 1]), Some(Op::Phi(_))) {
                        c.err(Some(b), Some(v), "phi after non-phi instruction");
                    }
                }
            }
        }
        if f.terminator(b).is_none() {
            c.err(Some(b), None, "block has no terminator");
        }
        for s in f.succs(b) {
            if !layout.contains(&s) {
                c.err(Some(b), None, format!("branch to block b{} outside the layout", s.0));
            }
        }
    }
    if !c.out.is_empty() {
        return Err(c.out);
    }

    let preds = f.preds();
    let dom = dominators_reachable(f);
    let dominates_use = |def: Value, user_block: Block, user_pos: usize| -> bool {
        match &f.values[def.idx()].def {
            ValueDef::Param(_) | ValueDef::Const(_) => true,
            ValueDef::Inst(_) => match pos.get(&def) {
                None => false,
                Some(&(db, dp)) => {
                    if !dom.order.contains_key(&user_block) {
                        return true;
                    }
                    if !dom.order.contains_key(&db) {
                        return false;
                    }
                    if db == user_block {
                        dp < user_pos
                    } else {
                        dom.dominates(db, user_block)
                    }
                }
            },
        }
    };

    for &b in &f.layout {
        for (i, &v) in f.blocks[b.idx()].insts.iter().enumerate() {
            let inst = f.inst(v).unwrap();
            let ty = f.ty(v);
            let at = |k: usize| f.ty(inst.args[k]);
            let nargs = inst.args.len();
            let expect_args = |c: &mut Checker, n: usize| {
                if nargs != n {
                    c.err(Some(b), Some(v), format!("expected {n} operands, found {nargs}"));
                    false
                } else {
                    true
                }
            };
            for &a in &inst.args {
                if a.idx() >= f.values.len() {
                    c.err(Some(b), Some(v), "operand out of range");
                }
            }
            match &inst.op {
                Op::Unknown => {
                    if expect_args(&mut c, 0) && !ty.is_int() {
                        c.err(Some(b), Some(v), "unknown must be an integer");
                    }
                }
                Op::Bin(_) => {
                    if expect_args(&mut c, 2) && (!ty.is_int() || at(0) != ty || at(1) != ty) {
                        c.err(Some(b), Some(v), "binary operand widths disagree");
                    }
                }
                Op::Un(_) => {
                    if expect_args(&mut c, 1) && (!ty.is_int() || at(0) != ty) {
                        c.err(Some(b), Some(v), "unary operand width disagrees");
                    }
                }
                Op::Icmp(_) => {
                    if expect_args(&mut c, 2) && (ty != Ty::I1 || at(0) != at(1) || !at(0).is_int()) {
                        c.err(Some(b), Some(v), "icmp operands must share an integer width");
                    }
                }
                Op::Select => {
                    if expect_args(&mut c, 3) && (at(0) != Ty::I1 || at(1) != ty || at(2) != ty) {
                        c.err(Some(b), Some(v), "select typing");
                    }
                }
                Op::Cast(op) => {
                    if expect_args(&mut c, 1) {
                        let (from, to) = (at(0).bits(), ty.bits());
                        let ok = at(0).is_int()
                            && ty.is_int()
                            && match op {
                                CastOp::Zext | CastOp::Sext => to > from,
                                CastOp::Trunc => to < from,
                            };
                        if !ok {
                            c.err(Some(b), Some(v), format!("invalid {} from {} to {}", op.name(), at(0), ty));
                        }
                    }
                }
                Op::Phi(blocks) => {
                    if blocks.len() != nargs {
                        c.err(Some(b), Some(v), "phi incoming lists differ in length");
                    }
                    if inst.args.iter().any(|&a| f.ty(a) != ty) {
                        c.err(Some(b), Some(v), "phi operand width disagrees");
                    }
                    let mut inc: Vec<Block> = blocks.clone();
                    inc.sort();
                    let mut ps = preds[&b].clone();
                    ps.sort();
                    if inc != ps {
                        c.err(Some(b), Some(v), "phi incoming blocks do not match predecessors");
                    }
                }
                Op::FieldAddr(i) => {
                    if expect_args(&mut c, 1) && (at(0) != Ty::Ptr || ty != Ty::Ptr) {
                        c.err(Some(b), Some(v), "fieldaddr needs a pointer");
                    }
                    if *i as usize >= NUM_FIELDS {
                        c.err(Some(b), Some(v), "field index out of range");
                    }
                }
                Op::Load => {
                    if expect_args(&mut c, 1) && (at(0) != Ty::Ptr || !ty.is_int()) {
                        c.err(Some(b), Some(v), "load typing");
                    }
                }
                Op::Store => {
                    if expect_args(&mut c, 2) && (at(0) != Ty::Ptr || !at(1).is_int() || ty != Ty::Void) {
                        c.err(Some(b), Some(v), "store typing");
                    }
                }
                Op::Alloca(_) | Op::GlobalAddr(_) => {
                    if expect_args(&mut c, 0) && ty != Ty::Ptr {
                        c.err(Some(b), Some(v), "address-forming op must be a pointer");
                    }
                    if let (Op::GlobalAddr(n), Some(m)) = (&inst.op, m) {
                        if !m.globals.contains_key(n) {
                            c.err(Some(b), Some(v), format!("unknown global @{n}"));
                        }
                    }
                }
                Op::MemRead => {
                    if expect_args(&mut c, 1) && (at(0) != Ty::I64 || !matches!(ty, Ty::I8 | Ty::I16 | Ty::I32 | Ty::I64)) {
                        c.err(Some(b), Some(v), "mem_read typing");
                    }
                }
                Op::MemWrite => {
                    if expect_args(&mut c, 2)
                        && (at(0) != Ty::I64 || !matches!(at(1), Ty::I8 | Ty::I16 | Ty::I32 | Ty::I64))
                    {
                        c.err(Some(b), Some(v), "mem_write typing");
                    }
                }
                Op::Call(name) => {
                    if let Some(m) = m {
                        match m.get(name) {
                            None => c.err(Some(b), Some(v), format!("call to unknown function @{name}")),
                            Some(callee) => {
                                let want = callee.param_tys();
                                let got: Vec<Ty> = inst.args.iter().map(|&a| f.ty(a)).collect();
                                if want != got || callee.ret_ty != ty {
                                    c.err(Some(b), Some(v), format!("call signature mismatch for @{name}"));
                                }
                            }
                        }
                    }
                }
                Op::Br(_) => {
                    expect_args(&mut c, 0);
                }
                Op::CondBr(..) => {
                    if expect_args(&mut c, 1) && at(0) != Ty::I1 {
                        c.err(Some(b), Some(v), "condbr condition must be i1");
                    }
                }
                Op::Ret => match (nargs, f.ret_ty) {
                    (0, Ty::Void) => {}
                    (1, t) if t == at(0) => {}
                    _ => c.err(Some(b), Some(v), "return value does not match signature"),
                },
            }

            // SSA dominance.
            if let Op::Phi(blocks) = &inst.op {
                for (&a, &pb) in inst.args.iter().zip(blocks.iter()) {
                    let end = f.blocks[pb.idx()].insts.len();
                    if !dominates_use(a, pb, end) {
                        c.err(Some(b), Some(v), format!("def %{} does not dominate use", a.0));
                    }
                }
            } else {
                for &a in &inst.args {
                    if a == v || !dominates_use(a, b, i) {
                        c.err(Some(b), Some(v), format!("def %{} does not dominate use", a.0));
                    }
                }
            }
        }
    }
    if c.out.is_empty() {
        Ok(())
    } else {
        Err(c.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{BinOp, Cursor};

    fn diamond() -> Function {
        let mut f = Function::new("d", &[Ty::I64], Ty::I64);
        let x = f.params[0];
        let [a, b, c, d] = [f.add_block(), f.add_block(), f.add_block(), f.add_block()];
        let mut k = Cursor::new(&mut f, a);
        let z = k.konst(Ty::I64, 0);
        let cmp = k.icmp(crate::ir::Pred::Eq, x, z);
        k.condbr(cmp, b, c);
        let one = f.konst(Ty::I64, 1);
        let v1 = Cursor::new(&mut f, b).bin(BinOp::Add, x, one);
        Cursor::new(&mut f, b).br(d);
        let v2 = Cursor::new(&mut f, c).bin(BinOp::Sub, x, one);
        Cursor::new(&mut f, c).br(d);
        let p = f.append(d, Ty::I64, Op::Phi(vec![b, c]), vec![v1, v2]);
        Cursor::new(&mut f, d).ret(Some(p));
        f
    }

    #[test]
    fn well_formed_diamond() {
        assert_eq!(verify(&diamond()), Ok(()));
    }

    #[test]
    fn missing_terminator() {
        let mut f = Function::new("t", &[], Ty::Void);
        f.add_block();
        let errs = verify(&f).unwrap_err();
        assert!(errs.iter().any(|e| e.msg.contains("no terminator")));
    }

    #[test]
    fn non_dominating_def() {
        let mut f = diamond();
        // Make the join return the value defined only on one arm.
        let d = f.layout[3];
        let ret = f.terminator(d).unwrap();
        let arm_val = f.blocks[f.layout[1].idx()].insts[0];
        f.inst_mut(ret).unwrap().args = vec![arm_val];
        let errs = verify(&f).unwrap_err();
        assert!(errs.iter().any(|e| e.msg.contains("does not dominate use")), "{errs:?}");
    }

    #[test]
    fn width_mismatch() {
        let mut f = Function::new("w", &[Ty::I64, Ty::I32], Ty::I64);
        let b = f.add_block();
        let (x, y) = (f.params[0], f.params[1]);
        let s = f.append(b, Ty::I64, Op::Bin(BinOp::Add), vec![x, y]);
        Cursor::new(&mut f, b).ret(Some(s));
        assert!(verify(&f).is_err());
    }
}
