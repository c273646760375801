//! In-place instruction rewriting shared by constant folding and instcombine.

use std::collections::HashMap;

use super::{catalog, procedural, OptContext};
use crate::exec::ir::eval_pure;
use crate::ir::{BinOp, Block, Function, Op, Ty, Value};

/// Rewrites one function block by block. Instructions built while a rule
/// fires are simplified immediately and placed before the instruction being
/// visited.
pub struct Rewriter<'f> {
    pub f: &'f mut Function,
    map: HashMap<Value, Value>,
    out: Vec<Value>,
    pub block: Block,
    depth: u32,
    /// Edges removed while rewriting terminators; phi fixups are deferred.
    dropped_edges: Vec<(Block, Block)>,
    pub ctx: &'f mut OptContext,
    full: bool,
    pub bits_cache: HashMap<Value, Option<Vec<procedural::Bit>>>,
}

impl Rewriter<'_> {
    pub fn resolve(&self, mut v: Value) -> Value {
        while let Some(&w) = self.map.get(&v) {
            v = w;
        }
        v
    }

    pub fn konst(&mut self, ty: Ty, v: u64) -> Value {
        self.f.konst(ty, v)
    }

    pub fn c(&self, v: Value) -> Option<u64> {
        self.f.as_const(v)
    }

    /// Create an instruction at the current position, simplifying it first.
    pub fn build(&mut self, ty: Ty, op: Op, args: Vec<Value>) -> Value {
        let v = self.f.create(ty, op, args);
        if self.depth < 16 {
            self.depth += 1;
            let r = self.simplify(v);
            self.depth -= 1;
            if let Some(r) = r {
                return r;
            }
        }
        self.f.inst_mut(v).unwrap().block = Some(self.block);
        self.out.push(v);
        v
    }

    pub fn drop_edge(&mut self, from: Block, to: Block) {
        self.dropped_edges.push((from, to));
    }

    fn simplify(&mut self, v: Value) -> Option<Value> {
        if let Some(r) = fold(self, v) {
            return Some(r);
        }
        if self.full {
            if let Some(r) = catalog::apply(self, v) {
                return Some(r);
            }
            if let Some(r) = procedural::apply(self, v) {
                return Some(r);
            }
        }
        None
    }
}

fn sweep(f: &mut Function, ctx: &mut OptContext, full: bool) -> bool {
    let mut rw = Rewriter {
        f,
        map: HashMap::new(),
        out: Vec::new(),
        block: Block(0),
        depth: 0,
        dropped_edges: Vec::new(),
        ctx,
        full,
        bits_cache: HashMap::new(),
    };
    let mut changed = false;
    for b in rw.f.layout.clone() {
        let insts = std::mem::take(&mut rw.f.blocks[b.idx()].insts);
        rw.block = b;
        rw.out = Vec::with_capacity(insts.len());
        for v in insts {
            let args: Vec<Value> = rw.f.args(v).iter().map(|&a| rw.resolve(a)).collect();
            if args.as_slice() != rw.f.args(v) {
                rw.f.inst_mut(v).unwrap().args = args;
            }
            let before = rw.f.inst(v).unwrap().op.clone();
            match rw.simplify(v) {
                Some(r) if r != v => {
                    rw.map.insert(v, r);
                    rw.f.inst_mut(v).unwrap().block = None;
                    changed = true;
                }
                _ => {
                    if rw.f.inst(v).unwrap().op != before {
                        changed = true;
                    }
                    rw.out.push(v);
                }
            }
        }
        rw.f.blocks[b.idx()].insts = std::mem::take(&mut rw.out);
    }
    let dropped = std::mem::take(&mut rw.dropped_edges);
    let map = std::mem::take(&mut rw.map);
    f_fixup(rw.f, &map, &dropped);
    changed
}

fn f_fixup(f: &mut Function, map: &HashMap<Value, Value>, dropped: &[(Block, Block)]) {
    f.replace_uses(map);
    for &(from, to) in dropped {
        if !f.succs(from).contains(&to) {
            f.remove_phi_incoming(to, from);
        }
    }
}

pub fn constant_fold(f: &mut Function, ctx: &mut OptContext) -> bool {
    sweep(f, ctx, false)
}

pub fn instcombine(f: &mut Function, ctx: &mut OptContext) -> bool {
    sweep(f, ctx, true)
}

/// Constant evaluation and the trivial structural folds.
fn fold(rw: &mut Rewriter, v: Value) -> Option<Value> {
    let inst = rw.f.inst(v)?;
    let ty = rw.f.ty(v);
    let args = inst.args.clone();
    match inst.op.clone() {
        Op::Bin(BinOp::UDiv | BinOp::SDiv) if rw.c(args[1]) == Some(0) => {
            rw.ctx.diag(format!("division by constant zero in %{} folded to unknown", v.0));
            let inst = rw.f.inst_mut(v).unwrap();
            inst.op = Op::Unknown;
            inst.args.clear();
            None
        }
        op @ (Op::Bin(_) | Op::Un(_) | Op::Icmp(_) | Op::Cast(_)) => {
            let cs: Option<Vec<u64>> = args.iter().map(|&a| rw.c(a)).collect();
            let cs = cs?;
            let tys: Vec<Ty> = args.iter().map(|&a| rw.f.ty(a)).collect();
            eval_pure(&op, ty, &tys, &cs).ok().map(|r| rw.konst(ty, r))
        }
        Op::Select => {
            if args[1] == args[2] {
                return Some(args[1]);
            }
            let c = rw.c(args[0])?;
            Some(if c & 1 == 1 { args[1] } else { args[2] })
        }
        Op::Phi(_) => {
            let mut uniq = None;
            for &a in &args {
                if a == v || Some(a) == uniq {
                    continue;
                }
                if uniq.is_some() {
                    return None;
                }
                uniq = Some(a);
            }
            uniq
        }
        Op::CondBr(t, e) => {
            let keep = if t == e {
                t
            } else {
                let c = rw.c(args[0])?;
                let (keep, drop) = if c & 1 == 1 { (t, e) } else { (e, t) };
                let b = rw.block;
                rw.drop_edge(b, drop);
                keep
            };
            let inst = rw.f.inst_mut(v).unwrap();
            inst.op = Op::Br(keep);
            inst.args.clear();
            None
        }
        _ => None,
    }
}
