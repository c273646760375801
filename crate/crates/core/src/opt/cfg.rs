//! Control-flow cleanup.

use std::collections::{HashMap, HashSet};

use crate::ir::{BinOp, Block, Function, Op, Ty, UnOp, Value};

/// Most instructions hoisted out of a side block when merging branches.
const HOIST_LIMIT: usize = 32;

/// Drop blocks unreachable from entry, fixing phi lists.
pub fn remove_unreachable(f: &mut Function) -> bool {
    let live = f.reachable();
    if live.len() == f.layout.len() {
        return false;
    }
    let dropped: Vec<Block> = f.layout.iter().copied().filter(|b| !live.contains(b)).collect();
    for &d in &dropped {
        for s in f.succs(d) {
            if live.contains(&s) {
                f.remove_phi_incoming(s, d);
            }
        }
    }
    f.retain_blocks(&live);
    true
}

pub fn simplify_cfg(f: &mut Function) -> bool {
    let mut changed = false;
    loop {
        let mut round = remove_unreachable(f);
        round |= same_target_branches(f);
        round |= merge_chains(f);
        round |= thread_empty(f);
        round |= fold_to_common_dest(f);
        if !round {
            return changed;
        }
        changed = true;
    }
}

fn same_target_branches(f: &mut Function) -> bool {
    let mut changed = false;
    for b in f.layout.clone() {
        let Some(t) = f.terminator(b) else { continue };
        if let Some(&Op::CondBr(x, y)) = f.op(t) {
            if x == y {
                let i = f.inst_mut(t).unwrap();
                i.op = Op::Br(x);
                i.args.clear();
                changed = true;
            }
        }
    }
    changed
}

/// Fold a block into its unique predecessor when that predecessor has no
/// other successor.
fn merge_chains(f: &mut Function) -> bool {
    let mut changed = false;
    loop {
        let preds = f.preds();
        let entry = f.entry();
        let cand = f.layout.iter().copied().find_map(|b| {
            let t = f.terminator(b)?;
            let Some(&Op::Br(s)) = f.op(t) else { return None };
            (s != b && s != entry && preds[&s].len() == 1).then_some((b, s, t))
        });
        let Some((b, s, t)) = cand else { return changed };
        let mut map = HashMap::new();
        let mut dead = HashSet::new();
        for p in f.phis(s) {
            map.insert(p, f.args(p)[0]);
            dead.insert(p);
        }
        f.remove(t);
        let moved: Vec<Value> = std::mem::take(&mut f.blocks[s.idx()].insts)
            .into_iter()
            .filter(|v| !dead.contains(v))
            .collect();
        for &v in &moved {
            f.inst_mut(v).unwrap().block = Some(b);
        }
        f.blocks[b.idx()].insts.extend(moved);
        for &p in &dead {
            f.inst_mut(p).unwrap().block = None;
        }
        for n in f.succs(b) {
            f.rename_phi_incoming(n, s, b);
        }
        f.replace_uses(&map);
        f.layout.retain(|&x| x != s);
        changed = true;
    }
}

/// Redirect predecessors of blocks holding nothing but a jump.
fn thread_empty(f: &mut Function) -> bool {
    let mut changed = false;
    let entry = f.entry();
    for e in f.layout.clone() {
        if e == entry || f.blocks[e.idx()].insts.len() != 1 {
            continue;
        }
        let t = f.blocks[e.idx()].insts[0];
        let Some(&Op::Br(target)) = f.op(t) else { continue };
        if target == e {
            continue;
        }
        let preds = f.preds();
        let tphis = f.phis(target);
        for &p in &preds[&e] {
            if !tphis.is_empty() && preds[&target].contains(&p) {
                continue;
            }
            f.retarget(p, e, target);
            for &ph in &tphis {
                let inst = f.inst(ph).unwrap();
                let Op::Phi(bs) = &inst.op else { unreachable!() };
                let k = bs.iter().position(|&x| x == e).unwrap();
                let val = inst.args[k];
                let inst = f.inst_mut(ph).unwrap();
                if let Op::Phi(bs) = &mut inst.op {
                    bs.push(p);
                }
                inst.args.push(val);
            }
            changed = true;
        }
        if f.preds()[&e].is_empty() {
            f.remove_phi_incoming(target, e);
        }
    }
    changed
}

fn hoistable(f: &Function, v: Value) -> bool {
    match f.op(v) {
        Some(Op::Bin(BinOp::UDiv | BinOp::SDiv)) => {
            matches!(f.as_const(f.args(v)[1]), Some(c) if c != 0)
        }
        Some(Op::Bin(_) | Op::Un(_) | Op::Icmp(_) | Op::Select | Op::Cast(_) | Op::FieldAddr(_)) => true,
        _ => false,
    }
}

/// `b: condbr c, T, D` where T only computes a second condition and
/// branches to D or Y: hoist T into b and branch once on the combined
/// condition.
fn fold_to_common_dest(f: &mut Function) -> bool {
    let mut changed = false;
    'blocks: for b in f.layout.clone() {
        if !f.layout.contains(&b) {
            continue;
        }
        let Some(bt) = f.terminator(b) else { continue };
        let Some(&Op::CondBr(x, y)) = f.op(bt) else { continue };
        let c = f.args(bt)[0];
        let preds = f.preds();
        for (side, t, d) in [(true, x, y), (false, y, x)] {
            if t == b || t == d || preds[&t].len() != 1 {
                continue;
            }
            let body = f.blocks[t.idx()].insts.clone();
            let (&tt, rest) = body.split_last().unwrap();
            let Some(&Op::CondBr(tx, ty)) = f.op(tt) else { continue };
            let c2 = f.args(tt)[0];
            let (to_d_on_true, yb) = if tx == d && ty != d {
                (true, ty)
            } else if ty == d && tx != d {
                (false, tx)
            } else {
                continue;
            };
            if yb == t || yb == b || rest.len() > HOIST_LIMIT || !rest.iter().all(|&v| hoistable(f, v)) {
                continue;
            }
            // y is entered only through t, so its phis just rename.
            if preds[&yb].contains(&b) {
                continue;
            }
            for &v in rest {
                f.remove(v);
                let at = f.blocks[b.idx()].insts.len() - 1;
                f.place(b, at, v);
            }
            f.remove(tt);
            let not = |f: &mut Function, v| f.insert_before_term(b, Ty::I1, Op::Un(UnOp::Not), vec![v]);
            let bin = |f: &mut Function, op, u, v| f.insert_before_term(b, Ty::I1, Op::Bin(op), vec![u, v]);
            // Condition under which the merged branch goes to y.
            let cy = match (side, to_d_on_true) {
                (true, true) => {
                    let n2 = not(f, c2);
                    bin(f, BinOp::And, c, n2)
                }
                (true, false) => bin(f, BinOp::And, c, c2),
                (false, true) => {
                    let o = bin(f, BinOp::Or, c, c2);
                    not(f, o)
                }
                (false, false) => {
                    let n = not(f, c);
                    bin(f, BinOp::And, n, c2)
                }
            };
            // Merge d's two incoming entries (from b and from t).
            for p in f.phis(d) {
                let inst = f.inst(p).unwrap();
                let Op::Phi(bs) = &inst.op else { unreachable!() };
                let kb = bs.iter().position(|&q| q == b).unwrap();
                let kt = bs.iter().position(|&q| q == t).unwrap();
                let (vb, vt) = (inst.args[kb], inst.args[kt]);
                let ty = f.ty(p);
                let merged = if vb == vt {
                    vb
                } else if side {
                    f.insert_before_term(b, ty, Op::Select, vec![c, vt, vb])
                } else {
                    f.insert_before_term(b, ty, Op::Select, vec![c, vb, vt])
                };
                let inst = f.inst_mut(p).unwrap();
                inst.args[kb] = merged;
            }
            f.remove_phi_incoming(d, t);
            f.rename_phi_incoming(yb, t, b);
            let bt = f.terminator(b).unwrap();
            let i = f.inst_mut(bt).unwrap();
            i.op = Op::CondBr(yb, d);
            i.args = vec![cy];
            changed = true;
            continue 'blocks;
        }
    }
    if changed {
        remove_unreachable(f);
    }
    changed
}
