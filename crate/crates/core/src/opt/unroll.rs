//! Full unrolling of loops whose path is fixed by constants.
//!
//! The loop is simulated from its preheader with every value that depends
//! only on constants evaluated; when each branch taken inside the loop is
//! decided this way and the header runs at most `limit + 1` times, the
//! visited block instances are cloned in order and the loop is dropped.

use std::collections::{HashMap, HashSet};

use super::cfg::remove_unreachable;
use crate::exec::ir::eval_pure;
use crate::ir::dom::dominators_reachable;
use crate::ir::{Block, Function, Op, Ty, Value};

pub const DEFAULT_TRIP_LIMIT: u32 = 512;

/// Most instructions a single unrolled loop may expand to.
const EXPANSION_BUDGET: usize = 1 << 18;

struct Path {
    blocks: Vec<Block>,
    /// Block entered on leaving the loop; `None` when the path returns.
    exit: Option<Block>,
}

pub fn unroll_loops(f: &mut Function, limit: u32) -> bool {
    let mut changed = remove_unreachable(f);
    // Each round unrolls one loop; the bound keeps pathological nests finite.
    for _ in 0..64 {
        if !unroll_one(f, limit) {
            break;
        }
        changed = true;
    }
    changed
}

fn unroll_one(f: &mut Function, limit: u32) -> bool {
    let dt = dominators_reachable(f);
    let preds = f.preds();
    for &h in &dt.rpo {
        let latches: Vec<Block> = preds[&h].iter().copied().filter(|&b| dt.dominates(h, b)).collect();
        if latches.is_empty() {
            continue;
        }
        let mut body: HashSet<Block> = HashSet::from([h]);
        let mut work = latches.clone();
        while let Some(b) = work.pop() {
            if body.insert(b) {
                work.extend(preds[&b].iter().copied());
            }
        }
        let outside: Vec<Block> = preds[&h].iter().copied().filter(|b| !body.contains(b)).collect();
        let [pre] = outside.as_slice() else { continue };
        if let Some(path) = simulate(f, h, *pre, &body, limit) {
            rewrite(f, h, *pre, &body, &path);
            remove_unreachable(f);
            return true;
        }
    }
    false
}

fn known(f: &Function, vals: &HashMap<Value, u64>, v: Value) -> Option<u64> {
    f.as_const(v).or_else(|| vals.get(&v).copied())
}

fn incoming(f: &Function, phi: Value, from: Block) -> Value {
    let Some(Op::Phi(bs)) = f.op(phi) else { unreachable!() };
    f.args(phi)[bs.iter().position(|&b| b == from).expect("phi lacks incoming edge")]
}

fn simulate(f: &Function, h: Block, pre: Block, body: &HashSet<Block>, limit: u32) -> Option<Path> {
    let mut vals: HashMap<Value, u64> = HashMap::new();
    let (mut cur, mut from) = (h, pre);
    let mut blocks = Vec::new();
    let mut header_visits = 0u32;
    let mut size = 0usize;
    loop {
        if cur == h {
            header_visits += 1;
            if header_visits > limit + 1 {
                return None;
            }
        }
        blocks.push(cur);
        size += f.blocks[cur.idx()].insts.len();
        if size > EXPANSION_BUDGET {
            return None;
        }
        let phis = f.phis(cur);
        let updates: Vec<(Value, Option<u64>)> =
            phis.iter().map(|&p| (p, known(f, &vals, incoming(f, p, from)))).collect();
        for (p, k) in updates {
            set(&mut vals, p, k);
        }
        let mut next = None;
        for &v in &f.blocks[cur.idx()].insts[phis.len()..] {
            let args = f.args(v);
            match f.op(v).unwrap() {
                op @ (Op::Bin(_) | Op::Un(_) | Op::Icmp(_) | Op::Cast(_)) => {
                    let cs: Option<Vec<u64>> = args.iter().map(|&a| known(f, &vals, a)).collect();
                    let tys: Vec<Ty> = args.iter().map(|&a| f.ty(a)).collect();
                    let r = cs.and_then(|cs| eval_pure(op, f.ty(v), &tys, &cs).ok());
                    set(&mut vals, v, r);
                }
                Op::Select => {
                    let r = known(f, &vals, args[0])
                        .and_then(|c| known(f, &vals, if c & 1 == 1 { args[1] } else { args[2] }));
                    set(&mut vals, v, r);
                }
                Op::Br(t) => next = Some(*t),
                Op::CondBr(t, e) => {
                    let c = known(f, &vals, args[0])?;
                    next = Some(if c & 1 == 1 { *t } else { *e });
                }
                Op::Ret => return Some(Path { blocks, exit: None }),
                _ => set(&mut vals, v, None),
            }
        }
        let next = next?;
        if !body.contains(&next) {
            return Some(Path { blocks, exit: Some(next) });
        }
        from = cur;
        cur = next;
    }
}

fn set(vals: &mut HashMap<Value, u64>, v: Value, k: Option<u64>) {
    match k {
        Some(x) => {
            vals.insert(v, x);
        }
        None => {
            vals.remove(&v);
        }
    }
}

fn rewrite(f: &mut Function, h: Block, pre: Block, body: &HashSet<Block>, path: &Path) {
    let clones: Vec<Block> = path.blocks.iter().map(|_| f.add_block()).collect();
    let mut latest: HashMap<Value, Value> = HashMap::new();
    let map = |latest: &HashMap<Value, Value>, a: Value| latest.get(&a).copied().unwrap_or(a);
    let mut from = pre;
    for (k, (&ob, &nb)) in path.blocks.iter().zip(&clones).enumerate() {
        f.blocks[nb.idx()].addr = f.blocks[ob.idx()].addr;
        let phis = f.phis(ob);
        let vals: Vec<Value> = phis.iter().map(|&p| map(&latest, incoming(f, p, from))).collect();
        for (p, v) in phis.iter().zip(vals) {
            latest.insert(*p, v);
        }
        for v in f.blocks[ob.idx()].insts[phis.len()..].to_vec() {
            let op = f.op(v).unwrap().clone();
            let (op, args) = match op {
                Op::Br(_) | Op::CondBr(..) => {
                    let target = clones.get(k + 1).copied().or(path.exit).unwrap();
                    (Op::Br(target), vec![])
                }
                o => (o, f.args(v).iter().map(|&a| map(&latest, a)).collect()),
            };
            let nv = f.append(nb, f.ty(v), op, args);
            latest.insert(v, nv);
        }
        from = ob;
    }
    let last = *clones.last().unwrap();
    if let Some(e) = path.exit {
        for p in f.phis(e) {
            let v = map(&latest, incoming(f, p, from));
            let inst = f.inst_mut(p).unwrap();
            if let Op::Phi(bs) = &mut inst.op {
                bs.push(last);
            }
            inst.args.push(v);
        }
    }
    f.retarget(pre, h, clones[0]);
    // Uses after the loop see the last executed instance.
    let clone_set: HashSet<Block> = clones.iter().copied().collect();
    for b in f.layout.clone() {
        if body.contains(&b) || clone_set.contains(&b) {
            continue;
        }
        for v in f.blocks[b.idx()].insts.clone() {
            let args: Vec<Value> = f.args(v).iter().map(|&a| map(&latest, a)).collect();
            f.inst_mut(v).unwrap().args = args;
        }
    }
    f.layout.retain(|b| !clone_set.contains(b));
    let at = f.layout.iter().position(|&b| b == h).unwrap();
    f.layout.splice(at..at, clones);
}
