//! Dominator-scoped common subexpression elimination.

use std::collections::HashMap;

use crate::ir::dom::dominators_reachable;
use crate::ir::{Function, Op, Ty, Value};

#[derive(Clone, PartialEq, Eq, Hash)]
struct Key(Op, Ty, Vec<Value>);

fn key(f: &Function, v: Value) -> Option<Key> {
    let inst = f.inst(v)?;
    match &inst.op {
        Op::Bin(_) | Op::Un(_) | Op::Icmp(_) | Op::Select | Op::Cast(_) | Op::FieldAddr(_) | Op::GlobalAddr(_) => {}
        _ => return None,
    }
    let mut args = inst.args.clone();
    if let Op::Bin(b) = inst.op {
        if b.commutative() && args[0] > args[1] {
            args.swap(0, 1);
        }
    }
    Some(Key(inst.op.clone(), f.ty(v), args))
}

pub fn cse(f: &mut Function) -> bool {
    if f.layout.is_empty() {
        return false;
    }
    let dt = dominators_reachable(f);
    let kids = dt.children();
    let mut table: HashMap<Key, Value> = HashMap::new();
    let mut map: HashMap<Value, Value> = HashMap::new();
    let mut dead = std::collections::HashSet::new();
    // Iterative preorder walk with scope undo logs.
    enum Step {
        Enter(crate::ir::Block),
        Leave(Vec<Key>),
    }
    let mut stack = vec![Step::Enter(dt.entry())];
    while let Some(s) = stack.pop() {
        match s {
            Step::Leave(keys) => {
                for k in keys {
                    table.remove(&k);
                }
            }
            Step::Enter(b) => {
                let mut added = Vec::new();
                for v in f.blocks[b.idx()].insts.clone() {
                    let resolved: Vec<Value> = f.args(v).iter().map(|a| *map.get(a).unwrap_or(a)).collect();
                    if resolved.as_slice() != f.args(v) {
                        f.inst_mut(v).unwrap().args = resolved;
                    }
                    let Some(k) = key(f, v) else { continue };
                    match table.get(&k) {
                        Some(&w) => {
                            map.insert(v, w);
                            dead.insert(v);
                        }
                        None => {
                            table.insert(k.clone(), v);
                            added.push(k);
                        }
                    }
                }
                stack.push(Step::Leave(added));
                if let Some(ch) = kids.get(&b) {
                    for &c in ch.iter().rev() {
                        stack.push(Step::Enter(c));
                    }
                }
            }
        }
    }
    if map.is_empty() {
        return false;
    }
    f.replace_uses(&map);
    f.remove_all(&dead);
    true
}
