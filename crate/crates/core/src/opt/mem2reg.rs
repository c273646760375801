//! Scalar replacement of state records and promotion of scalar slots to SSA.

use std::collections::{HashMap, HashSet};

use super::cfg::remove_unreachable;
use crate::ir::dom::dominators_reachable;
use crate::ir::state::field_ty;
use crate::ir::{AllocaKind, Block, Function, Op, Ty, Value};

/// Split each `alloca.state` whose fields are only loaded and stored into
/// one scalar slot per field.
pub fn sroa(f: &mut Function) -> bool {
    let users = f.users();
    let mut changed = false;
    for a in f.insts() {
        if f.op(a) != Some(&Op::Alloca(AllocaKind::State)) {
            continue;
        }
        let us = users.get(&a).cloned().unwrap_or_default();
        let splittable = us.iter().all(|&u| {
            matches!(f.op(u), Some(Op::FieldAddr(_)))
                && users.get(&u).into_iter().flatten().all(|&w| is_access_through(f, w, u))
        });
        if !splittable {
            continue;
        }
        let entry = f.entry();
        let mut slots: HashMap<u16, Value> = HashMap::new();
        let mut map = HashMap::new();
        for &u in &us {
            let Some(&Op::FieldAddr(i)) = f.op(u) else { unreachable!() };
            let slot = *slots.entry(i).or_insert_with(|| {
                let s = f.create(Ty::Ptr, Op::Alloca(AllocaKind::Scalar(field_ty(i as usize))), vec![]);
                f.place(entry, 0, s);
                s
            });
            map.insert(u, slot);
        }
        let dead: HashSet<Value> = us.iter().copied().chain([a]).collect();
        f.replace_uses(&map);
        f.remove_all(&dead);
        changed = true;
    }
    changed
}

fn is_access_through(f: &Function, user: Value, p: Value) -> bool {
    match f.op(user) {
        Some(Op::Load) => true,
        Some(Op::Store) => f.args(user)[0] == p && f.args(user)[1] != p,
        _ => false,
    }
}

/// Promote scalar slots that are only loaded and stored.
pub fn mem2reg(f: &mut Function) -> bool {
    let mut changed = remove_unreachable(f);
    let users = f.users();
    let slots: Vec<(Value, Ty)> = f
        .insts()
        .into_iter()
        .filter_map(|a| match f.op(a) {
            Some(&Op::Alloca(AllocaKind::Scalar(t))) => Some((a, t)),
            _ => None,
        })
        .filter(|&(a, _)| users.get(&a).into_iter().flatten().all(|&u| is_access_through(f, u, a)))
        .filter(|&(a, t)| {
            users
                .get(&a)
                .into_iter()
                .flatten()
                .all(|&u| f.op(u) != Some(&Op::Load) || f.ty(u) == t)
        })
        .collect();
    if slots.is_empty() {
        return changed;
    }
    let dt = dominators_reachable(f);
    let preds = f.preds();
    let df = dt.frontiers(&preds);
    let index: HashMap<Value, usize> = slots.iter().enumerate().map(|(i, &(a, _))| (a, i)).collect();

    // Phi placement on iterated frontiers of the defining blocks.
    let mut phi_slot: HashMap<Value, usize> = HashMap::new();
    for (i, &(a, t)) in slots.iter().enumerate() {
        let mut defs: Vec<Block> = users[&a]
            .iter()
            .filter(|&&u| f.op(u) == Some(&Op::Store))
            .filter_map(|&u| f.block_of(u))
            .collect();
        let mut has_phi = HashSet::new();
        while let Some(b) = defs.pop() {
            for &d in df.get(&b).into_iter().flatten() {
                if has_phi.insert(d) {
                    let p = f.create(t, Op::Phi(vec![]), vec![]);
                    f.place(d, 0, p);
                    phi_slot.insert(p, i);
                    defs.push(d);
                }
            }
        }
    }

    // Renaming walk over the dominator tree.
    let entry = f.entry();
    let mut undef: Vec<Option<Value>> = vec![None; slots.len()];
    let mut map: HashMap<Value, Value> = HashMap::new();
    let mut dead: HashSet<Value> = slots.iter().map(|&(a, _)| a).collect();
    let children = dt.children();
    let mut stack: Vec<(Block, Vec<Option<Value>>)> = vec![(entry, vec![None; slots.len()])];
    while let Some((b, mut cur)) = stack.pop() {
        for v in f.blocks[b.idx()].insts.clone() {
            if let Some(&i) = phi_slot.get(&v) {
                cur[i] = Some(v);
                continue;
            }
            match f.op(v) {
                Some(Op::Load) => {
                    if let Some(&i) = index.get(&f.args(v)[0]) {
                        let val = match cur[i] {
                            Some(x) => x,
                            None => undef_value(f, &mut undef, i, slots[i].1),
                        };
                        map.insert(v, val);
                        dead.insert(v);
                    }
                }
                Some(Op::Store) => {
                    if let Some(&i) = index.get(&f.args(v)[0]) {
                        cur[i] = Some(f.args(v)[1]);
                        dead.insert(v);
                    }
                }
                _ => {}
            }
        }
        let mut succs = f.succs(b);
        succs.dedup();
        if succs.len() == 2 && succs[0] == succs[1] {
            succs.pop();
        }
        for s in succs {
            for p in f.phis(s) {
                if let Some(&i) = phi_slot.get(&p) {
                    let val = match cur[i] {
                        Some(x) => x,
                        None => undef_value(f, &mut undef, i, slots[i].1),
                    };
                    let inst = f.inst_mut(p).unwrap();
                    if let Op::Phi(bs) = &mut inst.op {
                        bs.push(b);
                    }
                    inst.args.push(val);
                }
            }
        }
        for &c in children.get(&b).into_iter().flatten() {
            stack.push((c, cur.clone()));
        }
    }
    // Loaded-only values may themselves be loads that were replaced.
    f.replace_uses(&map);
    f.remove_all(&dead);
    changed = true;
    changed
}

fn undef_value(f: &mut Function, undef: &mut [Option<Value>], i: usize, t: Ty) -> Value {
    *undef[i].get_or_insert_with(|| {
        let u = f.create(t, Op::Unknown, vec![]);
        let entry = f.entry();
        let at = f.phis(entry).len();
        f.place(entry, at, u);
        u
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::{ir::run_ir, IrEnv, Memory};
    use crate::ir::{parse_module, print_function, verify, Module};

    const LOOP: &str = "define i64 @f(i64 %0) {
b0:
  %1 = alloca.i64 ptr
  %2 = alloca.i64 ptr
  store %1, i64 0
  store %2, %0
  br b1
b1:
  %3 = load i64 %2
  %4 = icmp.eq i1 %3, i64 0
  condbr %4, b3, b2
b2:
  %5 = load i64 %1
  %6 = add i64 %5, %3
  store %1, %6
  %7 = sub i64 %3, i64 1
  store %2, %7
  br b1
b3:
  %8 = load i64 %1
  ret %8
}
";

    #[test]
    fn promotes_loop_carried_slots() {
        let m = parse_module(LOOP).unwrap();
        let mut f = m.functions["f"].clone();
        assert!(mem2reg(&mut f));
        verify(&f).unwrap();
        let t = print_function(&f);
        assert!(!t.contains("alloca") && !t.contains("load") && !t.contains("store"), "{t}");
        assert_eq!(t.matches("phi").count(), 2, "{t}");
        let mut m2 = Module::new();
        m2.add(f);
        for x in [0u64, 1, 5, 17] {
            let a = run_ir(&m, "f", &[x], &mut IrEnv::new(Memory::default())).unwrap();
            let b = run_ir(&m2, "f", &[x], &mut IrEnv::new(Memory::default())).unwrap();
            assert_eq!(a, b);
            assert_eq!(b, Some(x * (x + 1) / 2));
        }
    }

    #[test]
    fn state_record_is_split_then_promoted() {
        let m = parse_module(
            "define i64 @f(i64 %0) {
b0:
  %1 = alloca.state ptr
  %2 = fieldaddr.rcx ptr %1
  store %2, %0
  %3 = fieldaddr.zf ptr %1
  store %3, i8 1
  %4 = fieldaddr.rcx ptr %1
  %5 = load i64 %4
  ret %5
}
",
        )
        .unwrap();
        let mut f = m.functions["f"].clone();
        assert!(sroa(&mut f));
        verify(&f).unwrap();
        assert_eq!(print_function(&f).matches("alloca").count(), 2);
        mem2reg(&mut f);
        assert_eq!(print_function(&f), "define i64 @f(i64 %0) {\nb0:\n  ret %0\n}\n");
    }

    #[test]
    fn escaping_record_is_left_alone() {
        let m = parse_module(
            "define i64 @f(i64 %0) {
b0:
  %1 = alloca.state ptr
  %2 = call i64 @g(%1)
  ret %2
}
",
        )
        .unwrap();
        let mut f = m.functions["f"].clone();
        assert!(!sroa(&mut f));
    }

    #[test]
    fn uninitialised_read_is_unknown() {
        let m = parse_module("define i64 @f() {\nb0:\n  %0 = alloca.i64 ptr\n  %1 = load i64 %0\n  ret %1\n}\n").unwrap();
        let mut f = m.functions["f"].clone();
        mem2reg(&mut f);
        assert!(print_function(&f).contains("unknown i64"));
    }
}
