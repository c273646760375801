//! Mark-and-sweep dead code elimination.

use std::collections::HashSet;

use crate::ir::{Function, Op, Value};

fn is_root(op: &Op) -> bool {
    !op.is_pure()
}

pub fn dce(f: &mut Function) -> bool {
    let changed = dead_alloca_stores(f);
    let mut live: HashSet<Value> = HashSet::new();
    let mut work = Vec::new();
    let placed = f.insts();
    for &v in &placed {
        if is_root(f.op(v).unwrap()) {
            live.insert(v);
            work.push(v);
        }
    }
    while let Some(v) = work.pop() {
        for &a in f.args(v) {
            if f.inst(a).is_some() && live.insert(a) {
                work.push(a);
            }
        }
    }
    let dead: HashSet<Value> = placed.into_iter().filter(|v| !live.contains(v)).collect();
    if dead.is_empty() {
        return changed;
    }
    f.remove_all(&dead);
    true
}

/// Remove stores whose only purpose is to fill a never-loaded local slot.
pub fn dead_alloca_stores(f: &mut Function) -> bool {
    let users = f.users();
    let mut dead = HashSet::new();
    for v in f.insts() {
        if !matches!(f.op(v), Some(Op::Alloca(crate::ir::AllocaKind::Scalar(_)))) {
            continue;
        }
        let us = users.get(&v).cloned().unwrap_or_default();
        let only_stores = us.iter().all(|&u| f.op(u) == Some(&Op::Store) && f.args(u)[0] == v && f.args(u)[1] != v);
        if only_stores {
            dead.extend(us);
            dead.insert(v);
        }
    }
    if dead.is_empty() {
        return false;
    }
    f.remove_all(&dead);
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_module, print_function, verify};

    #[test]
    fn removes_unused_flag_math_and_dead_cycles() {
        let src = "define i64 @f(i64 %0) {
b0:
  %1 = icmp.ult i1 %0, i64 3
  %2 = zext i8 %1
  br b1
b1:
  %3 = phi i64 [%0, b0], [%4, b1]
  %4 = add i64 %3, i64 1
  %5 = icmp.eq i1 %0, i64 9
  condbr %5, b1, b2
b2:
  ret %0
}
";
        let mut f = parse_module(src).unwrap().functions.into_values().next().unwrap();
        assert!(dce(&mut f));
        verify(&f).unwrap();
        let t = print_function(&f);
        assert!(!t.contains("zext") && !t.contains("phi") && !t.contains("ult"), "{t}");
        assert!(!dce(&mut f));
    }

    #[test]
    fn write_only_slot_disappears() {
        let src = "define i64 @f(i64 %0) {\nb0:\n  %1 = alloca.i64 ptr\n  store %1, %0\n  ret %0\n}\n";
        let mut f = parse_module(src).unwrap().functions.into_values().next().unwrap();
        assert!(dce(&mut f));
        assert_eq!(f.inst_count(), 1);
    }
}
