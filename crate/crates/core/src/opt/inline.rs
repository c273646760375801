use std::collections::{BTreeMap, HashMap, HashSet};

use super::OptError;
use crate::ir::{Block, Function, Op, Ty, Value, ValueDef};

/// Splice every call to a function in `callees` into `f`, transitively.
/// Calls to names outside the map stay.
pub fn inline_calls(f: &mut Function, callees: &BTreeMap<String, Function>) -> Result<bool, OptError> {
    check_acyclic(f, callees)?;
    let mut changed = false;
    while let Some(call) = f
        .insts()
        .into_iter()
        .find(|&v| matches!(f.op(v), Some(Op::Call(n)) if callees.contains_key(n)))
    {
        let Some(Op::Call(name)) = f.op(call) else { unreachable!() };
        let g = &callees[name.as_str()];
        splice(f, call, g);
        changed = true;
    }
    Ok(changed)
}

fn check_acyclic(f: &Function, callees: &BTreeMap<String, Function>) -> Result<(), OptError> {
    fn visit<'a>(
        name: &'a str,
        calls: &[String],
        callees: &'a BTreeMap<String, Function>,
        path: &mut Vec<&'a str>,
        done: &mut HashSet<&'a str>,
    ) -> Result<(), OptError> {
        if done.contains(name) {
            return Ok(());
        }
        if path.contains(&name) {
            let mut cycle: Vec<String> = path.iter().map(|s| s.to_string()).collect();
            cycle.push(name.to_string());
            return Err(OptError::RecursiveInline(cycle));
        }
        path.push(name);
        for c in calls {
            if let Some((k, g)) = callees.get_key_value(c.as_str()) {
                visit(k, &g.callees(), callees, path, done)?;
            }
        }
        path.pop();
        done.insert(name);
        Ok(())
    }
    let mut path = Vec::new();
    let mut done = HashSet::new();
    visit(&f.name, &f.callees(), callees, &mut path, &mut done)
}

fn splice(f: &mut Function, call: Value, g: &Function) {
    let b = f.block_of(call).unwrap();
    let pos = f.blocks[b.idx()].insts.iter().position(|&v| v == call).unwrap();
    let args = f.args(call).to_vec();

    // Everything after the call moves to a continuation block.
    let cont = f.add_block();
    let tail: Vec<Value> = f.blocks[b.idx()].insts.split_off(pos + 1);
    f.blocks[b.idx()].insts.pop();
    f.inst_mut(call).unwrap().block = None;
    for &v in &tail {
        f.inst_mut(v).unwrap().block = Some(cont);
    }
    f.blocks[cont.idx()].insts = tail;
    for s in f.succs(cont) {
        f.rename_phi_incoming(s, b, cont);
    }

    let mut bmap: HashMap<Block, Block> = HashMap::new();
    for &gb in &g.layout {
        let nb = f.add_block();
        f.blocks[nb.idx()].addr = g.blocks[gb.idx()].addr;
        bmap.insert(gb, nb);
    }
    let mut vmap: HashMap<Value, Value> = g.params.iter().copied().zip(args).collect();
    // Create all instructions first so forward references (phis) resolve.
    let mut rets: Vec<(Block, Option<Value>)> = Vec::new();
    let mut fresh: Vec<(Value, Value)> = Vec::new();
    for &gb in &g.layout {
        let nb = bmap[&gb];
        for &v in &g.blocks[gb.idx()].insts {
            let inst = g.inst(v).unwrap();
            let op = match &inst.op {
                Op::Phi(bs) => Op::Phi(bs.iter().map(|x| bmap[x]).collect()),
                Op::Br(t) => Op::Br(bmap[t]),
                Op::CondBr(t, e) => Op::CondBr(bmap[t], bmap[e]),
                Op::Ret => {
                    rets.push((nb, inst.args.first().copied()));
                    Op::Br(cont)
                }
                o => o.clone(),
            };
            let nv = f.create(g.ty(v), op, vec![]);
            f.inst_mut(nv).unwrap().block = Some(nb);
            f.blocks[nb.idx()].insts.push(nv);
            vmap.insert(v, nv);
            fresh.push((v, nv));
        }
    }
    let lookup = |f: &mut Function, a: Value| -> Value {
        if let Some(&x) = vmap.get(&a) {
            return x;
        }
        match g.data(a).def {
            ValueDef::Const(c) => f.konst(g.ty(a), c),
            _ => unreachable!("callee value without definition"),
        }
    };
    for (v, nv) in fresh {
        let inst = g.inst(v).unwrap();
        let new_args: Vec<Value> = if inst.op == Op::Ret {
            vec![]
        } else {
            inst.args.iter().map(|&a| lookup(f, a)).collect()
        };
        f.inst_mut(nv).unwrap().args = new_args;
    }
    let ret_vals: Vec<(Block, Value)> = rets
        .iter()
        .filter_map(|&(blk, r)| r.map(|r| (blk, lookup(f, r))))
        .collect();

    let entry = bmap[&g.entry()];
    f.append(b, Ty::Void, Op::Br(entry), vec![]);
    if f.ty(call) != Ty::Void {
        let result = match ret_vals.as_slice() {
            [(_, only)] => *only,
            [] => {
                let u = f.create(f.ty(call), Op::Unknown, vec![]);
                f.place(cont, 0, u);
                u
            }
            _ => {
                let p = f.create(
                    f.ty(call),
                    Op::Phi(ret_vals.iter().map(|&(blk, _)| blk).collect()),
                    ret_vals.iter().map(|&(_, v)| v).collect(),
                );
                f.place(cont, 0, p);
                p
            }
        };
        f.replace_all_uses(call, result);
    }

    let mut new_blocks: Vec<Block> = g.layout.iter().map(|gb| bmap[gb]).collect();
    new_blocks.push(cont);
    f.layout.retain(|x| !new_blocks.contains(x));
    let at = f.layout.iter().position(|&x| x == b).unwrap() + 1;
    f.layout.splice(at..at, new_blocks);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::{ir::run_ir, IrEnv, Memory};
    use crate::ir::{parse_module, print_function, verify, Module};

    const SRC: &str = "define i64 @inc(i64 %0) {
b0:
  %1 = icmp.eq i1 %0, i64 0
  condbr %1, b1, b2
b1:
  ret i64 100
b2:
  %2 = add i64 %0, i64 1
  ret %2
}

define i64 @f(i64 %0) {
b0:
  %1 = call i64 @inc(%0)
  %2 = call i64 @inc(%1)
  %3 = mul i64 %2, i64 3
  ret %3
}
";

    #[test]
    fn calls_are_spliced() {
        let m = parse_module(SRC).unwrap();
        let mut f = m.functions["f"].clone();
        assert!(inline_calls(&mut f, &m.functions).unwrap());
        verify(&f).unwrap_or_else(|e| panic!("{e:?}\n{}", print_function(&f)));
        assert!(!print_function(&f).contains("call"));
        let mut m2 = Module::new();
        m2.add(f);
        for x in [0u64, 1, u64::MAX, 41] {
            let a = run_ir(&m, "f", &[x], &mut IrEnv::new(Memory::default())).unwrap();
            let b = run_ir(&m2, "f", &[x], &mut IrEnv::new(Memory::default())).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn recursion_is_rejected() {
        let m = parse_module(
            "define i64 @a(i64 %0) {\nb0:\n  %1 = call i64 @b(%0)\n  ret %1\n}\n\ndefine i64 @b(i64 %0) {\nb0:\n  %1 = call i64 @a(%0)\n  ret %1\n}\n",
        )
        .unwrap();
        let mut f = m.functions["a"].clone();
        assert!(matches!(inline_calls(&mut f, &m.functions), Err(OptError::RecursiveInline(_))));
    }

    #[test]
    fn unknown_callees_stay() {
        let m = parse_module("define i64 @f(i64 %0) {\nb0:\n  %1 = call i64 @ext(%0)\n  ret %1\n}\n").unwrap();
        let mut f = m.functions["f"].clone();
        assert!(!inline_calls(&mut f, &BTreeMap::new()).unwrap());
    }
}
