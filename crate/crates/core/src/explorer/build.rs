//! Turn a recovered graph into one state-form function.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{RecoveredCfg, VerdictState};
use crate::ir::{Block, Cursor, Function, Module, Pred, Ty};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BuildError {
    #[error("unresolved control flow at {}", fmt_addrs(.0))]
    Unresolved(Vec<u64>),
}

fn fmt_addrs(a: &[u64]) -> String {
    a.iter().map(|x| format!("{x:#x}")).collect::<Vec<_>>().join(", ")
}

/// `define void @name(ptr state)` that calls each reachable block function
/// in turn and dispatches on its next-pc. The block functions are included.
pub fn build_cfg_function(cfg: &RecoveredCfg, name: &str) -> Result<Module, BuildError> {
    let nodes = cfg.reachable();
    let bad: Vec<u64> =
        nodes.iter().copied().filter(|a| cfg.verdicts[a].state == VerdictState::Unknown).collect();
    if !bad.is_empty() {
        return Err(BuildError::Unresolved(bad));
    }
    let mut m = Module::new();
    let mut f = Function::new(name, &[Ty::Ptr], Ty::Void);
    let st = f.params[0];
    let start = f.add_block();
    let blocks: BTreeMap<u64, Block> = nodes
        .iter()
        .map(|&a| {
            let b = f.add_block();
            f.blocks[b.idx()].addr = Some(a);
            (a, b)
        })
        .collect();
    Cursor::new(&mut f, start).br(blocks[&cfg.entry]);
    for &a in &nodes {
        let lb = &cfg.blocks[&a];
        m.add(lb.body.clone());
        let mut c = Cursor::new(&mut f, blocks[&a]);
        let pc = c.konst(Ty::I64, a);
        let npc = c.call(Ty::I64, &lb.body.name, vec![st, pc]);
        match &cfg.verdicts[&a].state {
            VerdictState::Exit => {
                c.ret(None);
            }
            VerdictState::ProvenOpaque(d) => {
                c.br(blocks[d]);
            }
            VerdictState::NotOpaque(ts) => {
                let ts: Vec<u64> = ts.iter().copied().collect();
                let (last, rest) = ts.split_last().expect("non-empty target set");
                let mut cur = blocks[&a];
                for t in rest {
                    let next = f.add_block();
                    let mut c = Cursor::new(&mut f, cur);
                    let k = c.konst(Ty::I64, *t);
                    let eq = c.icmp(Pred::Eq, npc, k);
                    c.condbr(eq, blocks[t], next);
                    cur = next;
                }
                Cursor::new(&mut f, cur).br(blocks[last]);
            }
            VerdictState::Unknown => unreachable!(),
        }
    }
    m.add(f);
    Ok(m)
}
