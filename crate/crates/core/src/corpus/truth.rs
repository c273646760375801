//! Ground-truth control flow of a generated program, computed from the
//! instruction stream and the generator's knowledge of which conditional
//! branches are opaque.

use std::collections::{BTreeMap, BTreeSet};

use crate::machine::{InstructionCategory, Program};

/// Instruction-level successors, with opaque branches reduced to their
/// live target.
fn successors(p: &Program, addr: u64, live: &BTreeMap<u64, u64>) -> Result<Vec<u64>, String> {
    let i = p.instructions.get(&addr).ok_or_else(|| format!("no instruction at {addr:#x}"))?;
    Ok(match i.category {
        InstructionCategory::NoOp | InstructionCategory::Normal | InstructionCategory::DirectFunctionCall => {
            vec![i.fallthrough()]
        }
        InstructionCategory::DirectJump => vec![i.label_targets[0]],
        InstructionCategory::ConditionalBranch => match live.get(&addr) {
            Some(&t) => vec![t],
            None => vec![i.label_targets[0], i.fallthrough()],
        },
        InstructionCategory::FunctionReturn => vec![],
        c => return Err(format!("{c:?} at {addr:#x} is not generated")),
    })
}

/// Basic blocks (by leader) and edges reachable from `entry`.
pub fn truth_cfg(
    p: &Program,
    entry: u64,
    live: &BTreeMap<u64, u64>,
) -> Result<(BTreeSet<u64>, BTreeSet<(u64, u64)>), String> {
    let mut reach = BTreeSet::new();
    let mut leaders = BTreeSet::from([entry]);
    let mut work = vec![entry];
    while let Some(a) = work.pop() {
        if !reach.insert(a) {
            continue;
        }
        let i = &p.instructions[&a];
        let succ = successors(p, a, live)?;
        if i.category.stops_block() {
            leaders.extend(succ.iter().copied());
        }
        work.extend(succ);
    }
    let mut edges = BTreeSet::new();
    for &l in &leaders {
        let mut a = l;
        loop {
            let succ = successors(p, a, live)?;
            let stops = p.instructions[&a].category.stops_block();
            if stops || succ.iter().any(|s| leaders.contains(s)) {
                edges.extend(succ.into_iter().map(|s| (l, s)));
                break;
            }
            a = succ[0];
        }
    }
    Ok((leaders, edges))
}

/// Blocks left after contracting every edge from a single-successor block
/// into a single-predecessor block other than the entry.
pub fn contracted_count(entry: u64, nodes: &BTreeSet<u64>, edges: &BTreeSet<(u64, u64)>) -> usize {
    let outd = |a: u64| edges.iter().filter(|e| e.0 == a).count();
    let ind = |b: u64| edges.iter().filter(|e| e.1 == b).count();
    nodes.len()
        - edges.iter().filter(|&&(a, b)| a != b && b != entry && outd(a) == 1 && ind(b) == 1).count()
}
