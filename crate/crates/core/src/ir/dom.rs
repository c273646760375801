//! Dominator tree by the iterative reverse-postorder dataflow fixpoint.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use super::{Block, Function};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DomError {
    #[error("block b{0} is unreachable from entry")]
    Unreachable(u32),
    #[error("function has no blocks")]
    Empty,
}

#[derive(Clone, Debug)]
pub struct DominatorTree {
    pub idom: HashMap<Block, Block>,
    /// Blocks in reverse postorder.
    pub rpo: Vec<Block>,
    pub order: HashMap<Block, usize>,
}

impl DominatorTree {
    pub fn entry(&self) -> Block {
        self.rpo[0]
    }

    pub fn dominates(&self, a: Block, mut b: Block) -> bool {
        loop {
            if a == b {
                return true;
            }
            let p = self.idom[&b];
            if p == b {
                return false;
            }
            b = p;
        }
    }

    pub fn strictly_dominates(&self, a: Block, b: Block) -> bool {
        a != b && self.dominates(a, b)
    }

    pub fn children(&self) -> HashMap<Block, Vec<Block>> {
        let mut c: HashMap<Block, Vec<Block>> = HashMap::new();
        for &b in &self.rpo {
            let p = self.idom[&b];
            if p != b {
                c.entry(p).or_default().push(b);
            }
        }
        c
    }

    /// Dominance frontier of every block.
    pub fn frontiers(&self, preds: &HashMap<Block, Vec<Block>>) -> HashMap<Block, HashSet<Block>> {
        let mut df: HashMap<Block, HashSet<Block>> = HashMap::new();
        for &b in &self.rpo {
            let ps: Vec<Block> = preds[&b].iter().copied().filter(|p| self.idom.contains_key(p)).collect();
            if ps.len() < 2 {
                continue;
            }
            for p in ps {
                let mut runner = p;
                while runner != self.idom[&b] {
                    df.entry(runner).or_default().insert(b);
                    let next = self.idom[&runner];
                    if next == runner {
                        break;
                    }
                    runner = next;
                }
            }
        }
        df
    }
}

fn rpo_from(entry: Block, succs: &dyn Fn(Block) -> Vec<Block>) -> Vec<Block> {
    let mut post = Vec::new();
    let mut seen = HashSet::new();
    let mut stack: Vec<(Block, Vec<Block>)> = vec![(entry, succs(entry))];
    seen.insert(entry);
    while let Some((b, rest)) = stack.last_mut() {
        if let Some(n) = rest.pop() {
            if seen.insert(n) {
                let s = succs(n);
                stack.push((n, s));
            }
        } else {
            post.push(*b);
            stack.pop();
        }
    }
    post.reverse();
    post
}

/// Generic dominator computation over an explicit successor relation.
pub fn dominators_of(
    entry: Block,
    succs: &dyn Fn(Block) -> Vec<Block>,
    preds: &HashMap<Block, Vec<Block>>,
) -> DominatorTree {
    let rpo = rpo_from(entry, &|b| {
        let mut s = succs(b);
        s.reverse();
        s
    });
    let order: HashMap<Block, usize> = rpo.iter().enumerate().map(|(i, &b)| (b, i)).collect();
    let mut idom: HashMap<Block, Block> = HashMap::new();
    idom.insert(entry, entry);
    let mut changed = true;
    while changed {
        changed = false;
        for &b in rpo.iter().skip(1) {
            let mut new: Option<Block> = None;
            for p in preds.get(&b).into_iter().flatten() {
                if !idom.contains_key(p) {
                    continue;
                }
                new = Some(match new {
                    None => *p,
                    Some(n) => intersect(&idom, &order, *p, n),
                });
            }
            let new = new.expect("reachable block has a processed predecessor");
            if idom.get(&b) != Some(&new) {
                idom.insert(b, new);
                changed = true;
            }
        }
    }
    DominatorTree { idom, rpo, order }
}

fn intersect(idom: &HashMap<Block, Block>, order: &HashMap<Block, usize>, mut a: Block, mut b: Block) -> Block {
    while a != b {
        while order[&a] > order[&b] {
            a = idom[&a];
        }
        while order[&b] > order[&a] {
            b = idom[&b];
        }
    }
    a
}

/// Dominator tree of `f`. Every block in the layout must be reachable.
pub fn compute_dominators(f: &Function) -> Result<DominatorTree, DomError> {
    if f.layout.is_empty() {
        return Err(DomError::Empty);
    }
    let reach = f.reachable();
    if let Some(b) = f.layout.iter().find(|b| !reach.contains(b)) {
        return Err(DomError::Unreachable(b.0));
    }
    Ok(dominators_reachable(f))
}

/// Dominator tree over the blocks reachable from entry; others are ignored.
pub fn dominators_reachable(f: &Function) -> DominatorTree {
    let preds = f.preds();
    dominators_of(f.entry(), &|b| f.succs(b), &preds)
}
