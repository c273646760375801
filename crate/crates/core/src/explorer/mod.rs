//! Control flow recovery: lift reachable blocks, prove where each one can
//! go, and iterate until no new edge appears.
//!
//! Each block that needs a proof is proven once per incoming context. A
//! context is the block preceded by the chain of unique predecessors ending
//! in one of its predecessors, up to the configured length. The block's
//! verdict is the join of its context verdicts and of every earlier verdict,
//! so verdicts only ever weaken. Every new edge re-queues all such blocks;
//! proofs are memoized per chain, so this only costs work for contexts that
//! actually changed.

pub mod build;
pub mod slice;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lifter::{lift_block, LiftError, LiftedBlock};
use crate::machine::{InstructionCategory, Program};
use crate::opt::OptConfig;
use crate::solver::{Portfolio, SolverBackend, SolverCache};

pub use build::{build_cfg_function, BuildError};
pub use slice::{slice_instruction_pointer, ProofSource, Prover, SliceError, SliceProof};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictState {
    ProvenOpaque(u64),
    NotOpaque(BTreeSet<u64>),
    /// The block returns to the caller.
    Exit,
    Unknown,
}

impl VerdictState {
    pub fn targets(&self) -> Vec<u64> {
        match self {
            VerdictState::ProvenOpaque(d) => vec![*d],
            VerdictState::NotOpaque(s) => s.iter().copied().collect(),
            VerdictState::Exit | VerdictState::Unknown => vec![],
        }
    }

    /// Combine two verdicts for the same block; never more precise than
    /// either input.
    pub fn join(&self, other: &VerdictState) -> VerdictState {
        use VerdictState::*;
        match (self, other) {
            (Unknown, _) | (_, Unknown) => Unknown,
            (Exit, Exit) => Exit,
            (Exit, _) | (_, Exit) => Unknown,
            (ProvenOpaque(a), ProvenOpaque(b)) if a == b => ProvenOpaque(*a),
            _ => NotOpaque(self.targets().into_iter().chain(other.targets()).collect()),
        }
    }
}

impl fmt::Display for VerdictState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerdictState::ProvenOpaque(d) => write!(f, "opaque {d:#x}"),
            VerdictState::NotOpaque(s) => {
                let t: Vec<String> = s.iter().map(|a| format!("{a:#x}")).collect();
                write!(f, "not-opaque {}", t.join(","))
            }
            VerdictState::Exit => f.write_str("exit"),
            VerdictState::Unknown => f.write_str("unknown"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub state: VerdictState,
    pub proof_source: ProofSource,
    pub provisional: bool,
}

impl Verdict {
    fn join(&self, other: &Verdict) -> Verdict {
        let state = self.state.join(&other.state);
        let proof_source = if state == self.state && state != other.state {
            self.proof_source
        } else if state == other.state && state != self.state {
            other.proof_source
        } else {
            self.proof_source.max(other.proof_source)
        };
        Verdict { state, proof_source, provisional: true }
    }
}

#[derive(Clone, Debug)]
pub struct ExploreConfig {
    pub solver_bb_count_jcc: u32,
    pub solver_bb_count_return: u32,
    /// Read-only data ranges `[lo, hi)`.
    pub constant_pool: Vec<(u64, u64)>,
    pub max_blocks: usize,
    pub timeout_ms: u64,
    pub opt: OptConfig,
    /// Pop the worklist in a seeded random order instead of FIFO.
    pub order_seed: Option<u64>,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            solver_bb_count_jcc: 1,
            solver_bb_count_return: 1,
            constant_pool: Vec::new(),
            max_blocks: 10_000,
            timeout_ms: 10_000,
            opt: OptConfig::default(),
            order_seed: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExploreError {
    #[error("entry {0:#x} is not code")]
    BadEntry(u64),
    #[error("more than {0} blocks")]
    TooManyBlocks(usize),
    #[error("lifting {addr:#x}: {err}")]
    Lift { addr: u64, err: LiftError },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug)]
pub struct RecoveredCfg {
    pub entry: u64,
    pub blocks: BTreeMap<u64, LiftedBlock>,
    pub edges: BTreeSet<(u64, u64)>,
    pub verdicts: BTreeMap<u64, Verdict>,
    pub diagnostics: Vec<String>,
    /// One line per lift or proof event.
    pub trace: Vec<String>,
    /// SMT-LIB text of each slice that needed the solver, by chain.
    pub smt_queries: Vec<(Vec<u64>, String)>,
}

impl RecoveredCfg {
    pub fn preds(&self) -> BTreeMap<u64, Vec<u64>> {
        let mut p: BTreeMap<u64, Vec<u64>> = self.blocks.keys().map(|&a| (a, vec![])).collect();
        for &(a, b) in &self.edges {
            p.entry(b).or_default().push(a);
        }
        p
    }

    pub fn succs(&self, a: u64) -> Vec<u64> {
        self.edges.range((a, 0)..=(a, u64::MAX)).map(|e| e.1).collect()
    }

    pub fn reachable(&self) -> BTreeSet<u64> {
        let mut seen = BTreeSet::new();
        let mut work = vec![self.entry];
        while let Some(a) = work.pop() {
            if self.blocks.contains_key(&a) && seen.insert(a) {
                work.extend(self.succs(a));
            }
        }
        seen
    }

    /// Number of reachable blocks once every edge from a single-successor
    /// block into a single-predecessor block is contracted.
    pub fn merged_block_count(&self) -> usize {
        merged_block_count(self.entry, &self.reachable(), &self.edges)
    }

    /// Opaque predicates found by proof, not by static targets.
    pub fn proven_opaque(&self) -> Vec<u64> {
        self.verdicts
            .iter()
            .filter(|(_, v)| {
                matches!(v.state, VerdictState::ProvenOpaque(_))
                    && matches!(v.proof_source, ProofSource::Optimizer | ProofSource::Solver)
            })
            .map(|(&a, _)| a)
            .collect()
    }

    pub fn unknown_blocks(&self) -> Vec<u64> {
        let r = self.reachable();
        self.verdicts
            .iter()
            .filter(|(a, v)| r.contains(a) && v.state == VerdictState::Unknown)
            .map(|(&a, _)| a)
            .collect()
    }

    pub fn raw_instruction_count(&self) -> usize {
        self.reachable().iter().map(|a| self.blocks[a].body.inst_count()).sum()
    }

    /// Graphviz rendering of the reachable graph, verdicts as labels.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph cfg {\n  node [shape=box];\n");
        for a in self.reachable() {
            let v = self.verdicts.get(&a).map(|v| v.state.to_string()).unwrap_or_default();
            let style = match self.verdicts.get(&a).map(|v| &v.state) {
                Some(VerdictState::Unknown) => ", color=red",
                Some(VerdictState::ProvenOpaque(_)) if self.proven_opaque().contains(&a) => ", color=blue",
                _ => "",
            };
            out += &format!("  \"{a:#x}\" [label=\"{a:#x}\\n{v}\"{style}];\n");
        }
        for (a, b) in &self.edges {
            out += &format!("  \"{a:#x}\" -> \"{b:#x}\";\n");
        }
        out.push_str("}\n");
        out
    }
}

/// Block count of a graph after contracting straight-line edges.
pub fn merged_block_count(entry: u64, nodes: &BTreeSet<u64>, edges: &BTreeSet<(u64, u64)>) -> usize {
    let mut outd: HashMap<u64, usize> = HashMap::new();
    let mut ind: HashMap<u64, usize> = HashMap::new();
    for &(a, b) in edges {
        if nodes.contains(&a) && nodes.contains(&b) {
            *outd.entry(a).or_default() += 1;
            *ind.entry(b).or_default() += 1;
        }
    }
    let absorbed = edges
        .iter()
        .filter(|&&(a, b)| {
            nodes.contains(&a) && nodes.contains(&b) && a != b && b != entry && outd[&a] == 1 && ind[&b] == 1
        })
        .count();
    nodes.len() - absorbed
}

/// Explore with the standard solver portfolio and a private cache.
pub fn explore(program: &Program, entry: u64, cfg: &ExploreConfig) -> Result<RecoveredCfg, ExploreError> {
    let backend = Portfolio::standard();
    let mut cache = SolverCache::in_memory();
    explore_with(program, entry, cfg, &backend, &mut cache)
}

struct Explorer<'a> {
    program: &'a Program,
    cfg: &'a ExploreConfig,
    prover: Prover<'a>,
    blocks: BTreeMap<u64, LiftedBlock>,
    edges: BTreeSet<(u64, u64)>,
    verdicts: BTreeMap<u64, Verdict>,
    memo: HashMap<Vec<u64>, SliceProof>,
    work: VecDeque<u64>,
    queued: BTreeSet<u64>,
    rng: Option<ChaCha8Rng>,
    trace: Vec<String>,
    diagnostics: Vec<String>,
    entry: u64,
}

pub fn explore_with(
    program: &Program,
    entry: u64,
    cfg: &ExploreConfig,
    backend: &dyn SolverBackend,
    cache: &mut SolverCache,
) -> Result<RecoveredCfg, ExploreError> {
    if cfg.solver_bb_count_jcc == 0 || cfg.solver_bb_count_return == 0 {
        return Err(ExploreError::Config("solver block counts must be at least 1".into()));
    }
    if !program.is_code(entry) {
        return Err(ExploreError::BadEntry(entry));
    }
    let timeout = Some(Duration::from_millis(cfg.timeout_ms));
    let prover = Prover::new(program, cfg.opt.clone(), cfg.constant_pool.clone(), backend, cache, timeout);
    let mut ex = Explorer {
        program,
        cfg,
        prover,
        blocks: BTreeMap::new(),
        edges: BTreeSet::new(),
        verdicts: BTreeMap::new(),
        memo: HashMap::new(),
        work: VecDeque::new(),
        queued: BTreeSet::new(),
        rng: cfg.order_seed.map(ChaCha8Rng::seed_from_u64),
        trace: Vec::new(),
        diagnostics: Vec::new(),
        entry,
    };
    ex.lift(entry)?;
    ex.push(entry);
    while let Some(a) = ex.pop() {
        ex.visit(a)?;
    }
    for v in ex.verdicts.values_mut() {
        v.provisional = false;
    }
    let mut diagnostics = ex.diagnostics;
    diagnostics.append(&mut ex.prover.diagnostics);
    let smt_queries = std::mem::take(&mut ex.prover.smt_log);
    Ok(RecoveredCfg {
        entry,
        blocks: ex.blocks,
        edges: ex.edges,
        verdicts: ex.verdicts,
        diagnostics,
        trace: ex.trace,
        smt_queries,
    })
}

impl Explorer<'_> {
    fn push(&mut self, a: u64) {
        if self.queued.insert(a) {
            self.work.push_back(a);
        }
    }

    fn pop(&mut self) -> Option<u64> {
        let i = match &mut self.rng {
            Some(r) if !self.work.is_empty() => r.gen_range(0..self.work.len()),
            _ => 0,
        };
        let a = self.work.remove(i)?;
        self.queued.remove(&a);
        Some(a)
    }

    fn lift(&mut self, a: u64) -> Result<(), ExploreError> {
        if self.blocks.contains_key(&a) {
            return Ok(());
        }
        if self.blocks.len() >= self.cfg.max_blocks {
            return Err(ExploreError::TooManyBlocks(self.cfg.max_blocks));
        }
        let lb = lift_block(self.program, a).map_err(|err| ExploreError::Lift { addr: a, err })?;
        self.trace.push(format!(
            "lift {a:#x} instrs={} end={:?}",
            lb.instrs.len(),
            lb.terminator_category
        ));
        self.blocks.insert(a, lb);
        Ok(())
    }

    fn chain_len(&self, cat: InstructionCategory) -> u32 {
        match cat {
            InstructionCategory::FunctionReturn => self.cfg.solver_bb_count_return,
            _ => self.cfg.solver_bb_count_jcc,
        }
    }

    /// Chains ending in `a`, one per incoming context.
    fn contexts(&self, a: u64, len: u32) -> Vec<Vec<u64>> {
        if len <= 1 {
            return vec![vec![a]];
        }
        let preds = self.preds_of(a);
        let mut out = Vec::new();
        if a == self.entry || preds.is_empty() {
            out.push(vec![a]);
        }
        for p in preds {
            let mut chain = vec![a, p];
            let mut head = p;
            while chain.len() < len as usize && head != self.entry {
                let hp = self.preds_of(head);
                let [only] = hp.as_slice() else { break };
                if chain.contains(only) {
                    break;
                }
                chain.push(*only);
                head = *only;
            }
            chain.reverse();
            out.push(chain);
        }
        out
    }

    fn preds_of(&self, a: u64) -> Vec<u64> {
        self.edges.iter().filter(|e| e.1 == a).map(|e| e.0).collect()
    }

    fn prove_chain(&mut self, chain: &[u64]) -> SliceProof {
        if let Some(p) = self.memo.get(chain) {
            return p.clone();
        }
        let blocks: Vec<&LiftedBlock> = chain.iter().map(|a| &self.blocks[a]).collect();
        let p = self.prover.prove(&blocks);
        let names: Vec<String> = chain.iter().map(|a| format!("{a:#x}")).collect();
        self.trace.push(format!("prove [{}] -> {}", names.join(" "), describe(&p)));
        self.memo.insert(chain.to_vec(), p.clone());
        p
    }

    fn context_verdict(&mut self, lb_cat: InstructionCategory, statics: &[u64], a: u64, p: SliceProof) -> Verdict {
        let v = |state, proof_source| Verdict { state, proof_source, provisional: true };
        let both = || VerdictState::NotOpaque(statics.iter().copied().collect());
        match lb_cat {
            InstructionCategory::ConditionalBranch => match p {
                SliceProof::Unique(d, src) if statics.contains(&d) => v(VerdictState::ProvenOpaque(d), src),
                SliceProof::Unique(d, _) => {
                    self.diagnostics.push(format!("warning: {a:#x}: proven destination {d:#x} is not a branch target"));
                    v(both(), ProofSource::None)
                }
                SliceProof::Multiple(..) => v(both(), ProofSource::Solver),
                SliceProof::Unknown(why) => {
                    self.diagnostics
                        .push(format!("warning: {a:#x}: branch not proven ({why}); keeping both targets"));
                    v(both(), ProofSource::None)
                }
            },
            InstructionCategory::FunctionReturn => match p {
                SliceProof::Unique(d, src) if self.program.is_code(d) => v(VerdictState::ProvenOpaque(d), src),
                _ => v(VerdictState::Exit, ProofSource::None),
            },
            InstructionCategory::IndirectJump => match p {
                SliceProof::Unique(d, src) if self.program.is_code(d) => v(VerdictState::ProvenOpaque(d), src),
                other => {
                    self.diagnostics
                        .push(format!("warning: {a:#x}: indirect jump unresolved ({}); path stops", describe(&other)));
                    v(VerdictState::Unknown, ProofSource::None)
                }
            },
            _ => {
                self.diagnostics.push(format!("warning: {a:#x}: indirect call; continuation not explored"));
                v(VerdictState::Unknown, ProofSource::None)
            }
        }
    }

    fn visit(&mut self, a: u64) -> Result<(), ExploreError> {
        let lb = &self.blocks[&a];
        let cat = lb.terminator_category;
        let statics = lb.static_successors.clone();
        let new = if cat.needs_proof() {
            let mut acc: Option<Verdict> = None;
            for chain in self.contexts(a, self.chain_len(cat)) {
                let p = self.prove_chain(&chain);
                let v = self.context_verdict(cat, &statics, a, p);
                acc = Some(match acc {
                    Some(x) => x.join(&v),
                    None => v,
                });
            }
            acc.expect("at least one context")
        } else {
            let state = match statics.as_slice() {
                [t] => VerdictState::ProvenOpaque(*t),
                _ => VerdictState::Exit,
            };
            Verdict { state, proof_source: ProofSource::Static, provisional: true }
        };
        let merged = match self.verdicts.get(&a) {
            Some(old) => old.join(&new),
            None => new,
        };
        if self.verdicts.get(&a) != Some(&merged) {
            self.trace.push(format!("verdict {a:#x} {} ({:?})", merged.state, merged.proof_source));
        }
        let targets = merged.state.targets();
        self.verdicts.insert(a, merged);
        let mut grew = false;
        for t in targets {
            if self.edges.insert((a, t)) {
                self.trace.push(format!("edge {a:#x} -> {t:#x}"));
                self.lift(t)?;
                self.push(t);
                grew = true;
            }
        }
        if grew {
            let again: Vec<u64> = self
                .blocks
                .iter()
                .filter(|(_, b)| b.terminator_category.needs_proof())
                .map(|(&x, _)| x)
                .filter(|x| self.verdicts.contains_key(x))
                .collect();
            for x in again {
                self.push(x);
            }
        }
        Ok(())
    }
}

fn describe(p: &SliceProof) -> String {
    match p {
        SliceProof::Unique(d, s) => format!("unique {d:#x} by {s:?}"),
        SliceProof::Multiple(x, y) => format!("multiple {x:#x},{y:#x}"),
        SliceProof::Unknown(w) => format!("unknown: {w}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::assemble;
    use crate::solver::BuiltinBackend;

    fn run(src: &str, cfg: &ExploreConfig) -> RecoveredCfg {
        let p = assemble(src).unwrap();
        let mut cache = SolverCache::in_memory();
        explore_with(&p, p.entry, cfg, &BuiltinBackend::default(), &mut cache).unwrap()
    }

    #[test]
    fn join_follows_the_table() {
        use VerdictState::*;
        let op = |d| ProvenOpaque(d);
        let no = |v: &[u64]| NotOpaque(v.iter().copied().collect());
        assert_eq!(op(1).join(&op(1)), op(1));
        assert_eq!(op(1).join(&op(2)), no(&[1, 2]));
        assert_eq!(op(1).join(&no(&[1, 2])), no(&[1, 2]));
        assert_eq!(no(&[1, 2]).join(&op(1)), no(&[1, 2]));
        assert_eq!(Exit.join(&Exit), Exit);
        assert_eq!(Unknown.join(&op(1)), Unknown);
    }

    #[test]
    fn straight_line_function() {
        let c = run("mov rax, rcx\nret", &ExploreConfig::default());
        assert_eq!(c.blocks.len(), 1);
        assert_eq!(c.verdicts[&0x1000].state, VerdictState::Exit);
        assert!(c.edges.is_empty());
        assert!(c.verdicts.values().all(|v| !v.provisional));
    }

    #[test]
    fn xor_jz_is_opaque_and_dead_side_is_never_lifted() {
        let c = run("xor rax, rax\njz live\ndead:\nmov rax, 9\nret\nlive:\nmov rax, rcx\nret", &ExploreConfig::default());
        assert_eq!(c.verdicts[&0x1000].state, VerdictState::ProvenOpaque(0x1010));
        assert_eq!(c.verdicts[&0x1000].proof_source, ProofSource::Optimizer);
        assert!(!c.blocks.contains_key(&0x1008));
        assert_eq!(c.proven_opaque(), vec![0x1000]);
    }

    #[test]
    fn real_branch_keeps_both_targets() {
        let c = run("cmp rdi, 5\njl a\nmov rax, 1\nret\na:\nmov rax, 2\nret", &ExploreConfig::default());
        assert_eq!(c.verdicts[&0x1000].state, VerdictState::NotOpaque([0x1008, 0x1010].into()));
        assert_eq!(c.blocks.len(), 3);
        assert_eq!(c.merged_block_count(), 3);
    }

    #[test]
    fn push_ret_becomes_an_edge() {
        let c = run("push target\nret\nmov rax, 3\nret\ntarget:\nmov rax, 4\nret", &ExploreConfig::default());
        assert_eq!(c.verdicts[&0x1000].state, VerdictState::ProvenOpaque(0x1010));
        assert_eq!(c.verdicts[&0x1010].state, VerdictState::Exit);
        assert_eq!(c.merged_block_count(), 1);
    }

    const CROSS: &str = "mov rax, 7\njmp next\nnext:\ncmp rax, 7\njne dead\nmov rax, rcx\nret\ndead:\nmov rax, 0\nret";

    #[test]
    fn cross_block_predicate_needs_a_longer_chain() {
        let one = run(CROSS, &ExploreConfig::default());
        assert!(matches!(one.verdicts[&0x1008].state, VerdictState::NotOpaque(_)));
        let two = run(CROSS, &ExploreConfig { solver_bb_count_jcc: 2, ..Default::default() });
        assert_eq!(two.verdicts[&0x1008].state, VerdictState::ProvenOpaque(0x1010));
        assert!(!two.blocks.contains_key(&0x1018));
    }

    #[test]
    fn second_predecessor_weakens_a_proof() {
        // `join` is reached from two blocks that set rax differently.
        let src = "cmp rcx, 0\nje other\nmov rax, 7\njmp join\nother:\nmov rax, 8\njmp join\njoin:\ncmp rax, 7\nje t\nmov rax, 1\nret\nt:\nmov rax, 2\nret";
        let c = run(src, &ExploreConfig { solver_bb_count_jcc: 2, ..Default::default() });
        let join = 0x1018;
        assert!(matches!(c.verdicts[&join].state, VerdictState::NotOpaque(_)), "{:?}", c.verdicts[&join]);
        for seed in 0..5 {
            let d = run(src, &ExploreConfig { solver_bb_count_jcc: 2, order_seed: Some(seed), ..Default::default() });
            assert_eq!(d.edges, c.edges);
            assert_eq!(d.verdicts, c.verdicts);
        }
    }

    #[test]
    fn bad_config_and_entry() {
        let p = assemble("ret").unwrap();
        let mut cache = SolverCache::in_memory();
        let be = BuiltinBackend::default();
        let cfg = ExploreConfig { solver_bb_count_jcc: 0, ..Default::default() };
        assert!(matches!(explore_with(&p, p.entry, &cfg, &be, &mut cache), Err(ExploreError::Config(_))));
        assert_eq!(
            explore_with(&p, 0x9000, &ExploreConfig::default(), &be, &mut cache).unwrap_err(),
            ExploreError::BadEntry(0x9000)
        );
    }
}
