//! Next-pc slices over chains of lifted blocks, and their proof.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use thiserror::Error;

use crate::ir::state::{field_ty, NUM_FIELDS, RIP};
use crate::ir::{AllocaKind, Cursor, Function, Module, Op, Ty};
use crate::lifter::LiftedBlock;
use crate::machine::Program;
use crate::opt::{inline_calls, run_pipeline, OptConfig, OptContext};
use crate::recover::pool::promote_constant_pool;
use crate::solver::{extract_candidate, prove_unique_cached, ConstPool, SolverBackend, SolverCache, Uniqueness};

pub const SLICE_FN: &str = "slice_rip";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SliceError {
    #[error("empty chain")]
    Empty,
    #[error("{from:#x} is not the unique predecessor of {to:#x}")]
    NotLinked { from: u64, to: u64 },
}

/// Build a function that starts from a state record full of unknowns with
/// rip at the first block, runs the chain in order and returns the last
/// next-pc. The result module also holds the block functions.
///
/// With `edges`, each block must be the only predecessor of the next.
pub fn slice_instruction_pointer(
    chain: &[&LiftedBlock],
    edges: Option<&BTreeSet<(u64, u64)>>,
) -> Result<Module, SliceError> {
    let first = chain.first().ok_or(SliceError::Empty)?;
    if let Some(edges) = edges {
        for w in chain.windows(2) {
            let (from, to) = (w[0].entry, w[1].entry);
            let mut preds = edges.iter().filter(|e| e.1 == to);
            let linked = preds.next() == Some(&(from, to)) && preds.next().is_none();
            if !linked {
                return Err(SliceError::NotLinked { from, to });
            }
        }
    }
    let mut m = Module::new();
    let mut f = Function::new(SLICE_FN, &[], Ty::I64);
    let b = f.add_block();
    f.blocks[b.idx()].addr = Some(first.entry);
    let mut c = Cursor::new(&mut f, b);
    let st = c.ins(Ty::Ptr, Op::Alloca(AllocaKind::State), vec![]);
    for i in 0..NUM_FIELDS {
        let p = c.field_addr(st, i);
        let v = if i == RIP { c.konst(Ty::I64, first.entry) } else { c.unknown(field_ty(i)) };
        c.store(p, v);
    }
    let mut npc = None;
    for lb in chain {
        let pc = c.konst(Ty::I64, lb.entry);
        npc = Some(c.call(Ty::I64, &lb.body.name, vec![st, pc]));
        m.add(lb.body.clone());
    }
    c.ret(npc);
    m.add(f);
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProofSource {
    /// Known without proof (direct jumps).
    Static,
    Optimizer,
    Solver,
    /// Nothing could be proven.
    None,
}

/// Outcome of proving one slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SliceProof {
    Unique(u64, ProofSource),
    Multiple(u64, u64),
    Unknown(String),
}

pub struct Prover<'a> {
    pub program: &'a Program,
    pub opt: OptConfig,
    pub pool_ranges: Vec<(u64, u64)>,
    pub pool: ConstPool,
    pub backend: &'a dyn SolverBackend,
    pub cache: &'a mut SolverCache,
    pub timeout: Option<Duration>,
    pub diagnostics: Vec<String>,
    /// Slices whose next-pc was still symbolic, kept for inspection.
    pub smt_log: Vec<(Vec<u64>, String)>,
}

impl<'a> Prover<'a> {
    pub fn new(
        program: &'a Program,
        opt: OptConfig,
        pool_ranges: Vec<(u64, u64)>,
        backend: &'a dyn SolverBackend,
        cache: &'a mut SolverCache,
        timeout: Option<Duration>,
    ) -> Prover<'a> {
        let mut pool = ConstPool::default();
        for (&a, &b) in &program.data {
            if crate::recover::pool::in_ranges(&pool_ranges, a) {
                pool.bytes.insert(a, b);
            }
        }
        Prover {
            program,
            opt,
            pool_ranges,
            pool,
            backend,
            cache,
            timeout,
            diagnostics: Vec::new(),
            smt_log: Vec::new(),
        }
    }

    /// Inline and optimize a slice module, returning the slice function.
    pub fn optimize_slice(&mut self, m: &Module) -> Function {
        let mut f = m.functions[SLICE_FN].clone();
        let callees: BTreeMap<String, Function> =
            m.functions.iter().filter(|(n, _)| *n != SLICE_FN).map(|(n, f)| (n.clone(), f.clone())).collect();
        inline_calls(&mut f, &callees).expect("block functions do not call each other");
        let mut ctx = OptContext::new(self.opt.clone());
        for _ in 0..4 {
            run_pipeline(&mut f, &mut ctx);
            if !promote_constant_pool(&mut f, self.program, &self.pool_ranges, &mut self.diagnostics) {
                break;
            }
        }
        f
    }

    pub fn prove(&mut self, chain: &[&LiftedBlock]) -> SliceProof {
        let m = match slice_instruction_pointer(chain, None) {
            Ok(m) => m,
            Err(e) => return SliceProof::Unknown(e.to_string()),
        };
        let f = self.optimize_slice(&m);
        if f.layout.len() == 1 {
            let ret = *f.blocks[f.layout[0].idx()].insts.last().unwrap();
            if let Some(c) = f.args(ret).first().and_then(|&v| f.as_const(v)) {
                return SliceProof::Unique(c, ProofSource::Optimizer);
            }
        }
        let expr = match extract_candidate(&f, Some(&self.pool)) {
            Ok(e) => e,
            Err(e) => return SliceProof::Unknown(e.to_string()),
        };
        let addrs: Vec<u64> = chain.iter().map(|b| b.entry).collect();
        self.smt_log.push((addrs, crate::solver::emit_smtlib(&expr, None)));
        match prove_unique_cached(&expr, self.backend, self.timeout, self.cache) {
            Ok(Uniqueness::ProvenOpaque(d)) => SliceProof::Unique(d, ProofSource::Solver),
            Ok(Uniqueness::NotOpaque(a, b)) => SliceProof::Multiple(a, b),
            Ok(Uniqueness::Unknown(r)) => SliceProof::Unknown(r.to_string()),
            Err(e) => SliceProof::Unknown(e.to_string()),
        }
    }
}
