//! Bit-vector expressions as hash-consed DAGs.

use std::collections::{BTreeMap, HashMap};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ir::state::field_name;
use crate::ir::{mask, BinOp, CastOp, Function, Op, Pred, Ty, UnOp, Value, ValueDef};

pub type NodeId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    Var(u32),
    Const(u64),
    Un(UnOp, NodeId),
    Bin(BinOp, NodeId, NodeId),
    /// One-bit result.
    Icmp(Pred, NodeId, NodeId),
    Cast(CastOp, NodeId),
    Ite(NodeId, NodeId, NodeId),
}

impl Node {
    pub fn children(&self) -> Vec<NodeId> {
        match *self {
            Node::Var(_) | Node::Const(_) => vec![],
            Node::Un(_, a) | Node::Cast(_, a) => vec![a],
            Node::Bin(_, a, b) | Node::Icmp(_, a, b) => vec![a, b],
            Node::Ite(c, a, b) => vec![c, a, b],
        }
    }
}

/// A bit-vector expression. Nodes are stored children-first, so evaluating
/// them in order is a valid schedule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BvExpr {
    nodes: Vec<(Node, u32)>,
    vars: Vec<(String, u32)>,
    root: NodeId,
}

/// Incremental construction with structural sharing and constant folding.
#[derive(Default)]
pub struct ExprBuilder {
    nodes: Vec<(Node, u32)>,
    index: HashMap<(Node, u32), NodeId>,
    vars: Vec<(String, u32)>,
    var_names: HashMap<String, u32>,
}

/// Division as the bit-vector exchange format defines it: dividing by zero
/// gives all ones (unsigned) and is total.
pub fn eval_bin(op: BinOp, a: u64, b: u64, w: u32) -> u64 {
    let m = mask(w);
    match op {
        BinOp::UDiv => {
            if b & m == 0 {
                m
            } else {
                (a & m) / (b & m)
            }
        }
        BinOp::SDiv => {
            let (na, nb) = ((a >> (w - 1)) & 1 == 1, (b >> (w - 1)) & 1 == 1);
            let neg = |x: u64| x.wrapping_neg() & m;
            let ua = if na { neg(a) } else { a & m };
            let ub = if nb { neg(b) } else { b & m };
            let q = eval_bin(BinOp::UDiv, ua, ub, w);
            if na != nb {
                neg(q)
            } else {
                q
            }
        }
        _ => op.eval(a, b, w).expect("only division is partial"),
    }
}

impl ExprBuilder {
    pub fn new() -> ExprBuilder {
        ExprBuilder::default()
    }

    fn intern(&mut self, n: Node, w: u32) -> NodeId {
        if let Some(&id) = self.index.get(&(n, w)) {
            return id;
        }
        let id = self.nodes.len() as NodeId;
        self.nodes.push((n, w));
        self.index.insert((n, w), id);
        id
    }

    pub fn width(&self, n: NodeId) -> u32 {
        self.nodes[n as usize].1
    }

    fn as_const(&self, n: NodeId) -> Option<u64> {
        match self.nodes[n as usize].0 {
            Node::Const(c) => Some(c),
            _ => None,
        }
    }

    /// A variable; the same name always returns the same node.
    pub fn var(&mut self, name: &str, w: u32) -> NodeId {
        let i = match self.var_names.get(name) {
            Some(&i) => i,
            None => {
                let i = self.vars.len() as u32;
                self.vars.push((name.to_string(), w));
                self.var_names.insert(name.to_string(), i);
                i
            }
        };
        let w = self.vars[i as usize].1;
        self.intern(Node::Var(i), w)
    }

    /// A variable with a name not used before, derived from `stem`.
    pub fn fresh_var(&mut self, stem: &str, w: u32) -> NodeId {
        let mut name = stem.to_string();
        let mut k = 1;
        while self.var_names.contains_key(&name) {
            name = format!("{stem}_{k}");
            k += 1;
        }
        self.var(&name, w)
    }

    pub fn konst(&mut self, v: u64, w: u32) -> NodeId {
        self.intern(Node::Const(v & mask(w)), w)
    }

    pub fn un(&mut self, op: UnOp, a: NodeId) -> NodeId {
        let w = self.width(a);
        if let Some(c) = self.as_const(a) {
            return self.konst(op.eval(c, w), w);
        }
        self.intern(Node::Un(op, a), w)
    }

    pub fn bin(&mut self, op: BinOp, a: NodeId, b: NodeId) -> NodeId {
        let w = self.width(a);
        assert_eq!(w, self.width(b), "operand widths differ");
        if let (Some(x), Some(y)) = (self.as_const(a), self.as_const(b)) {
            return self.konst(eval_bin(op, x, y, w), w);
        }
        self.intern(Node::Bin(op, a, b), w)
    }

    pub fn icmp(&mut self, p: Pred, a: NodeId, b: NodeId) -> NodeId {
        let w = self.width(a);
        assert_eq!(w, self.width(b), "operand widths differ");
        if let (Some(x), Some(y)) = (self.as_const(a), self.as_const(b)) {
            return self.konst(p.eval(x, y, w) as u64, 1);
        }
        self.intern(Node::Icmp(p, a, b), 1)
    }

    pub fn cast(&mut self, op: CastOp, a: NodeId, to: u32) -> NodeId {
        let from = self.width(a);
        if from == to {
            return a;
        }
        if let Some(c) = self.as_const(a) {
            return self.konst(op.eval(c, from, to), to);
        }
        self.intern(Node::Cast(op, a), to)
    }

    pub fn ite(&mut self, c: NodeId, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.width(c), 1, "condition must be one bit");
        if a == b {
            return a;
        }
        if let Some(k) = self.as_const(c) {
            return if k & 1 == 1 { a } else { b };
        }
        let w = self.width(a);
        self.intern(Node::Ite(c, a, b), w)
    }

    /// Finish with `root`, keeping only nodes it reaches.
    pub fn finish(self, root: NodeId) -> BvExpr {
        let raw = BvExpr { nodes: self.nodes, vars: self.vars, root };
        raw.rebuild(false)
    }
}

impl BvExpr {
    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn width(&self) -> u32 {
        self.nodes[self.root as usize].1
    }

    pub fn node(&self, n: NodeId) -> (Node, u32) {
        self.nodes[n as usize]
    }

    pub fn nodes(&self) -> &[(Node, u32)] {
        &self.nodes
    }

    pub fn vars(&self) -> &[(String, u32)] {
        &self.vars
    }

    pub fn var_bits(&self) -> u32 {
        self.vars.iter().map(|v| v.1).sum()
    }

    pub fn as_const(&self) -> Option<u64> {
        match self.nodes[self.root as usize].0 {
            Node::Const(c) => Some(c),
            _ => None,
        }
    }

    /// Evaluate with one value per variable (in `vars()` order).
    pub fn eval(&self, vals: &[u64]) -> u64 {
        let mut scratch = vec![0u64; self.nodes.len()];
        self.eval_into(vals, &mut scratch)
    }

    /// Evaluate reusing a scratch buffer of `nodes().len()` slots.
    pub fn eval_into(&self, vals: &[u64], s: &mut [u64]) -> u64 {
        for (i, &(n, w)) in self.nodes.iter().enumerate() {
            let g = |k: NodeId| s[k as usize];
            s[i] = match n {
                Node::Var(v) => vals[v as usize] & mask(w),
                Node::Const(c) => c,
                Node::Un(op, a) => op.eval(g(a), w),
                Node::Bin(op, a, b) => eval_bin(op, g(a), g(b), w),
                Node::Icmp(p, a, b) => p.eval(g(a), g(b), self.nodes[a as usize].1) as u64,
                Node::Cast(op, a) => op.eval(g(a), self.nodes[a as usize].1, w),
                Node::Ite(c, a, b) => {
                    if g(c) & 1 == 1 {
                        g(a)
                    } else {
                        g(b)
                    }
                }
            };
        }
        s[self.root as usize]
    }

    /// Per-node structural digests, children first. Commutative operands
    /// are combined in sorted order so operand order does not matter.
    fn digests(&self) -> Vec<[u8; 32]> {
        let mut out: Vec<[u8; 32]> = Vec::with_capacity(self.nodes.len());
        for &(n, w) in &self.nodes {
            let mut h = Sha256::new();
            h.update(w.to_le_bytes());
            match n {
                Node::Var(v) => {
                    h.update(b"v");
                    h.update(self.vars[v as usize].0.as_bytes());
                }
                Node::Const(c) => {
                    h.update(b"c");
                    h.update(c.to_le_bytes());
                }
                Node::Un(op, a) => {
                    h.update(format!("u{op:?}"));
                    h.update(out[a as usize]);
                }
                Node::Bin(op, a, b) => {
                    h.update(format!("b{op:?}"));
                    let (x, y) = ordered(&out, a, b, op.commutative());
                    h.update(x);
                    h.update(y);
                }
                Node::Icmp(p, a, b) => {
                    h.update(format!("i{p:?}"));
                    let (x, y) = ordered(&out, a, b, matches!(p, Pred::Eq | Pred::Ne));
                    h.update(x);
                    h.update(y);
                }
                Node::Cast(op, a) => {
                    h.update(format!("k{op:?}"));
                    h.update(out[a as usize]);
                }
                Node::Ite(c, a, b) => {
                    h.update(b"t");
                    h.update(out[c as usize]);
                    h.update(out[a as usize]);
                    h.update(out[b as usize]);
                }
            }
            out.push(h.finalize().into());
        }
        out
    }

    /// Copy reachable nodes into a fresh builder by depth-first post-order.
    /// With `canonical`, commutative operands are ordered by digest and
    /// variables are renumbered by first use.
    fn rebuild(&self, canonical: bool) -> BvExpr {
        let dig = if canonical { self.digests() } else { vec![] };
        let mut b = ExprBuilder::new();
        let mut memo: HashMap<NodeId, NodeId> = HashMap::new();
        let mut stack: Vec<(NodeId, bool)> = vec![(self.root, false)];
        while let Some((n, expanded)) = stack.pop() {
            if memo.contains_key(&n) {
                continue;
            }
            let (node, w) = self.nodes[n as usize];
            let mut kids = node.children();
            let commutes = match node {
                Node::Bin(op, ..) => op.commutative(),
                Node::Icmp(p, ..) => matches!(p, Pred::Eq | Pred::Ne),
                _ => false,
            };
            if canonical && commutes && dig[kids[0] as usize] > dig[kids[1] as usize] {
                kids.swap(0, 1);
            }
            if !expanded {
                stack.push((n, true));
                for &k in kids.iter().rev() {
                    stack.push((k, false));
                }
                continue;
            }
            let m = |k: NodeId| memo[&k];
            let id = match node {
                Node::Var(v) => {
                    let (name, vw) = &self.vars[v as usize];
                    b.var(name, *vw)
                }
                Node::Const(c) => b.konst(c, w),
                Node::Un(op, _) => b.un(op, m(kids[0])),
                Node::Bin(op, ..) => b.bin(op, m(kids[0]), m(kids[1])),
                Node::Icmp(p, ..) => b.icmp(p, m(kids[0]), m(kids[1])),
                Node::Cast(op, _) => b.cast(op, m(kids[0]), w),
                Node::Ite(..) => b.ite(m(kids[0]), m(kids[1]), m(kids[2])),
            };
            memo.insert(n, id);
        }
        let root = memo[&self.root];
        BvExpr { nodes: b.nodes, vars: b.vars, root }
    }

    /// Canonical form: constant folded, commutative operands ordered.
    pub fn normalize(&self) -> BvExpr {
        self.rebuild(true)
    }

    /// Zero-extend the root to `to` bits.
    pub fn zext(&self, to: u32) -> BvExpr {
        let mut e = self.clone();
        if to > self.width() {
            e.nodes.push((Node::Cast(CastOp::Zext, e.root), to));
            e.root = (e.nodes.len() - 1) as NodeId;
        }
        e
    }

    /// The same expression with every width above `bits` narrowed to
    /// `bits` and constants truncated. Not equivalent in general; used to
    /// brute-force check verdicts on a small model.
    pub fn project(&self, bits: u32) -> BvExpr {
        let mut b = ExprBuilder::new();
        let mut ids: Vec<NodeId> = Vec::with_capacity(self.nodes.len());
        let nw = |w: u32| w.min(bits);
        for &(n, w) in &self.nodes {
            let m = |k: NodeId| ids[k as usize];
            let id = match n {
                Node::Var(v) => {
                    let (name, vw) = &self.vars[v as usize];
                    b.var(name, nw(*vw))
                }
                Node::Const(c) => b.konst(c, nw(w)),
                Node::Un(op, a) => b.un(op, m(a)),
                Node::Bin(op, a, c) => {
                    let (x, y) = (m(a), m(c));
                    b.bin(op, x, y)
                }
                Node::Icmp(p, a, c) => b.icmp(p, m(a), m(c)),
                Node::Cast(op, a) => {
                    let x = m(a);
                    let (from, to) = (b.width(x), nw(w));
                    match op {
                        _ if from == to => x,
                        CastOp::Trunc if to > from => x,
                        CastOp::Zext | CastOp::Sext if to < from => b.cast(CastOp::Trunc, x, to),
                        _ => b.cast(op, x, to),
                    }
                }
                Node::Ite(c, x, y) => b.ite(m(c), m(x), m(y)),
            };
            ids.push(id);
        }
        b.finish(ids[self.root as usize])
    }
}

fn ordered(d: &[[u8; 32]], a: NodeId, b: NodeId, commutes: bool) -> ([u8; 32], [u8; 32]) {
    let (x, y) = (d[a as usize], d[b as usize]);
    if commutes && x > y {
        (y, x)
    } else {
        (x, y)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtractError {
    #[error("slice is not straight-line ({0} blocks)")]
    NotStraightLine(usize),
    #[error("slice does not return a value")]
    NoReturnValue,
    #[error("no bit-vector translation for `{0}`")]
    Untranslatable(String),
}

/// Read-only data whose contents may be treated as constants.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConstPool {
    pub bytes: BTreeMap<u64, u8>,
}

impl ConstPool {
    pub fn read(&self, addr: u64, size: u32) -> Option<u64> {
        let mut v = 0u64;
        for i in 0..size as u64 {
            v |= (*self.bytes.get(&addr.wrapping_add(i))? as u64) << (8 * i);
        }
        Some(v)
    }
}

/// Translate the backward slice of `f`'s return value. Unknowns, loads and
/// memory reads outside `pool` become fresh variables.
pub fn extract_candidate(f: &Function, pool: Option<&ConstPool>) -> Result<BvExpr, ExtractError> {
    if f.layout.len() != 1 {
        return Err(ExtractError::NotStraightLine(f.layout.len()));
    }
    let b = f.layout[0];
    let &ret = f.blocks[b.idx()].insts.last().ok_or(ExtractError::NoReturnValue)?;
    if f.op(ret) != Some(&Op::Ret) || f.args(ret).is_empty() {
        return Err(ExtractError::NoReturnValue);
    }
    let mut eb = ExprBuilder::new();
    let mut memo: HashMap<Value, NodeId> = HashMap::new();
    let root = translate(f, f.args(ret)[0], pool, &mut eb, &mut memo)?;
    Ok(eb.finish(root))
}

fn width(f: &Function, v: Value) -> Result<u32, ExtractError> {
    match f.ty(v) {
        Ty::Ptr | Ty::Void => Err(ExtractError::Untranslatable("pointer value".into())),
        t => Ok(t.bits()),
    }
}

fn translate(
    f: &Function,
    root: Value,
    pool: Option<&ConstPool>,
    eb: &mut ExprBuilder,
    memo: &mut HashMap<Value, NodeId>,
) -> Result<NodeId, ExtractError> {
    // Explicit stack: slices of long blocks are deep.
    let mut stack = vec![(root, false)];
    while let Some((v, ready)) = stack.pop() {
        if memo.contains_key(&v) {
            continue;
        }
        let data = f.data(v);
        let w = width(f, v)?;
        let id = match &data.def {
            ValueDef::Const(c) => eb.konst(*c, w),
            ValueDef::Param(i) => eb.var(&format!("arg{i}"), w),
            ValueDef::Inst(inst) => {
                let pure_args = matches!(
                    inst.op,
                    Op::Bin(_) | Op::Un(_) | Op::Icmp(_) | Op::Cast(_) | Op::Select
                ) || matches!(inst.op, Op::MemRead if f.as_const(inst.args[0]).is_none());
                if pure_args && !ready {
                    stack.push((v, true));
                    for &a in inst.args.iter().rev() {
                        if !memo.contains_key(&a) {
                            stack.push((a, false));
                        }
                    }
                    continue;
                }
                let a = |k: usize| memo[&inst.args[k]];
                match &inst.op {
                    Op::Bin(op) => eb.bin(*op, a(0), a(1)),
                    Op::Un(op) => eb.un(*op, a(0)),
                    Op::Icmp(p) => eb.icmp(*p, a(0), a(1)),
                    Op::Cast(op) => eb.cast(*op, a(0), w),
                    Op::Select => eb.ite(a(0), a(1), a(2)),
                    Op::Unknown => eb.fresh_var("u", w),
                    Op::Load => {
                        let stem = match f.op(inst.args[0]) {
                            Some(Op::FieldAddr(i)) => field_name(*i as usize).to_string(),
                            Some(Op::GlobalAddr(g)) => format!("g_{g}"),
                            _ => "load".to_string(),
                        };
                        eb.fresh_var(&stem, w)
                    }
                    Op::MemRead => {
                        let hit = f
                            .as_const(inst.args[0])
                            .and_then(|addr| pool.and_then(|p| p.read(addr, w / 8)));
                        match hit {
                            Some(c) => eb.konst(c, w),
                            None => match f.as_const(inst.args[0]) {
                                Some(addr) => eb.fresh_var(&format!("mem_{addr:x}"), w),
                                None => eb.fresh_var("mem", w),
                            },
                        }
                    }
                    other => return Err(ExtractError::Untranslatable(format!("{other:?}"))),
                }
            }
        };
        memo.insert(v, id);
    }
    Ok(memo[&root])
}
