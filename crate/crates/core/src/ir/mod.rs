//! SSA intermediate representation.
//!
//! Values live in a per-function arena. Instructions are values; constants
//! and parameters are values that belong to no block. Blocks are kept in a
//! layout vector whose first element is the entry.

pub mod dom;
pub mod dot;
pub mod state;
pub mod text;
pub mod verify;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

pub use dom::{compute_dominators, DomError, DominatorTree};
pub use state::{field_index, field_name, field_ty, NUM_FIELDS};
pub use text::{parse_module, print_function, print_module, ParseError};
pub use verify::{verify, verify_module, Violation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ty {
    I1,
    I8,
    I16,
    I32,
    I64,
    Ptr,
    Void,
}

impl Ty {
    pub fn int(bits: u32) -> Ty {
        match bits {
            1 => Ty::I1,
            8 => Ty::I8,
            16 => Ty::I16,
            32 => Ty::I32,
            64 => Ty::I64,
            _ => panic!("unsupported integer width {bits}"),
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Ty::I1 => 1,
            Ty::I8 => 8,
            Ty::I16 => 16,
            Ty::I32 => 32,
            Ty::I64 | Ty::Ptr => 64,
            Ty::Void => 0,
        }
    }

    pub fn is_int(self) -> bool {
        !matches!(self, Ty::Ptr | Ty::Void)
    }

    pub fn mask(self) -> u64 {
        mask(self.bits())
    }

    pub fn name(self) -> &'static str {
        match self {
            Ty::I1 => "i1",
            Ty::I8 => "i8",
            Ty::I16 => "i16",
            Ty::I32 => "i32",
            Ty::I64 => "i64",
            Ty::Ptr => "ptr",
            Ty::Void => "void",
        }
    }

    pub fn parse(s: &str) -> Option<Ty> {
        Some(match s {
            "i1" => Ty::I1,
            "i8" => Ty::I8,
            "i16" => Ty::I16,
            "i32" => Ty::I32,
            "i64" => Ty::I64,
            "ptr" => Ty::Ptr,
            "void" => Ty::Void,
            _ => return None,
        })
    }
}

impl fmt::Display for Ty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// Sign-extend the low `bits` of `v` to 64 bits.
pub fn sext(v: u64, bits: u32) -> u64 {
    if bits == 0 || bits >= 64 {
        return v;
    }
    let sh = 64 - bits;
    (((v << sh) as i64) >> sh) as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Value(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Block(pub u32);

impl Value {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl Block {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    UDiv,
    SDiv,
    And,
    Or,
    Xor,
    Shl,
    LShr,
    AShr,
}

impl BinOp {
    pub const ALL: [BinOp; 11] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::UDiv,
        BinOp::SDiv,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::LShr,
        BinOp::AShr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::UDiv => "udiv",
            BinOp::SDiv => "sdiv",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::LShr => "lshr",
            BinOp::AShr => "ashr",
        }
    }

    pub fn commutative(self) -> bool {
        matches!(self, BinOp::Add | BinOp::Mul | BinOp::And | BinOp::Or | BinOp::Xor)
    }

    /// Evaluate at `bits` width. Division by zero yields `None`.
    pub fn eval(self, a: u64, b: u64, bits: u32) -> Option<u64> {
        let m = mask(bits);
        let (a, b) = (a & m, b & m);
        let r = match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::UDiv => a.checked_div(b)?,
            BinOp::SDiv => {
                if b == 0 {
                    return None;
                }
                let (sa, sb) = (sext(a, bits) as i64, sext(b, bits) as i64);
                sa.wrapping_div(sb) as u64
            }
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => {
                if b >= bits as u64 {
                    0
                } else {
                    a << b
                }
            }
            BinOp::LShr => {
                if b >= bits as u64 {
                    0
                } else {
                    a >> b
                }
            }
            BinOp::AShr => {
                let sa = sext(a, bits) as i64;
                (sa >> b.min(63)) as u64
            }
        };
        Some(r & m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnOp {
    Not,
    Neg,
}

impl UnOp {
    pub fn eval(self, a: u64, bits: u32) -> u64 {
        match self {
            UnOp::Not => !a & mask(bits),
            UnOp::Neg => a.wrapping_neg() & mask(bits),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pred {
    Eq,
    Ne,
    Ult,
    Ule,
    Slt,
    Sle,
    Ugt,
    Uge,
    Sgt,
    Sge,
}

impl Pred {
    pub const ALL: [Pred; 10] = [
        Pred::Eq,
        Pred::Ne,
        Pred::Ult,
        Pred::Ule,
        Pred::Slt,
        Pred::Sle,
        Pred::Ugt,
        Pred::Uge,
        Pred::Sgt,
        Pred::Sge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pred::Eq => "eq",
            Pred::Ne => "ne",
            Pred::Ult => "ult",
            Pred::Ule => "ule",
            Pred::Slt => "slt",
            Pred::Sle => "sle",
            Pred::Ugt => "ugt",
            Pred::Uge => "uge",
            Pred::Sgt => "sgt",
            Pred::Sge => "sge",
        }
    }

    pub fn eval(self, a: u64, b: u64, bits: u32) -> bool {
        let m = mask(bits);
        let (a, b) = (a & m, b & m);
        let (sa, sb) = (sext(a, bits) as i64, sext(b, bits) as i64);
        match self {
            Pred::Eq => a == b,
            Pred::Ne => a != b,
            Pred::Ult => a < b,
            Pred::Ule => a <= b,
            Pred::Ugt => a > b,
            Pred::Uge => a >= b,
            Pred::Slt => sa < sb,
            Pred::Sle => sa <= sb,
            Pred::Sgt => sa > sb,
            Pred::Sge => sa >= sb,
        }
    }

    pub fn inverse(self) -> Pred {
        match self {
            Pred::Eq => Pred::Ne,
            Pred::Ne => Pred::Eq,
            Pred::Ult => Pred::Uge,
            Pred::Ule => Pred::Ugt,
            Pred::Ugt => Pred::Ule,
            Pred::Uge => Pred::Ult,
            Pred::Slt => Pred::Sge,
            Pred::Sle => Pred::Sgt,
            Pred::Sgt => Pred::Sle,
            Pred::Sge => Pred::Slt,
        }
    }

    /// Predicate with operands swapped.
    pub fn swapped(self) -> Pred {
        match self {
            Pred::Eq | Pred::Ne => self,
            Pred::Ult => Pred::Ugt,
            Pred::Ule => Pred::Uge,
            Pred::Ugt => Pred::Ult,
            Pred::Uge => Pred::Ule,
            Pred::Slt => Pred::Sgt,
            Pred::Sle => Pred::Sge,
            Pred::Sgt => Pred::Slt,
            Pred::Sge => Pred::Sle,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CastOp {
    Zext,
    Sext,
    Trunc,
}

impl CastOp {
    pub fn name(self) -> &'static str {
        match self {
            CastOp::Zext => "zext",
            CastOp::Sext => "sext",
            CastOp::Trunc => "trunc",
        }
    }

    pub fn eval(self, v: u64, from: u32, to: u32) -> u64 {
        match self {
            CastOp::Zext => v & mask(from),
            CastOp::Sext => sext(v & mask(from), from) & mask(to),
            CastOp::Trunc => v & mask(to),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AllocaKind {
    Scalar(Ty),
    /// A whole machine-state record.
    State,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Unknown,
    Bin(BinOp),
    Un(UnOp),
    Icmp(Pred),
    Select,
    Cast(CastOp),
    /// Incoming blocks, parallel to the argument list.
    Phi(Vec<Block>),
    FieldAddr(u16),
    Load,
    Store,
    Alloca(AllocaKind),
    GlobalAddr(String),
    MemRead,
    MemWrite,
    Call(String),
    Br(Block),
    CondBr(Block, Block),
    Ret,
}

impl Op {
    pub fn is_terminator(&self) -> bool {
        matches!(self, Op::Br(_) | Op::CondBr(..) | Op::Ret)
    }

    /// Free of side effects and safe to delete when unused.
    pub fn is_pure(&self) -> bool {
        !matches!(
            self,
            Op::Store | Op::MemWrite | Op::Call(_) | Op::Br(_) | Op::CondBr(..) | Op::Ret
        )
    }

    pub fn successors(&self) -> Vec<Block> {
        match self {
            Op::Br(b) => vec![*b],
            Op::CondBr(t, e) => vec![*t, *e],
            _ => vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inst {
    pub op: Op,
    pub args: Vec<Value>,
    pub block: Option<Block>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ValueDef {
    Param(u32),
    Const(u64),
    Inst(Inst),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValueData {
    pub ty: Ty,
    pub def: ValueDef,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BlockData {
    pub insts: Vec<Value>,
    /// Machine address this block was lifted from, if any.
    pub addr: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub params: Vec<Value>,
    pub ret_ty: Ty,
    pub values: Vec<ValueData>,
    pub blocks: Vec<BlockData>,
    pub layout: Vec<Block>,
    consts: HashMap<(Ty, u64), Value>,
}

impl Function {
    pub fn new(name: impl Into<String>, params: &[Ty], ret_ty: Ty) -> Function {
        let mut f = Function {
            name: name.into(),
            params: Vec::new(),
            ret_ty,
            values: Vec::new(),
            blocks: Vec::new(),
            layout: Vec::new(),
            consts: HashMap::new(),
        };
        for (i, &ty) in params.iter().enumerate() {
            let v = f.push_value(ValueData { ty, def: ValueDef::Param(i as u32) });
            f.params.push(v);
        }
        f
    }

    fn push_value(&mut self, d: ValueData) -> Value {
        self.values.push(d);
        Value(self.values.len() as u32 - 1)
    }

    pub fn param_tys(&self) -> Vec<Ty> {
        self.params.iter().map(|&p| self.ty(p)).collect()
    }

    pub fn entry(&self) -> Block {
        self.layout[0]
    }

    pub fn add_block(&mut self) -> Block {
        self.blocks.push(BlockData::default());
        let b = Block(self.blocks.len() as u32 - 1);
        self.layout.push(b);
        b
    }

    pub fn ty(&self, v: Value) -> Ty {
        self.values[v.idx()].ty
    }

    pub fn data(&self, v: Value) -> &ValueData {
        &self.values[v.idx()]
    }

    pub fn inst(&self, v: Value) -> Option<&Inst> {
        match &self.values[v.idx()].def {
            ValueDef::Inst(i) => Some(i),
            _ => None,
        }
    }

    pub fn inst_mut(&mut self, v: Value) -> Option<&mut Inst> {
        match &mut self.values[v.idx()].def {
            ValueDef::Inst(i) => Some(i),
            _ => None,
        }
    }

    pub fn op(&self, v: Value) -> Option<&Op> {
        self.inst(v).map(|i| &i.op)
    }

    pub fn args(&self, v: Value) -> &[Value] {
        self.inst(v).map(|i| i.args.as_slice()).unwrap_or(&[])
    }

    pub fn as_const(&self, v: Value) -> Option<u64> {
        match self.values[v.idx()].def {
            ValueDef::Const(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_param(&self, v: Value) -> bool {
        matches!(self.values[v.idx()].def, ValueDef::Param(_))
    }

    /// Interned integer constant (masked to the type width).
    pub fn konst(&mut self, ty: Ty, val: u64) -> Value {
        let val = val & ty.mask();
        if let Some(&v) = self.consts.get(&(ty, val)) {
            return v;
        }
        let v = self.push_value(ValueData { ty, def: ValueDef::Const(val) });
        self.consts.insert((ty, val), v);
        v
    }

    /// Create an instruction not yet placed in any block.
    pub fn create(&mut self, ty: Ty, op: Op, args: Vec<Value>) -> Value {
        self.push_value(ValueData { ty, def: ValueDef::Inst(Inst { op, args, block: None }) })
    }

    pub fn append(&mut self, b: Block, ty: Ty, op: Op, args: Vec<Value>) -> Value {
        let v = self.create(ty, op, args);
        self.place(b, self.blocks[b.idx()].insts.len(), v);
        v
    }

    /// Place a detached instruction at position `pos` of block `b`.
    pub fn place(&mut self, b: Block, pos: usize, v: Value) {
        self.inst_mut(v).expect("placing a non-instruction").block = Some(b);
        self.blocks[b.idx()].insts.insert(pos, v);
    }

    /// Insert before the terminator of `b` (or at the end if none).
    pub fn insert_before_term(&mut self, b: Block, ty: Ty, op: Op, args: Vec<Value>) -> Value {
        let pos = match self.terminator(b) {
            Some(_) => self.blocks[b.idx()].insts.len() - 1,
            None => self.blocks[b.idx()].insts.len(),
        };
        let v = self.create(ty, op, args);
        self.place(b, pos, v);
        v
    }

    pub fn block_of(&self, v: Value) -> Option<Block> {
        self.inst(v).and_then(|i| i.block)
    }

    pub fn terminator(&self, b: Block) -> Option<Value> {
        let &last = self.blocks[b.idx()].insts.last()?;
        self.op(last).filter(|o| o.is_terminator()).map(|_| last)
    }

    pub fn succs(&self, b: Block) -> Vec<Block> {
        self.terminator(b).map(|t| self.op(t).unwrap().successors()).unwrap_or_default()
    }

    /// Predecessor lists in layout order, duplicates removed.
    pub fn preds(&self) -> HashMap<Block, Vec<Block>> {
        let mut p: HashMap<Block, Vec<Block>> = self.layout.iter().map(|&b| (b, vec![])).collect();
        for &b in &self.layout {
            let mut s = self.succs(b);
            s.dedup();
            for t in s {
                let e = p.entry(t).or_default();
                if !e.contains(&b) {
                    e.push(b);
                }
            }
        }
        p
    }

    /// Every placed instruction in layout order.
    pub fn insts(&self) -> Vec<Value> {
        self.layout.iter().flat_map(|b| self.blocks[b.idx()].insts.iter().copied()).collect()
    }

    pub fn inst_count(&self) -> usize {
        self.layout.iter().map(|b| self.blocks[b.idx()].insts.len()).sum()
    }

    /// Detach an instruction from its block. Uses are left untouched.
    pub fn remove(&mut self, v: Value) {
        if let Some(b) = self.block_of(v) {
            self.blocks[b.idx()].insts.retain(|&x| x != v);
            self.inst_mut(v).unwrap().block = None;
        }
    }

    /// Detach every instruction in `dead`.
    pub fn remove_all(&mut self, dead: &HashSet<Value>) {
        if dead.is_empty() {
            return;
        }
        for &b in &self.layout.clone() {
            self.blocks[b.idx()].insts.retain(|v| !dead.contains(v));
        }
        for &v in dead {
            if let Some(i) = self.inst_mut(v) {
                i.block = None;
            }
        }
    }

    /// Rewrite operands through `map` (following chains) in every placed
    /// instruction.
    pub fn replace_uses(&mut self, map: &HashMap<Value, Value>) {
        if map.is_empty() {
            return;
        }
        let resolve = |mut v: Value| {
            let mut n = 0;
            while let Some(&w) = map.get(&v) {
                if w == v || n > 1_000_000 {
                    break;
                }
                v = w;
                n += 1;
            }
            v
        };
        for v in self.insts() {
            let inst = self.inst_mut(v).unwrap();
            for a in inst.args.iter_mut() {
                *a = resolve(*a);
            }
        }
    }

    pub fn replace_all_uses(&mut self, old: Value, new: Value) {
        let mut m = HashMap::new();
        m.insert(old, new);
        self.replace_uses(&m);
    }

    /// Use counts over placed instructions.
    pub fn use_counts(&self) -> HashMap<Value, usize> {
        let mut c = HashMap::new();
        for v in self.insts() {
            for &a in self.args(v) {
                *c.entry(a).or_insert(0) += 1;
            }
        }
        c
    }

    /// Users of each value over placed instructions.
    pub fn users(&self) -> HashMap<Value, Vec<Value>> {
        let mut u: HashMap<Value, Vec<Value>> = HashMap::new();
        for v in self.insts() {
            for &a in self.args(v) {
                let e = u.entry(a).or_default();
                if e.last() != Some(&v) {
                    e.push(v);
                }
            }
        }
        u
    }

    /// Rewrite successor references of `b`'s terminator from `old` to `new`.
    pub fn retarget(&mut self, b: Block, old: Block, new: Block) {
        if let Some(t) = self.terminator(b) {
            let inst = self.inst_mut(t).unwrap();
            match &mut inst.op {
                Op::Br(x) if *x == old => *x = new,
                Op::CondBr(x, y) => {
                    if *x == old {
                        *x = new;
                    }
                    if *y == old {
                        *y = new;
                    }
                }
                _ => {}
            }
        }
    }

    /// Phi instructions at the top of `b`.
    pub fn phis(&self, b: Block) -> Vec<Value> {
        self.blocks[b.idx()]
            .insts
            .iter()
            .copied()
            .take_while(|&v| matches!(self.op(v), Some(Op::Phi(_))))
            .collect()
    }

    /// Drop blocks not in `keep` from the layout, detaching their instructions.
    pub fn retain_blocks(&mut self, keep: &HashSet<Block>) {
        let dropped: Vec<Block> = self.layout.iter().copied().filter(|b| !keep.contains(b)).collect();
        for b in dropped {
            let insts = std::mem::take(&mut self.blocks[b.idx()].insts);
            for v in insts {
                self.inst_mut(v).unwrap().block = None;
            }
        }
        self.layout.retain(|b| keep.contains(b));
    }

    /// Blocks reachable from entry.
    pub fn reachable(&self) -> HashSet<Block> {
        let mut seen = HashSet::new();
        if self.layout.is_empty() {
            return seen;
        }
        let mut stack = vec![self.entry()];
        while let Some(b) = stack.pop() {
            if seen.insert(b) {
                stack.extend(self.succs(b));
            }
        }
        seen
    }

    /// Remove phi incoming entries for predecessor `pred` in block `b`.
    pub fn remove_phi_incoming(&mut self, b: Block, pred: Block) {
        for p in self.phis(b) {
            let inst = self.inst_mut(p).unwrap();
            if let Op::Phi(blocks) = &mut inst.op {
                let mut nb = Vec::new();
                let mut na = Vec::new();
                for (bb, a) in blocks.iter().zip(inst.args.iter()) {
                    if *bb != pred {
                        nb.push(*bb);
                        na.push(*a);
                    }
                }
                *blocks = nb;
                inst.args = na;
            }
        }
    }

    /// Replace predecessor `old` by `new` in phi incoming lists of `b`.
    pub fn rename_phi_incoming(&mut self, b: Block, old: Block, new: Block) {
        for p in self.phis(b) {
            if let Some(Inst { op: Op::Phi(blocks), .. }) = self.inst_mut(p) {
                for bb in blocks.iter_mut() {
                    if *bb == old {
                        *bb = new;
                    }
                }
            }
        }
    }

    /// Compact the value arena, dropping detached instructions and unused
    /// constants. Returns the old-to-new mapping.
    pub fn compact(&mut self) {
        let mut live: Vec<bool> = vec![false; self.values.len()];
        for &p in &self.params {
            live[p.idx()] = true;
        }
        let placed = self.insts();
        for &v in &placed {
            live[v.idx()] = true;
            for &a in self.args(v) {
                live[a.idx()] = true;
            }
        }
        let mut remap = vec![u32::MAX; self.values.len()];
        let mut nv = Vec::new();
        for (i, d) in self.values.iter().enumerate() {
            if live[i] {
                remap[i] = nv.len() as u32;
                nv.push(d.clone());
            }
        }
        let r = |v: Value| Value(remap[v.idx()]);
        for d in nv.iter_mut() {
            if let ValueDef::Inst(i) = &mut d.def {
                for a in i.args.iter_mut() {
                    *a = r(*a);
                }
            }
        }
        self.values = nv;
        self.params = self.params.iter().map(|&p| r(p)).collect();
        for b in self.blocks.iter_mut() {
            for v in b.insts.iter_mut() {
                *v = r(*v);
            }
        }
        self.consts = self
            .values
            .iter()
            .enumerate()
            .filter_map(|(i, d)| match d.def {
                ValueDef::Const(c) => Some(((d.ty, c), Value(i as u32))),
                _ => None,
            })
            .collect();
    }

    /// Calls made by this function, by callee name.
    pub fn callees(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .insts()
            .into_iter()
            .filter_map(|v| match self.op(v) {
                Some(Op::Call(n)) => Some(n.clone()),
                _ => None,
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

/// A module-level variable. A mirrored global aliases the machine memory at
/// the given address: loads and stores through it are memory accesses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Global {
    pub ty: Ty,
    pub mirror: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Module {
    pub functions: BTreeMap<String, Function>,
    pub globals: BTreeMap<String, Global>,
}

impl Module {
    pub fn new() -> Module {
        Module::default()
    }

    pub fn add(&mut self, f: Function) {
        self.functions.insert(f.name.clone(), f);
    }

    pub fn get(&self, name: &str) -> Option<&Function> {
        self.functions.get(name)
    }

    /// Globals referenced from any function.
    pub fn used_globals(&self) -> HashSet<String> {
        let mut s = HashSet::new();
        for f in self.functions.values() {
            for v in f.insts() {
                if let Some(Op::GlobalAddr(n)) = f.op(v) {
                    s.insert(n.clone());
                }
            }
        }
        s
    }

    pub fn remove_unused_globals(&mut self) {
        let used = self.used_globals();
        self.globals.retain(|n, _| used.contains(n));
    }
}

/// Instruction-appending cursor used by code generators.
pub struct Cursor<'a> {
    pub f: &'a mut Function,
    pub b: Block,
}

impl<'a> Cursor<'a> {
    pub fn new(f: &'a mut Function, b: Block) -> Cursor<'a> {
        Cursor { f, b }
    }

    pub fn ins(&mut self, ty: Ty, op: Op, args: Vec<Value>) -> Value {
        self.f.append(self.b, ty, op, args)
    }

    pub fn konst(&mut self, ty: Ty, v: u64) -> Value {
        self.f.konst(ty, v)
    }

    pub fn bin(&mut self, op: BinOp, a: Value, b: Value) -> Value {
        let ty = self.f.ty(a);
        self.ins(ty, Op::Bin(op), vec![a, b])
    }

    pub fn bin_k(&mut self, op: BinOp, a: Value, k: u64) -> Value {
        let ty = self.f.ty(a);
        let c = self.f.konst(ty, k);
        self.bin(op, a, c)
    }

    pub fn un(&mut self, op: UnOp, a: Value) -> Value {
        let ty = self.f.ty(a);
        self.ins(ty, Op::Un(op), vec![a])
    }

    pub fn icmp(&mut self, p: Pred, a: Value, b: Value) -> Value {
        self.ins(Ty::I1, Op::Icmp(p), vec![a, b])
    }

    pub fn select(&mut self, c: Value, a: Value, b: Value) -> Value {
        let ty = self.f.ty(a);
        self.ins(ty, Op::Select, vec![c, a, b])
    }

    /// Casts between integer widths; a no-op when widths agree.
    pub fn zext(&mut self, v: Value, to: Ty) -> Value {
        self.cast(CastOp::Zext, v, to)
    }

    pub fn sext(&mut self, v: Value, to: Ty) -> Value {
        self.cast(CastOp::Sext, v, to)
    }

    pub fn trunc(&mut self, v: Value, to: Ty) -> Value {
        self.cast(CastOp::Trunc, v, to)
    }

    fn cast(&mut self, op: CastOp, v: Value, to: Ty) -> Value {
        if self.f.ty(v) == to {
            return v;
        }
        self.ins(to, Op::Cast(op), vec![v])
    }

    pub fn field_addr(&mut self, state: Value, field: usize) -> Value {
        self.ins(Ty::Ptr, Op::FieldAddr(field as u16), vec![state])
    }

    pub fn load(&mut self, ty: Ty, p: Value) -> Value {
        self.ins(ty, Op::Load, vec![p])
    }

    pub fn store(&mut self, p: Value, v: Value) -> Value {
        self.ins(Ty::Void, Op::Store, vec![p, v])
    }

    pub fn unknown(&mut self, ty: Ty) -> Value {
        self.ins(ty, Op::Unknown, vec![])
    }

    pub fn mem_read(&mut self, ty: Ty, addr: Value) -> Value {
        self.ins(ty, Op::MemRead, vec![addr])
    }

    pub fn mem_write(&mut self, addr: Value, v: Value) -> Value {
        self.ins(Ty::Void, Op::MemWrite, vec![addr, v])
    }

    pub fn call(&mut self, ret: Ty, name: &str, args: Vec<Value>) -> Value {
        self.ins(ret, Op::Call(name.to_string()), args)
    }

    pub fn br(&mut self, t: Block) -> Value {
        self.ins(Ty::Void, Op::Br(t), vec![])
    }

    pub fn condbr(&mut self, c: Value, t: Block, e: Block) -> Value {
        self.ins(Ty::Void, Op::CondBr(t, e), vec![c])
    }

    pub fn ret(&mut self, v: Option<Value>) -> Value {
        self.ins(Ty::Void, Op::Ret, v.into_iter().collect())
    }
}
