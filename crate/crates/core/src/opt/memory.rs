//! Block-local load/store forwarding and dead store elimination, for both
//! pointer storage (state fields, slots, globals) and machine memory.
//!
//! Machine addresses are split into a base value plus constant offset; two
//! accesses off the same base are compared exactly, different bases may
//! alias. Mirrored globals are machine memory at their mirror address.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::ir::{BinOp, Block, CastOp, Function, Global, Op, Ty, Value};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum PtrKey {
    Field(Value, u16),
    Obj(Value),
}

#[derive(Clone, Copy, Debug)]
struct MemEntry {
    base: Option<Value>,
    off: i128,
    size: i128,
    val: Value,
    /// Pending write that may still be overwritten before being read.
    store: Option<Value>,
}

impl MemEntry {
    fn covers(&self, base: Option<Value>, off: i128, size: i128) -> bool {
        self.base == base && self.off <= off && off + size <= self.off + self.size
    }

    fn overlaps(&self, base: Option<Value>, off: i128, size: i128) -> bool {
        self.base != base || (self.off < off + size && off < self.off + self.size)
    }
}

/// How an instruction touches storage.
enum Access {
    /// Pointer storage with a precise key.
    Ptr(PtrKey),
    /// Machine memory.
    Mem(Option<Value>, i128),
    /// A pointer we cannot classify.
    Opaque,
}

struct Ctx<'a> {
    globals: Option<&'a BTreeMap<String, Global>>,
    allocas: HashSet<Value>,
}

fn split_addr(f: &Function, mut a: Value) -> (Option<Value>, i128) {
    let mut off = 0u64;
    loop {
        if let Some(c) = f.as_const(a) {
            return (None, off.wrapping_add(c) as i64 as i128);
        }
        match (f.op(a), f.args(a)) {
            (Some(Op::Bin(BinOp::Add)), [x, y]) if f.as_const(*y).is_some() => {
                off = off.wrapping_add(f.as_const(*y).unwrap());
                a = *x;
            }
            (Some(Op::Bin(BinOp::Sub)), [x, y]) if f.as_const(*y).is_some() => {
                off = off.wrapping_sub(f.as_const(*y).unwrap());
                a = *x;
            }
            _ => return (Some(a), off as i64 as i128),
        }
    }
}

fn classify_ptr(f: &Function, cx: &Ctx, p: Value) -> Access {
    match f.op(p) {
        Some(Op::FieldAddr(i)) => Access::Ptr(PtrKey::Field(f.args(p)[0], *i)),
        Some(Op::Alloca(_)) => Access::Ptr(PtrKey::Obj(p)),
        Some(Op::GlobalAddr(n)) => match cx.globals.and_then(|g| g.get(n)) {
            Some(Global { mirror: Some(a), .. }) => Access::Mem(None, *a as i64 as i128),
            Some(_) => Access::Ptr(PtrKey::Obj(p)),
            None => Access::Opaque,
        },
        _ => Access::Opaque,
    }
}

/// Whether a store to `a` may change the contents read through `b`.
fn may_alias(cx: &Ctx, a: PtrKey, b: PtrKey) -> bool {
    match (a, b) {
        (PtrKey::Field(s, i), PtrKey::Field(t, j)) => {
            i == j && (s == t || !(cx.allocas.contains(&s) || cx.allocas.contains(&t)))
        }
        (PtrKey::Obj(p), PtrKey::Obj(q)) => p == q,
        _ => false,
    }
}

struct BlockState {
    ptr: HashMap<PtrKey, (Value, Option<Value>)>,
    mem: Vec<MemEntry>,
}

fn bits_of(ty: Ty) -> i128 {
    ty.bits() as i128
}

fn emit(f: &mut Function, out: &mut Vec<Value>, b: Block, ty: Ty, op: Op, args: Vec<Value>) -> Value {
    let v = f.create(ty, op, args);
    f.inst_mut(v).unwrap().block = Some(b);
    out.push(v);
    v
}

/// Assemble `size` bytes at base+off from known entries, newest first.
fn assemble(
    f: &mut Function,
    out: &mut Vec<Value>,
    b: Block,
    st: &BlockState,
    base: Option<Value>,
    off: i128,
    size: i128,
    ty: Ty,
) -> Option<Value> {
    let mut owner: Vec<usize> = Vec::with_capacity(size as usize);
    for byte in off..off + size {
        let i = st.mem.iter().rposition(|e| e.covers(base, byte, 1))?;
        owner.push(i);
    }
    if owner.iter().all(|&i| i == owner[0]) {
        let e = st.mem[owner[0]];
        if e.off == off && e.size == size && f.ty(e.val) == ty {
            return Some(e.val);
        }
    }
    let mut acc: Option<Value> = None;
    let mut k = 0usize;
    while k < owner.len() {
        let mut end = k;
        while end < owner.len() && owner[end] == owner[k] {
            end += 1;
        }
        // Keep each piece a legal integer width.
        let end = k + [8, 4, 2, 1].into_iter().find(|&n| n <= end - k).unwrap();
        let e = st.mem[owner[k]];
        let (start, len) = (off + k as i128, (end - k) as u32);
        let ety = f.ty(e.val);
        let mut piece = e.val;
        let shift = 8 * (start - e.off) as u64;
        if shift > 0 {
            let s = f.konst(ety, shift);
            piece = emit(f, out, b, ety, Op::Bin(BinOp::LShr), vec![piece, s]);
        }
        let pty = Ty::int(8 * len);
        if pty != ety {
            piece = emit(f, out, b, pty, Op::Cast(CastOp::Trunc), vec![piece]);
        }
        if pty != ty {
            piece = emit(f, out, b, ty, Op::Cast(CastOp::Zext), vec![piece]);
        }
        if k > 0 {
            let s = f.konst(ty, 8 * k as u64);
            piece = emit(f, out, b, ty, Op::Bin(BinOp::Shl), vec![piece, s]);
        }
        acc = Some(match acc {
            None => piece,
            Some(a) => emit(f, out, b, ty, Op::Bin(BinOp::Or), vec![a, piece]),
        });
        k = end;
    }
    acc
}

pub fn forward_memory(f: &mut Function, globals: Option<&BTreeMap<String, Global>>) -> bool {
    let allocas: HashSet<Value> = f.insts().into_iter().filter(|&v| matches!(f.op(v), Some(Op::Alloca(_)))).collect();
    let cx = Ctx { globals, allocas };
    let mut map: HashMap<Value, Value> = HashMap::new();
    let mut dead: HashSet<Value> = HashSet::new();
    let resolve = |map: &HashMap<Value, Value>, mut v: Value| {
        while let Some(&w) = map.get(&v) {
            v = w;
        }
        v
    };
    for b in f.layout.clone() {
        let insts = std::mem::take(&mut f.blocks[b.idx()].insts);
        let mut out = Vec::with_capacity(insts.len());
        let mut st = BlockState { ptr: HashMap::new(), mem: Vec::new() };
        for v in insts {
            let args: Vec<Value> = f.args(v).iter().map(|&a| resolve(&map, a)).collect();
            if args.as_slice() != f.args(v) {
                f.inst_mut(v).unwrap().args = args.clone();
            }
            let op = f.op(v).unwrap().clone();
            let ty = f.ty(v);
            match op {
                Op::Load => match classify_ptr(f, &cx, args[0]) {
                    Access::Ptr(k) => {
                        if let Some(&(known, _)) = st.ptr.get(&k) {
                            if f.ty(known) == ty {
                                map.insert(v, known);
                                dead.insert(v);
                                continue;
                            }
                        }
                        // The load observes any pending store it may alias.
                        for (kk, e) in st.ptr.iter_mut() {
                            if may_alias(&cx, *kk, k) {
                                e.1 = None;
                            }
                        }
                        st.ptr.insert(k, (v, None));
                    }
                    Access::Mem(base, off) => {
                        if let Some(r) = read_mem(f, &mut out, b, &mut st, base, off, ty) {
                            map.insert(v, r);
                            dead.insert(v);
                            continue;
                        }
                        st.mem.push(MemEntry { base, off, size: bits_of(ty) / 8, val: v, store: None });
                    }
                    Access::Opaque => observe_all(&mut st),
                },
                Op::MemRead => {
                    let (base, off) = split_addr(f, args[0]);
                    if let Some(r) = read_mem(f, &mut out, b, &mut st, base, off, ty) {
                        map.insert(v, r);
                        dead.insert(v);
                        continue;
                    }
                    st.mem.push(MemEntry { base, off, size: bits_of(ty) / 8, val: v, store: None });
                }
                Op::Store => {
                    let val = args[1];
                    match classify_ptr(f, &cx, args[0]) {
                        Access::Ptr(k) => {
                            if let Some(&(known, _)) = st.ptr.get(&k) {
                                if known == val {
                                    dead.insert(v);
                                    continue;
                                }
                            }
                            if let Some(&(_, Some(prev))) = st.ptr.get(&k) {
                                dead.insert(prev);
                            }
                            st.ptr.retain(|kk, _| !may_alias(&cx, k, *kk));
                            st.ptr.insert(k, (val, Some(v)));
                        }
                        Access::Mem(base, off) => {
                            if write_mem(f, &mut st, &mut dead, base, off, val, v) {
                                continue;
                            }
                        }
                        Access::Opaque => {
                            st.ptr.clear();
                            st.mem.clear();
                        }
                    }
                }
                Op::MemWrite => {
                    let (base, off) = split_addr(f, args[0]);
                    if write_mem(f, &mut st, &mut dead, base, off, args[1], v) {
                        continue;
                    }
                }
                Op::Call(_) => {
                    st.ptr.clear();
                    st.mem.clear();
                }
                _ => {}
            }
            out.push(v);
        }
        out.retain(|v| !dead.contains(v));
        f.blocks[b.idx()].insts = out;
    }
    if map.is_empty() && dead.is_empty() {
        return false;
    }
    f.replace_uses(&map);
    f.remove_all(&dead);
    true
}

fn observe_all(st: &mut BlockState) {
    for e in st.ptr.values_mut() {
        e.1 = None;
    }
    for e in st.mem.iter_mut() {
        e.store = None;
    }
}

fn read_mem(
    f: &mut Function,
    out: &mut Vec<Value>,
    b: Block,
    st: &mut BlockState,
    base: Option<Value>,
    off: i128,
    ty: Ty,
) -> Option<Value> {
    let size = bits_of(ty) / 8;
    let r = assemble(f, out, b, st, base, off, size, ty);
    if r.is_none() {
        for e in st.mem.iter_mut() {
            if e.overlaps(base, off, size) {
                e.store = None;
            }
        }
    } else {
        // Forwarded bytes are observed as well.
        for e in st.mem.iter_mut() {
            if e.base == base && e.off < off + size && off < e.off + e.size {
                e.store = None;
            }
        }
    }
    r
}

/// Record a write; returns true if the write is redundant and was dropped.
fn write_mem(
    f: &Function,
    st: &mut BlockState,
    dead: &mut HashSet<Value>,
    base: Option<Value>,
    off: i128,
    val: Value,
    v: Value,
) -> bool {
    let size = bits_of(f.ty(val)) / 8;
    if let Some(e) = st.mem.iter().rev().find(|e| e.overlaps(base, off, size)) {
        if e.base == base && e.off == off && e.size == size && e.val == val {
            return true;
        }
    }
    let mut keep = Vec::with_capacity(st.mem.len());
    for e in st.mem.drain(..) {
        if e.base != base {
            continue;
        }
        if off <= e.off && e.off + e.size <= off + size {
            if let Some(s) = e.store {
                dead.insert(s);
            }
            continue;
        }
        keep.push(e);
    }
    st.mem = keep;
    st.mem.push(MemEntry { base, off, size, val, store: Some(v) });
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::{ir::run_ir, IrEnv, Memory};
    use crate::ir::{parse_module, print_function, verify, Module};

    fn one(src: &str) -> (Module, Function) {
        let m = parse_module(src).unwrap();
        let f = m.functions.values().next().unwrap().clone();
        (m, f)
    }

    #[test]
    fn forwards_stores_and_kills_dead_ones() {
        let (_, mut f) = one(
            "define i64 @f(ptr %0, i64 %1) {
b0:
  %2 = fieldaddr.rax ptr %0
  store %2, %1
  %3 = fieldaddr.rax ptr %0
  store %3, i64 7
  %4 = load i64 %3
  %5 = load i64 %2
  %6 = add i64 %4, %5
  ret %6
}
",
        );
        assert!(forward_memory(&mut f, None));
        verify(&f).unwrap();
        let t = print_function(&f);
        assert_eq!(t.matches("store").count(), 1, "{t}");
        assert!(t.contains("add i64 i64 7, i64 7"), "{t}");
    }

    #[test]
    fn byte_overwrite_is_reassembled() {
        let src = "define i64 @f(i64 %0) {
b0:
  memwrite i64 0x7000, %0
  %1 = trunc i8 %0
  %2 = add i8 %1, i8 1
  memwrite i64 0x7001, %2
  %3 = memread i64 i64 0x7000
  ret %3
}
";
        let (m0, mut f) = one(src);
        assert!(forward_memory(&mut f, None));
        verify(&f).unwrap();
        assert!(!print_function(&f).contains("memread"));
        let mut m1 = Module::new();
        m1.add(f);
        for x in [0u64, 0x1234_5678_9abc_def0, u64::MAX] {
            let mut e0 = IrEnv::new(Memory::default());
            let mut e1 = IrEnv::new(Memory::default());
            assert_eq!(run_ir(&m0, "f", &[x], &mut e0), run_ir(&m1, "f", &[x], &mut e1));
            assert_eq!(e0.writes, e1.writes);
        }
    }

    #[test]
    fn different_bases_are_not_forwarded() {
        let (_, mut f) = one(
            "define i64 @f(i64 %0, i64 %1) {
b0:
  memwrite %0, i64 1
  memwrite %1, i64 2
  %2 = memread i64 %0
  ret %2
}
",
        );
        forward_memory(&mut f, None);
        let t = print_function(&f);
        assert!(t.contains("memread"), "{t}");
        assert_eq!(t.matches("memwrite").count(), 2);
    }

    #[test]
    fn redundant_store_of_loaded_value() {
        let (_, mut f) = one(
            "define void @f(ptr %0) {
b0:
  %1 = fieldaddr.rbx ptr %0
  %2 = load i64 %1
  store %1, %2
  ret
}
",
        );
        assert!(forward_memory(&mut f, None));
        assert!(!print_function(&f).contains("store"));
    }
}
