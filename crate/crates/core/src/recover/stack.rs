//! Stack slots: machine memory at constant frame addresses becomes local
//! storage once the stack pointer is concrete.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

use super::{param_field, ret_blocks, At};
use crate::exec::{ARG_LIMIT, FRAME_LIMIT, STACK_BASE};
use crate::ir::state::RAX;
use crate::ir::{mask, AllocaKind, BinOp, Function, Global, Module, Op, Ty, Value};
use crate::machine::Abi;
use crate::opt::{run_pipeline, OptConfig, OptContext};

#[derive(Clone, Debug, Serialize)]
pub struct Slot {
    pub id: u32,
    /// Bytes.
    pub width: u32,
    pub global: String,
    #[serde(skip)]
    pub alloca: Value,
    #[serde(skip)]
    written_back: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualClass {
    ReturnValue,
    StackArgument,
    ContextWrite,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Residual {
    pub global: String,
    /// From the entry stack pointer.
    pub offset: i64,
    pub width: u32,
    /// Whether the entry value is read.
    pub read: bool,
    pub class: ResidualClass,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct StackSlotMap {
    /// Keyed by address; slots never overlap.
    pub slots: BTreeMap<u64, Slot>,
    pub residual_globals: Vec<Residual>,
}

impl StackSlotMap {
    fn covering(&self, addr: u64) -> Option<(u64, &Slot)> {
        let (&a, s) = self.slots.range(..=addr).next_back()?;
        (addr < a + s.width as u64).then_some((a, s))
    }

    /// Stack arguments whose entry value is read, counted up to the highest.
    pub fn stack_arg_count(&self, abi: Abi) -> u32 {
        let base = abi.stack_arg_offset() as i64;
        self.residual_globals
            .iter()
            .filter(|r| r.class == ResidualClass::StackArgument && r.read)
            .map(|r| ((r.offset - base) / 8 + 1) as u32)
            .max()
            .unwrap_or(0)
    }
}

/// Frame window: `[STACK_BASE - FRAME_LIMIT, STACK_BASE + ARG_LIMIT)`.
pub fn in_frame(addr: u64, size: u32) -> bool {
    addr >= STACK_BASE - FRAME_LIMIT && addr.checked_add(size as u64).is_some_and(|e| e <= STACK_BASE + ARG_LIMIT)
}

pub fn slot_global_name(addr: u64) -> String {
    let off = addr.wrapping_sub(STACK_BASE) as i64;
    match off {
        0 => "stack_0".into(),
        o if o < 0 => format!("stack_m{}", -o),
        o => format!("stack_p{o}"),
    }
}

struct Access {
    inst: Value,
    addr: u64,
    size: u32,
    write: bool,
}

fn frame_accesses(f: &Function) -> Vec<Access> {
    f.insts()
        .into_iter()
        .filter_map(|v| {
            let (write, ty) = match f.op(v)? {
                Op::MemRead => (false, f.ty(v)),
                Op::MemWrite => (true, f.ty(f.args(v)[1])),
                _ => return None,
            };
            let addr = f.as_const(f.args(v)[0])?;
            let size = ty.bits() / 8;
            in_frame(addr, size).then_some(Access { inst: v, addr, size, write })
        })
        .collect()
}

fn create_slot(f: &mut Function, globals: &mut BTreeMap<String, Global>, map: &mut StackSlotMap, addr: u64, width: u32) {
    let ty = Ty::int(width * 8);
    let global = slot_global_name(addr);
    globals.insert(global.clone(), Global { ty, mirror: Some(addr) });
    let b = f.entry();
    let mut at = At::new(f, b, 0);
    let alloca = at.ins(Ty::Ptr, Op::Alloca(AllocaKind::Scalar(ty)), vec![]);
    let g = at.ins(Ty::Ptr, Op::GlobalAddr(global.clone()), vec![]);
    let init = at.load(ty, g);
    at.store(alloca, init);
    let id = map.slots.len() as u32;
    map.slots.insert(addr, Slot { id, width, global, alloca, written_back: false });
}

/// Slots overlapping `[addr, addr+size)` as `(slot addr, first, end)`
/// pieces in address order. Every byte must be covered.
fn pieces(map: &StackSlotMap, addr: u64, size: u32) -> Vec<(u64, u64, u64)> {
    let mut out = Vec::new();
    let mut x = addr;
    while x < addr + size as u64 {
        let (sa, s) = map.covering(x).expect("access bytes are covered");
        let y = (sa + s.width as u64).min(addr + size as u64);
        out.push((sa, x, y));
        x = y;
    }
    out
}

fn rewrite_read(f: &mut Function, map: &StackSlotMap, a: &Access) {
    let ty = f.ty(a.inst);
    let ps = pieces(map, a.addr, a.size);
    let mut at = At::before(f, a.inst);
    let mut acc: Option<Value> = None;
    for (sa, x, y) in ps {
        let s = &map.slots[&sa];
        let sty = Ty::int(s.width * 8);
        let mut v = at.load(sty, s.alloca);
        if ps_whole(sa, x, y, s.width) && x == a.addr && s.width == a.size {
            acc = Some(v);
            break;
        }
        if x > sa {
            v = at.bin_k(BinOp::LShr, v, 8 * (x - sa));
        }
        if y - x < s.width as u64 {
            v = at.bin_k(BinOp::And, v, mask(8 * (y - x) as u32));
        }
        v = at.resize(v, ty);
        if x > a.addr {
            v = at.bin_k(BinOp::Shl, v, 8 * (x - a.addr));
        }
        acc = Some(match acc {
            Some(p) => at.bin(BinOp::Or, p, v),
            None => v,
        });
    }
    let v = acc.unwrap();
    f.replace_all_uses(a.inst, v);
    f.remove(a.inst);
}

fn ps_whole(sa: u64, x: u64, y: u64, w: u32) -> bool {
    x == sa && y == sa + w as u64
}

fn rewrite_write(f: &mut Function, map: &StackSlotMap, a: &Access) {
    let val = f.args(a.inst)[1];
    let ps = pieces(map, a.addr, a.size);
    let mut at = At::before(f, a.inst);
    for (sa, x, y) in ps {
        let s = &map.slots[&sa];
        let sty = Ty::int(s.width * 8);
        let mut part = val;
        if x > a.addr {
            part = at.bin_k(BinOp::LShr, part, 8 * (x - a.addr));
        }
        let part = at.resize(part, sty);
        if ps_whole(sa, x, y, s.width) {
            at.store(s.alloca, part);
            continue;
        }
        let bits = mask(8 * (y - x) as u32) << (8 * (x - sa));
        let old = at.load(sty, s.alloca);
        let keep = at.bin_k(BinOp::And, old, !bits);
        let mut new = if x > sa { at.bin_k(BinOp::Shl, part, 8 * (x - sa)) } else { part };
        new = at.bin_k(BinOp::And, new, bits);
        let merged = at.bin(BinOp::Or, keep, new);
        at.store(s.alloca, merged);
    }
    f.remove(a.inst);
}

fn add_write_back(f: &mut Function, s: &Slot) {
    let ty = Ty::int(s.width * 8);
    for rb in ret_blocks(f) {
        let t = f.terminator(rb).unwrap();
        let mut at = At::before(f, t);
        let v = at.load(ty, s.alloca);
        let g = at.ins(Ty::Ptr, Op::GlobalAddr(s.global.clone()), vec![]);
        at.store(g, v);
    }
}

/// One promotion step: give every uncovered frame byte touched at a
/// constant address a slot, then route those accesses through the slots.
/// Overlapping accesses of different shapes get one slot per byte. Slots
/// in the caller's area that are written are copied back at each return.
pub(crate) fn promote_round(
    f: &mut Function,
    globals: &mut BTreeMap<String, Global>,
    map: &mut StackSlotMap,
    diags: &mut Vec<String>,
) -> bool {
    let accesses = frame_accesses(f);
    if accesses.is_empty() {
        return false;
    }
    let mut fresh: Vec<&Access> = accesses
        .iter()
        .filter(|a| (a.addr..a.addr + a.size as u64).any(|x| map.covering(x).is_none()))
        .collect();
    fresh.sort_by_key(|a| (a.addr, a.size));
    let mut i = 0;
    while i < fresh.len() {
        let start = fresh[i].addr;
        let mut end = start + fresh[i].size as u64;
        let mut j = i + 1;
        while j < fresh.len() && fresh[j].addr < end {
            end = end.max(fresh[j].addr + fresh[j].size as u64);
            j += 1;
        }
        let group = &fresh[i..j];
        let uniform = group.iter().all(|a| a.addr == start && a.size == group[0].size);
        let untouched = (start..end).all(|x| map.covering(x).is_none());
        if uniform && untouched {
            create_slot(f, globals, map, start, group[0].size);
        } else {
            diags.push(format!(
                "warning: {}: overlapping stack accesses in [{start:#x}, {end:#x}); using byte slots",
                f.name
            ));
            for x in start..end {
                if map.covering(x).is_none() {
                    create_slot(f, globals, map, x, 1);
                }
            }
        }
        i = j;
    }
    for a in &accesses {
        if a.write {
            rewrite_write(f, map, a);
            let touched: Vec<u64> = pieces(map, a.addr, a.size).into_iter().map(|p| p.0).collect();
            for sa in touched {
                let s = map.slots.get_mut(&sa).unwrap();
                if sa >= STACK_BASE + 8 && !s.written_back {
                    s.written_back = true;
                    let s = s.clone();
                    add_write_back(f, &s);
                }
            }
        } else {
            rewrite_read(f, map, a);
        }
    }
    true
}

/// Promote stack slots of `func` to a fixpoint. Expects rsp to have been
/// concretized already.
pub fn recover_stack_slots(m: &mut Module, func: &str, opt: &OptConfig, diags: &mut Vec<String>) -> StackSlotMap {
    let mut f = m.functions.remove(func).expect("function exists");
    let mut map = StackSlotMap::default();
    loop {
        let mut ctx = OptContext::new(opt.clone());
        ctx.globals = Some(m.globals.clone());
        run_pipeline(&mut f, &mut ctx);
        diags.append(&mut ctx.diagnostics);
        if !promote_round(&mut f, &mut m.globals, &mut map, diags) {
            break;
        }
    }
    m.add(f);
    m.remove_unused_globals();
    map
}

/// Record which slot globals survived optimization and what they hold.
pub fn classify_residual_globals(map: &mut StackSlotMap, f: &Function, globals: &BTreeMap<String, Global>, abi: Abi) {
    let users = f.users();
    let st = f.params.first().copied();
    let rax_stores: HashSet<Value> = f
        .insts()
        .into_iter()
        .filter(|&v| {
            f.op(v) == Some(&Op::Store) && st.is_some_and(|st| param_field(f, f.args(v)[0], st) == Some(RAX))
        })
        .map(|v| f.args(v)[1])
        .collect();
    let mut loads_of: HashMap<&str, Vec<Value>> = HashMap::new();
    for v in f.insts() {
        if let Some(Op::GlobalAddr(n)) = f.op(v) {
            for &u in users.get(&v).into_iter().flatten() {
                if f.op(u) == Some(&Op::Load) {
                    loads_of.entry(n.as_str()).or_default().push(u);
                }
            }
        }
    }
    map.residual_globals.clear();
    for (&addr, s) in &map.slots {
        if !globals.contains_key(&s.global) {
            continue;
        }
        let offset = addr.wrapping_sub(STACK_BASE) as i64;
        let loads = loads_of.get(s.global.as_str()).cloned().unwrap_or_default();
        let class = if offset >= abi.stack_arg_offset() as i64 {
            ResidualClass::StackArgument
        } else if reaches(f, &users, &loads, &rax_stores) {
            ResidualClass::ReturnValue
        } else {
            ResidualClass::ContextWrite
        };
        map.residual_globals.push(Residual {
            global: s.global.clone(),
            offset,
            width: s.width,
            read: !loads.is_empty(),
            class,
        });
    }
}

/// Whether any of `from` flows by value into one of `to`.
fn reaches(f: &Function, users: &HashMap<Value, Vec<Value>>, from: &[Value], to: &HashSet<Value>) -> bool {
    let mut seen: HashSet<Value> = HashSet::new();
    let mut work: Vec<Value> = from.to_vec();
    while let Some(v) = work.pop() {
        if to.contains(&v) {
            return true;
        }
        if !seen.insert(v) {
            continue;
        }
        for &u in users.get(&v).into_iter().flatten() {
            if f.op(u).is_some_and(|o| o.is_pure() && !matches!(o, Op::Load)) {
                work.push(u);
            }
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_and_names() {
        assert!(in_frame(STACK_BASE - 8, 8));
        assert!(in_frame(STACK_BASE - FRAME_LIMIT, 1));
        assert!(!in_frame(STACK_BASE - FRAME_LIMIT - 1, 1));
        assert!(!in_frame(STACK_BASE + ARG_LIMIT - 4, 8));
        assert_eq!(slot_global_name(STACK_BASE - 16), "stack_m16");
        assert_eq!(slot_global_name(STACK_BASE + 40), "stack_p40");
        assert_eq!(slot_global_name(STACK_BASE), "stack_0");
    }
}
