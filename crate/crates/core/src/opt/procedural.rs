//! Rewrites that need side conditions on constants or types.

use super::simplify::Rewriter;
use crate::ir::{mask, BinOp, CastOp, Op, Pred, Ty, UnOp, Value};

/// Names and one-line descriptions, for listings.
pub const PROCEDURAL: &[(&str, &str)] = &[
    ("cast-chain", "collapse zext/sext/trunc chains"),
    ("icmp-const-left", "move a constant compare operand to the right"),
    ("icmp-offset", "fold add/xor/not/neg by constants into an equality compare"),
    ("icmp-trivial-range", "unsigned/signed compares against the range ends"),
    ("icmp-zext", "compare zero-extended values at the narrow width"),
    ("icmp-bool", "equality compares of i1 against 0/1"),
    ("icmp-select-const", "compare of a select between constants"),
    ("icmp-mask-impossible", "masked equality that no value can satisfy"),
    ("icmp-mask-merge", "conjunction of masked equalities on one value"),
    ("icmp-trunc-mask", "truncated equality rewritten as a masked equality"),
    ("icmp-lshr-mask", "shifted masked equality rewritten on the unshifted value"),
    ("not-icmp", "negated compare becomes the inverse predicate"),
    ("select-bool", "selects between booleans become logic"),
    ("select-same-cond", "nested select on the same condition"),
    ("mul-pow2", "multiplication by a power of two becomes a shift"),
    ("shift-shift", "consecutive constant shifts"),
    ("bit-provenance", "values whose bits are constants or a permutation-free copy of another value"),
];

fn k(rw: &Rewriter, v: Value) -> Option<u64> {
    rw.c(v)
}

fn inst(rw: &Rewriter, v: Value) -> Option<(Op, Vec<Value>)> {
    rw.f.inst(v).map(|i| (i.op.clone(), i.args.clone()))
}

fn fired(rw: &mut Rewriter, name: &'static str, v: Value) -> Option<Value> {
    rw.ctx.fired(name);
    Some(v)
}

pub fn apply(rw: &mut Rewriter, v: Value) -> Option<Value> {
    let (op, args) = inst(rw, v)?;
    let ty = rw.f.ty(v);
    match op {
        Op::Cast(c) => cast_chain(rw, c, args[0], ty).or_else(|| bit_provenance(rw, v)),
        Op::Icmp(p) => icmp(rw, p, args[0], args[1]),
        Op::Un(UnOp::Not) if ty == Ty::I1 => {
            if let Some((Op::Icmp(p), a)) = inst(rw, args[0]) {
                let r = rw.build(Ty::I1, Op::Icmp(p.inverse()), a);
                return fired(rw, "not-icmp", r);
            }
            None
        }
        Op::Select => select(rw, args[0], args[1], args[2], ty),
        Op::Bin(BinOp::Mul) => {
            let c = k(rw, args[1])?;
            if c > 1 && c.is_power_of_two() {
                let s = rw.konst(ty, c.trailing_zeros() as u64);
                let r = rw.build(ty, Op::Bin(BinOp::Shl), vec![args[0], s]);
                return fired(rw, "mul-pow2", r);
            }
            None
        }
        Op::Bin(b @ (BinOp::Shl | BinOp::LShr)) => shift_shift(rw, b, args[0], args[1], ty).or_else(|| bit_provenance(rw, v)),
        Op::Bin(BinOp::And) => mask_merge(rw, args[0], args[1], ty).or_else(|| bit_provenance(rw, v)),
        Op::Bin(BinOp::Or) => mask_merge_or(rw, args[0], args[1], ty).or_else(|| bit_provenance(rw, v)),
        Op::Bin(BinOp::Xor) => bit_provenance(rw, v),
        _ => None,
    }
}

fn cast_chain(rw: &mut Rewriter, c: CastOp, x: Value, ty: Ty) -> Option<Value> {
    let (Op::Cast(inner), a) = inst(rw, x)? else { return None };
    let src = a[0];
    let sty = rw.f.ty(src);
    let r = match (c, inner) {
        (CastOp::Trunc, CastOp::Trunc) => rw.build(ty, Op::Cast(CastOp::Trunc), vec![src]),
        (CastOp::Zext, CastOp::Zext) | (CastOp::Sext, CastOp::Sext) => rw.build(ty, Op::Cast(c), vec![src]),
        (CastOp::Sext, CastOp::Zext) => rw.build(ty, Op::Cast(CastOp::Zext), vec![src]),
        (CastOp::Trunc, CastOp::Zext | CastOp::Sext) => {
            if sty == ty {
                src
            } else if sty.bits() > ty.bits() {
                rw.build(ty, Op::Cast(CastOp::Trunc), vec![src])
            } else {
                rw.build(ty, Op::Cast(inner), vec![src])
            }
        }
        _ => return None,
    };
    fired(rw, "cast-chain", r)
}

fn icmp(rw: &mut Rewriter, p: Pred, a: Value, b: Value) -> Option<Value> {
    let ty = rw.f.ty(a);
    let w = ty.bits();
    let m = mask(w);
    if k(rw, a).is_some() && k(rw, b).is_none() {
        let r = rw.build(Ty::I1, Op::Icmp(p.swapped()), vec![b, a]);
        return fired(rw, "icmp-const-left", r);
    }
    let c = k(rw, b)?;
    let smin = 1u64 << (w - 1);
    let smax = smin - 1;
    let t = |rw: &mut Rewriter, val: bool| rw.konst(Ty::I1, val as u64);
    let trivial = match p {
        Pred::Ult if c == 0 => Some(false),
        Pred::Uge if c == 0 => Some(true),
        Pred::Ugt if c == m => Some(false),
        Pred::Ule if c == m => Some(true),
        Pred::Slt if c == smin => Some(false),
        Pred::Sge if c == smin => Some(true),
        Pred::Sgt if c == smax => Some(false),
        Pred::Sle if c == smax => Some(true),
        _ => None,
    };
    if let Some(val) = trivial {
        let r = t(rw, val);
        return fired(rw, "icmp-trivial-range", r);
    }
    if (p == Pred::Ult && c == 1) || (p == Pred::Ugt && c == 0) {
        let z = rw.konst(ty, 0);
        let r = rw.build(Ty::I1, Op::Icmp(if p == Pred::Ult { Pred::Eq } else { Pred::Ne }), vec![a, z]);
        return fired(rw, "icmp-trivial-range", r);
    }
    if !matches!(p, Pred::Eq | Pred::Ne) {
        return None;
    }
    let eq = p == Pred::Eq;
    if ty == Ty::I1 {
        // b == 1 is b; b == 0 is !b.
        let r = if (c == 1) == eq { a } else { rw.build(Ty::I1, Op::Un(UnOp::Not), vec![a]) };
        return fired(rw, "icmp-bool", r);
    }
    let (op, args) = inst(rw, a)?;
    match op {
        Op::Bin(bop @ (BinOp::Add | BinOp::Sub | BinOp::Xor)) => {
            let c1 = k(rw, args[1])?;
            let nc = match bop {
                BinOp::Add => c.wrapping_sub(c1),
                BinOp::Sub => c.wrapping_add(c1),
                _ => c ^ c1,
            };
            let nc = rw.konst(ty, nc);
            let r = rw.build(Ty::I1, Op::Icmp(p), vec![args[0], nc]);
            fired(rw, "icmp-offset", r)
        }
        Op::Un(u) => {
            let nc = rw.konst(ty, u.eval(c, w));
            let r = rw.build(Ty::I1, Op::Icmp(p), vec![args[0], nc]);
            fired(rw, "icmp-offset", r)
        }
        Op::Cast(CastOp::Zext) => {
            let nty = rw.f.ty(args[0]);
            let r = if c & !nty.mask() != 0 {
                rw.konst(Ty::I1, !eq as u64)
            } else {
                let nc = rw.konst(nty, c);
                rw.build(Ty::I1, Op::Icmp(p), vec![args[0], nc])
            };
            fired(rw, "icmp-zext", r)
        }
        Op::Cast(CastOp::Trunc) => {
            let wide = rw.f.ty(args[0]);
            let mk = rw.konst(wide, ty.mask());
            let masked = rw.build(wide, Op::Bin(BinOp::And), vec![args[0], mk]);
            let nc = rw.konst(wide, c);
            let r = rw.build(Ty::I1, Op::Icmp(p), vec![masked, nc]);
            fired(rw, "icmp-trunc-mask", r)
        }
        Op::Select => {
            let (k1, k2) = (k(rw, args[1])?, k(rw, args[2])?);
            let (r1, r2) = (p.eval(k1, c, w), p.eval(k2, c, w));
            let r = match (r1, r2) {
                (true, true) => rw.konst(Ty::I1, 1),
                (false, false) => rw.konst(Ty::I1, 0),
                (true, false) => args[0],
                (false, true) => rw.build(Ty::I1, Op::Un(UnOp::Not), vec![args[0]]),
            };
            fired(rw, "icmp-select-const", r)
        }
        Op::Bin(BinOp::LShr) => {
            let sh = k(rw, args[1])?;
            if sh == 0 || sh >= w as u64 {
                return None;
            }
            let r = if ((c << sh) & m) >> sh != c {
                rw.konst(Ty::I1, !eq as u64)
            } else {
                let mk = rw.konst(ty, m << sh);
                let masked = rw.build(ty, Op::Bin(BinOp::And), vec![args[0], mk]);
                let nc = rw.konst(ty, c << sh);
                rw.build(Ty::I1, Op::Icmp(p), vec![masked, nc])
            };
            fired(rw, "icmp-lshr-mask", r)
        }
        Op::Bin(BinOp::And) => {
            let mk = k(rw, args[1])?;
            if c & !mk != 0 {
                let r = rw.konst(Ty::I1, !eq as u64);
                return fired(rw, "icmp-mask-impossible", r);
            }
            let (Op::Bin(BinOp::LShr), sa) = inst(rw, args[0])? else { return None };
            let sh = k(rw, sa[1])?;
            if sh == 0 || sh >= w as u64 || ((mk << sh) & m) >> sh != mk {
                return None;
            }
            let nm = rw.konst(ty, (mk << sh) & m);
            let masked = rw.build(ty, Op::Bin(BinOp::And), vec![sa[0], nm]);
            let nc = rw.konst(ty, (c << sh) & m);
            let r = rw.build(Ty::I1, Op::Icmp(p), vec![masked, nc]);
            fired(rw, "icmp-lshr-mask", r)
        }
        _ => None,
    }
}

/// `(x & m) == c` as (x, m, c); a bare `x == c` has the full mask.
fn masked_eq(rw: &Rewriter, v: Value, want: Pred) -> Option<(Value, u64, u64)> {
    let (Op::Icmp(p), a) = inst(rw, v)? else { return None };
    if p != want {
        return None;
    }
    let c = k(rw, a[1])?;
    match inst(rw, a[0]) {
        Some((Op::Bin(BinOp::And), m)) if k(rw, m[1]).is_some() => Some((m[0], k(rw, m[1]).unwrap(), c)),
        _ => Some((a[0], rw.f.ty(a[0]).mask(), c)),
    }
}

fn merge_masks(rw: &mut Rewriter, a: Value, b: Value, p: Pred) -> Option<Value> {
    let (x1, m1, c1) = masked_eq(rw, a, p)?;
    let (x2, m2, c2) = masked_eq(rw, b, p)?;
    if x1 != x2 || c1 & !m1 != 0 || c2 & !m2 != 0 {
        return None;
    }
    let ty = rw.f.ty(x1);
    let r = if c1 & m2 != c2 & m1 {
        // The two constraints disagree on shared bits.
        rw.konst(Ty::I1, (p == Pred::Ne) as u64)
    } else {
        let mk = rw.konst(ty, m1 | m2);
        let masked = rw.build(ty, Op::Bin(BinOp::And), vec![x1, mk]);
        let nc = rw.konst(ty, c1 | c2);
        rw.build(Ty::I1, Op::Icmp(p), vec![masked, nc])
    };
    fired(rw, "icmp-mask-merge", r)
}

fn mask_merge(rw: &mut Rewriter, a: Value, b: Value, ty: Ty) -> Option<Value> {
    if ty != Ty::I1 {
        return None;
    }
    merge_masks(rw, a, b, Pred::Eq)
}

fn mask_merge_or(rw: &mut Rewriter, a: Value, b: Value, ty: Ty) -> Option<Value> {
    if ty != Ty::I1 {
        return None;
    }
    merge_masks(rw, a, b, Pred::Ne)
}

fn select(rw: &mut Rewriter, c: Value, a: Value, b: Value, ty: Ty) -> Option<Value> {
    if let Some((Op::Select, ia)) = inst(rw, a) {
        if ia[0] == c {
            let r = rw.build(ty, Op::Select, vec![c, ia[1], b]);
            return fired(rw, "select-same-cond", r);
        }
    }
    if let Some((Op::Select, ib)) = inst(rw, b) {
        if ib[0] == c {
            let r = rw.build(ty, Op::Select, vec![c, a, ib[2]]);
            return fired(rw, "select-same-cond", r);
        }
    }
    let (ka, kb) = (k(rw, a), k(rw, b));
    let r = match (ka, kb) {
        (Some(1), Some(0)) if ty == Ty::I1 => c,
        (Some(0), Some(1)) if ty == Ty::I1 => rw.build(Ty::I1, Op::Un(UnOp::Not), vec![c]),
        (Some(1), Some(0)) => rw.build(ty, Op::Cast(CastOp::Zext), vec![c]),
        (Some(0), Some(1)) => {
            let n = rw.build(Ty::I1, Op::Un(UnOp::Not), vec![c]);
            rw.build(ty, Op::Cast(CastOp::Zext), vec![n])
        }
        _ if ty != Ty::I1 => return None,
        (_, Some(0)) => rw.build(Ty::I1, Op::Bin(BinOp::And), vec![c, a]),
        (Some(1), _) => rw.build(Ty::I1, Op::Bin(BinOp::Or), vec![c, b]),
        _ => return None,
    };
    fired(rw, "select-bool", r)
}

fn shift_shift(rw: &mut Rewriter, op: BinOp, x: Value, s: Value, ty: Ty) -> Option<Value> {
    let c2 = k(rw, s)?;
    let (Op::Bin(inner), a) = inst(rw, x)? else { return None };
    let c1 = k(rw, a[1])?;
    let w = ty.bits() as u64;
    if c1 >= w || c2 >= w {
        return None;
    }
    let r = if inner == op {
        if c1 + c2 >= w {
            rw.konst(ty, 0)
        } else {
            let sh = rw.konst(ty, c1 + c2);
            rw.build(ty, Op::Bin(op), vec![a[0], sh])
        }
    } else if c1 == c2 && matches!((inner, op), (BinOp::Shl, BinOp::LShr) | (BinOp::LShr, BinOp::Shl)) {
        let m = if op == BinOp::LShr { ty.mask() >> c1 } else { (ty.mask() << c1) & ty.mask() };
        let mk = rw.konst(ty, m);
        rw.build(ty, Op::Bin(BinOp::And), vec![a[0], mk])
    } else {
        return None;
    };
    fired(rw, "shift-shift", r)
}

/// Where one result bit comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bit {
    Zero,
    One,
    Src(Value, u8),
}

fn bits(rw: &mut Rewriter, v: Value, depth: u32) -> Option<Vec<Bit>> {
    if let Some(r) = rw.bits_cache.get(&v) {
        return r.clone();
    }
    let r = compute_bits(rw, v, depth);
    rw.bits_cache.insert(v, r.clone());
    r
}

fn opaque(v: Value, w: u32) -> Vec<Bit> {
    (0..w).map(|i| Bit::Src(v, i as u8)).collect()
}

fn compute_bits(rw: &mut Rewriter, v: Value, depth: u32) -> Option<Vec<Bit>> {
    let ty = rw.f.ty(v);
    if !ty.is_int() {
        return None;
    }
    let w = ty.bits();
    if let Some(c) = k(rw, v) {
        return Some((0..w).map(|i| if c >> i & 1 == 1 { Bit::One } else { Bit::Zero }).collect());
    }
    if depth == 0 {
        return Some(opaque(v, w));
    }
    let Some((op, a)) = inst(rw, v) else { return Some(opaque(v, w)) };
    let sub = |rw: &mut Rewriter, x: Value| bits(rw, x, depth - 1);
    Some(match op {
        Op::Bin(BinOp::And) => {
            let (x, y) = (sub(rw, a[0])?, sub(rw, a[1])?);
            x.iter()
                .zip(&y)
                .enumerate()
                .map(|(i, (&p, &q))| match (p, q) {
                    (Bit::Zero, _) | (_, Bit::Zero) => Bit::Zero,
                    (Bit::One, o) | (o, Bit::One) => o,
                    (p, q) if p == q => p,
                    _ => Bit::Src(v, i as u8),
                })
                .collect()
        }
        Op::Bin(BinOp::Or) => {
            let (x, y) = (sub(rw, a[0])?, sub(rw, a[1])?);
            x.iter()
                .zip(&y)
                .enumerate()
                .map(|(i, (&p, &q))| match (p, q) {
                    (Bit::One, _) | (_, Bit::One) => Bit::One,
                    (Bit::Zero, o) | (o, Bit::Zero) => o,
                    (p, q) if p == q => p,
                    _ => Bit::Src(v, i as u8),
                })
                .collect()
        }
        Op::Bin(BinOp::Xor) => {
            let (x, y) = (sub(rw, a[0])?, sub(rw, a[1])?);
            x.iter()
                .zip(&y)
                .enumerate()
                .map(|(i, (&p, &q))| match (p, q) {
                    (Bit::Zero, o) | (o, Bit::Zero) => o,
                    (Bit::One, Bit::One) => Bit::Zero,
                    (p, q) if p == q => Bit::Zero,
                    _ => Bit::Src(v, i as u8),
                })
                .collect()
        }
        Op::Bin(BinOp::Shl) => match k(rw, a[1]) {
            Some(s) => {
                let x = sub(rw, a[0])?;
                (0..w as u64).map(|i| if i < s { Bit::Zero } else { x[(i - s) as usize] }).collect()
            }
            None => opaque(v, w),
        },
        Op::Bin(BinOp::LShr) => match k(rw, a[1]) {
            Some(s) => {
                let x = sub(rw, a[0])?;
                (0..w as u64).map(|i| if i + s >= w as u64 { Bit::Zero } else { x[(i + s) as usize] }).collect()
            }
            None => opaque(v, w),
        },
        Op::Cast(CastOp::Zext) => {
            let mut x = sub(rw, a[0])?;
            x.resize(w as usize, Bit::Zero);
            x
        }
        Op::Cast(CastOp::Trunc) => {
            let mut x = sub(rw, a[0])?;
            x.truncate(w as usize);
            x
        }
        _ => opaque(v, w),
    })
}

fn bit_provenance(rw: &mut Rewriter, v: Value) -> Option<Value> {
    let ty = rw.f.ty(v);
    let w = ty.bits();
    let bs = bits(rw, v, 8)?;
    if bs.iter().all(|b| matches!(b, Bit::Zero | Bit::One)) {
        let c = bs.iter().enumerate().fold(0u64, |acc, (i, b)| acc | ((*b == Bit::One) as u64) << i);
        let r = rw.konst(ty, c);
        return fired(rw, "bit-provenance", r);
    }
    // A prefix copy of one source followed by zeros.
    let Bit::Src(src, 0) = bs[0] else { return None };
    if src == v {
        return None;
    }
    let n = bs.iter().take_while(|b| matches!(b, Bit::Src(s, _) if *s == src)).count();
    if !bs[..n].iter().enumerate().all(|(i, b)| *b == Bit::Src(src, i as u8)) || !bs[n..].iter().all(|b| *b == Bit::Zero) {
        return None;
    }
    let sty = rw.f.ty(src);
    let sw = sty.bits();
    if let Some((Op::Cast(_), a)) = inst(rw, v) {
        if a[0] == src {
            return None;
        }
    }
    let r = if n as u32 == w && sw == w {
        src
    } else if n as u32 == sw && sw < w {
        rw.build(ty, Op::Cast(CastOp::Zext), vec![src])
    } else if n as u32 == w && sw > w {
        rw.build(ty, Op::Cast(CastOp::Trunc), vec![src])
    } else {
        // Already in canonical masked form?
        if let Some((Op::Bin(BinOp::And), a)) = inst(rw, v) {
            if a[0] == src && k(rw, a[1]).is_some() {
                return None;
            }
        }
        let base = if sw > w {
            rw.build(ty, Op::Cast(CastOp::Trunc), vec![src])
        } else if sw < w {
            rw.build(ty, Op::Cast(CastOp::Zext), vec![src])
        } else {
            src
        };
        let mk = rw.konst(ty, mask(n as u32));
        rw.build(ty, Op::Bin(BinOp::And), vec![base, mk])
    };
    fired(rw, "bit-provenance", r)
}
