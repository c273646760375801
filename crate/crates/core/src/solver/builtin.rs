//! In-process search backend.
//!
//! Variable widths are first narrowed to the bits the root can depend on.
//! If the narrowed space has at most `EXHAUSTIVE_BITS` bits it is
//! enumerated, which makes Unsat answers complete; otherwise a fixed number
//! of seeded samples is tried and the search reports Sat or Unknown.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::expr::{BvExpr, Node};
use super::{Query, SolverBackend, SolverResult, UnknownReason};
use crate::ir::{mask, BinOp, CastOp, UnOp};

pub const EXHAUSTIVE_BITS: u32 = 20;
pub const RANDOM_SAMPLES: u32 = 1 << 16;

#[derive(Clone, Debug)]
pub struct BuiltinBackend {
    pub exhaustive_bits: u32,
    pub samples: u32,
    pub seed: u64,
}

impl Default for BuiltinBackend {
    fn default() -> Self {
        BuiltinBackend { exhaustive_bits: EXHAUSTIVE_BITS, samples: RANDOM_SAMPLES, seed: 0x5eed }
    }
}

fn low_fill(d: u64) -> u64 {
    if d == 0 {
        0
    } else {
        u64::MAX >> d.leading_zeros()
    }
}

/// For each variable, the bits of its value that can influence the root.
pub fn demanded_var_bits(e: &BvExpr) -> Vec<u64> {
    let nodes = e.nodes();
    let mut d = vec![0u64; nodes.len()];
    d[e.root() as usize] = mask(e.width());
    let mut out = vec![0u64; e.vars().len()];
    let konst = |k: u32| match nodes[k as usize].0 {
        Node::Const(c) => Some(c),
        _ => None,
    };
    for i in (0..nodes.len()).rev() {
        let dm = d[i];
        if dm == 0 {
            continue;
        }
        let (n, w) = nodes[i];
        let m = mask(w);
        let mut need = |k: u32, bits: u64| d[k as usize] |= bits & mask(nodes[k as usize].1);
        match n {
            Node::Var(v) => out[v as usize] |= dm,
            Node::Const(_) => {}
            Node::Un(UnOp::Not, a) => need(a, dm),
            Node::Un(UnOp::Neg, a) => need(a, low_fill(dm)),
            Node::Bin(op, a, b) => match op {
                BinOp::Add | BinOp::Sub | BinOp::Mul => {
                    need(a, low_fill(dm));
                    need(b, low_fill(dm));
                }
                BinOp::Xor => {
                    need(a, dm);
                    need(b, dm);
                }
                BinOp::And | BinOp::Or => {
                    // A constant operand fixes some result bits outright.
                    let fixed = |c: u64| if op == BinOp::And { !c } else { c };
                    let ka = konst(a).map(fixed).unwrap_or(0);
                    let kb = konst(b).map(fixed).unwrap_or(0);
                    need(a, dm & !kb);
                    need(b, dm & !ka);
                }
                BinOp::Shl | BinOp::LShr | BinOp::AShr if konst(b).is_some() => {
                    let k = konst(b).unwrap();
                    let bits = if k >= w as u64 {
                        match op {
                            BinOp::AShr => 1u64 << (w - 1),
                            _ => 0,
                        }
                    } else {
                        let k = k as u32;
                        match op {
                            BinOp::Shl => dm >> k,
                            BinOp::LShr => (dm << k) & m,
                            _ => {
                                let sign_src = if k > 0 && dm >> (w - k) != 0 { 1u64 << (w - 1) } else { 0 };
                                ((dm << k) & m) | sign_src
                            }
                        }
                    };
                    need(a, bits);
                }
                _ => {
                    need(a, m);
                    need(b, m);
                }
            },
            Node::Icmp(_, a, b) => {
                need(a, u64::MAX);
                need(b, u64::MAX);
            }
            Node::Cast(op, a) => {
                let from = nodes[a as usize].1;
                let fm = mask(from);
                let bits = match op {
                    CastOp::Trunc => dm,
                    CastOp::Zext => dm & fm,
                    CastOp::Sext => (dm & fm) | if dm & !fm != 0 { 1u64 << (from - 1) } else { 0 },
                };
                need(a, bits);
            }
            Node::Ite(c, a, b) => {
                need(c, 1);
                need(a, dm);
                need(b, dm);
            }
        }
    }
    out
}

/// Interesting values for random search: edge cases plus constants that
/// occur in the expression and their neighbours.
fn seeds(e: &BvExpr) -> Vec<u64> {
    let mut v = vec![0, 1, 2, u64::MAX, u64::MAX - 1, 0x80, 0x7f, 0x8000_0000, 0x7fff_ffff, 1 << 63];
    for &(n, _) in e.nodes() {
        if let Node::Const(c) = n {
            v.extend([c, c.wrapping_add(1), c.wrapping_sub(1), c.wrapping_neg()]);
        }
    }
    v.sort_unstable();
    v.dedup();
    v
}

impl BuiltinBackend {
    fn search(&self, q: &Query) -> SolverResult {
        let e = q.expr;
        let accept = |r: u64| q.exclude.map_or(true, |x| r != x);
        let nv = e.vars().len();
        let mut scratch = vec![0u64; e.nodes().len()];
        let mut vals = vec![0u64; nv];
        if nv == 0 {
            let r = e.eval_into(&vals, &mut scratch);
            return if accept(r) { SolverResult::Sat { model: vec![], value: r } } else { SolverResult::Unsat };
        }
        let demand = demanded_var_bits(e);
        let eff: Vec<u32> = demand.iter().map(|&d| 64 - d.leading_zeros()).collect();
        let total: u32 = eff.iter().sum();
        let start = Instant::now();
        let timed_out = |i: u64| i % 4096 == 0 && q.timeout.is_some_and(|t| start.elapsed() > t);
        if total <= self.exhaustive_bits {
            for i in 0..(1u64 << total) {
                if timed_out(i) {
                    return SolverResult::Unknown(UnknownReason::Timeout);
                }
                let mut rest = i;
                for (k, &b) in eff.iter().enumerate() {
                    vals[k] = if b == 0 { 0 } else { rest & mask(b) };
                    rest = rest.checked_shr(b).unwrap_or(0);
                }
                let r = e.eval_into(&vals, &mut scratch);
                if accept(r) {
                    return SolverResult::Sat { model: self.model(e, &vals), value: r };
                }
            }
            return SolverResult::Unsat;
        }
        let pool = seeds(e);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ q.salt);
        for i in 0..self.samples as u64 {
            if timed_out(i) {
                return SolverResult::Unknown(UnknownReason::Timeout);
            }
            for (k, slot) in vals.iter_mut().enumerate() {
                let raw = match rng.gen_range(0..4) {
                    0 => pool[rng.gen_range(0..pool.len())],
                    1 => rng.gen_range(0..64u64),
                    _ => rng.gen(),
                };
                *slot = raw & mask(e.vars()[k].1);
            }
            let r = e.eval_into(&vals, &mut scratch);
            if accept(r) {
                return SolverResult::Sat { model: self.model(e, &vals), value: r };
            }
        }
        SolverResult::Unknown(UnknownReason::SearchExhausted)
    }

    fn model(&self, e: &BvExpr, vals: &[u64]) -> Vec<(String, u64)> {
        e.vars().iter().zip(vals).map(|((n, w), &v)| (n.clone(), v & mask(*w))).collect()
    }
}

impl SolverBackend for BuiltinBackend {
    fn name(&self) -> &str {
        "builtin"
    }

    fn solve(&self, q: &Query) -> SolverResult {
        self.search(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::Pred;
    use crate::solver::expr::ExprBuilder;

    #[test]
    fn masked_operands_demand_few_bits() {
        let mut b = ExprBuilder::new();
        let x = b.var("x", 64);
        let y = b.var("y", 64);
        let k = b.konst(0xf, 64);
        let xm = b.bin(BinOp::And, x, k);
        let t = b.cast(CastOp::Trunc, y, 8);
        let z = b.cast(CastOp::Zext, t, 64);
        let s = b.bin(BinOp::Add, xm, z);
        let e = b.finish(s);
        assert_eq!(demanded_var_bits(&e), vec![0xf, 0xff]);
    }

    #[test]
    fn narrow_space_is_exhaustive() {
        let mut b = ExprBuilder::new();
        let x = b.var("x", 64);
        let k = b.konst(1, 64);
        let l = b.bin(BinOp::And, x, k);
        let z = b.konst(0, 64);
        let c = b.icmp(Pred::Eq, l, z);
        let t = b.konst(0x1010, 64);
        let f = b.konst(0x1020, 64);
        let r = b.ite(c, t, f);
        let e = b.finish(r);
        let be = BuiltinBackend::default();
        let q = Query { expr: &e, exclude: Some(0x1010), timeout: None, salt: 0 };
        assert!(matches!(be.solve(&q), SolverResult::Sat { value: 0x1020, .. }));
    }

    #[test]
    fn wide_space_never_reports_unsat() {
        let mut b = ExprBuilder::new();
        let x = b.var("x", 64);
        let y = b.var("y", 64);
        let a = b.bin(BinOp::And, x, y);
        let o = b.bin(BinOp::Or, x, y);
        let l = b.bin(BinOp::Add, a, o);
        let s = b.bin(BinOp::Add, x, y);
        let c = b.icmp(Pred::Eq, l, s);
        let e = b.finish(c);
        let be = BuiltinBackend { samples: 1000, ..Default::default() };
        let q = Query { expr: &e, exclude: Some(1), timeout: None, salt: 0 };
        assert_eq!(be.solve(&q), SolverResult::Unknown(UnknownReason::SearchExhausted));
    }
}
