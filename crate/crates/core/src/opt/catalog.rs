//! Declarative rewrite rules.
//!
//! Each rule is a pair of s-expressions over variables `x y z`, constant
//! captures `c1 c2 c3` and integer literals (sign-extended to the operand
//! width). A rule is enabled only after both sides agree under exhaustive
//! evaluation at small widths and on random 64-bit samples.

use std::fmt;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::simplify::Rewriter;
use crate::ir::{mask, BinOp, Op, Pred, Ty, UnOp, Value};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Pat {
    Var(u8),
    Const(u8),
    Lit(i64),
    Bin(BinOp, Box<Pat>, Box<Pat>),
    Un(UnOp, Box<Pat>),
    Icmp(Pred, Box<Pat>, Box<Pat>),
    Select(Box<Pat>, Box<Pat>, Box<Pat>),
}

impl fmt::Display for Pat {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        match self {
            Pat::Var(i) => write!(f, "{}", ["x", "y", "z"][*i as usize]),
            Pat::Const(i) => write!(f, "c{}", i + 1),
            Pat::Lit(k) => write!(f, "{k}"),
            Pat::Bin(op, a, b) => write!(f, "({} {a} {b})", op.name()),
            Pat::Un(UnOp::Not, a) => write!(f, "(not {a})"),
            Pat::Un(UnOp::Neg, a) => write!(f, "(neg {a})"),
            Pat::Icmp(p, a, b) => write!(f, "(icmp.{} {a} {b})", p.name()),
            Pat::Select(c, a, b) => write!(f, "(select {c} {a} {b})"),
        }
    }
}

#[derive(Debug)]
pub struct PatError(pub String);

pub fn parse_pat(s: &str) -> Result<Pat, PatError> {
    let toks: Vec<String> = s.replace('(', " ( ").replace(')', " ) ").split_whitespace().map(String::from).collect();
    let mut pos = 0;
    let p = parse_tok(&toks, &mut pos)?;
    if pos != toks.len() {
        return Err(PatError(format!("trailing input in `{s}`")));
    }
    Ok(p)
}

fn parse_tok(t: &[String], pos: &mut usize) -> Result<Pat, PatError> {
    let tok = t.get(*pos).ok_or_else(|| PatError("unexpected end".into()))?.clone();
    *pos += 1;
    if tok != "(" {
        return match tok.as_str() {
            "x" => Ok(Pat::Var(0)),
            "y" => Ok(Pat::Var(1)),
            "z" => Ok(Pat::Var(2)),
            "c1" => Ok(Pat::Const(0)),
            "c2" => Ok(Pat::Const(1)),
            "c3" => Ok(Pat::Const(2)),
            _ => tok.parse::<i64>().map(Pat::Lit).map_err(|_| PatError(format!("bad atom `{tok}`"))),
        };
    }
    let head = t.get(*pos).ok_or_else(|| PatError("unexpected end".into()))?.clone();
    *pos += 1;
    let mut args = Vec::new();
    while t.get(*pos).map(String::as_str) != Some(")") {
        if *pos >= t.len() {
            return Err(PatError("unbalanced parentheses".into()));
        }
        args.push(parse_tok(t, pos)?);
    }
    *pos += 1;
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(PatError(format!("`{head}` takes {n} operands")))
        }
    };
    let mut it = args.clone().into_iter().map(Box::new);
    if let Some(op) = BinOp::ALL.iter().find(|o| o.name() == head) {
        arity(2)?;
        return Ok(Pat::Bin(*op, it.next().unwrap(), it.next().unwrap()));
    }
    if let Some(p) = head.strip_prefix("icmp.").and_then(|n| Pred::ALL.iter().find(|p| p.name() == n)) {
        arity(2)?;
        return Ok(Pat::Icmp(*p, it.next().unwrap(), it.next().unwrap()));
    }
    match head.as_str() {
        "not" | "neg" => {
            arity(1)?;
            let op = if head == "not" { UnOp::Not } else { UnOp::Neg };
            Ok(Pat::Un(op, it.next().unwrap()))
        }
        "select" => {
            arity(3)?;
            Ok(Pat::Select(it.next().unwrap(), it.next().unwrap(), it.next().unwrap()))
        }
        _ => Err(PatError(format!("unknown operator `{head}`"))),
    }
}

impl Pat {
    pub fn count(&self, vars: &mut u8, consts: &mut u8) {
        match self {
            Pat::Var(i) => *vars = (*vars).max(i + 1),
            Pat::Const(i) => *consts = (*consts).max(i + 1),
            Pat::Lit(_) => {}
            Pat::Bin(_, a, b) | Pat::Icmp(_, a, b) => {
                a.count(vars, consts);
                b.count(vars, consts);
            }
            Pat::Un(_, a) => a.count(vars, consts),
            Pat::Select(c, a, b) => {
                c.count(vars, consts);
                a.count(vars, consts);
                b.count(vars, consts);
            }
        }
    }

    /// Evaluate with every variable and constant `bits` wide.
    pub fn eval(&self, env: &[u64], consts: &[u64], bits: u32) -> u64 {
        let m = mask(bits);
        match self {
            Pat::Var(i) => env[*i as usize] & m,
            Pat::Const(i) => consts[*i as usize] & m,
            Pat::Lit(k) => *k as u64 & m,
            Pat::Bin(op, a, b) => op.eval(a.eval(env, consts, bits), b.eval(env, consts, bits), bits).unwrap_or(0),
            Pat::Un(op, a) => op.eval(a.eval(env, consts, bits), bits),
            Pat::Icmp(p, a, b) => p.eval(a.eval(env, consts, bits), b.eval(env, consts, bits), bits) as u64,
            Pat::Select(c, a, b) => {
                if c.eval(env, consts, bits) & 1 == 1 {
                    a.eval(env, consts, bits)
                } else {
                    b.eval(env, consts, bits)
                }
            }
        }
    }

    pub fn is_bool(&self) -> bool {
        matches!(self, Pat::Icmp(..))
    }
}

#[derive(Clone, Debug)]
pub struct Rule {
    pub name: &'static str,
    pub lhs: Pat,
    pub rhs: Pat,
    /// Mixed boolean-arithmetic identity; can be switched off.
    pub mba: bool,
    pub validated: bool,
}

const RULES: &[(&str, &str, &str, bool)] = &[
    ("add-zero", "(add x 0)", "x", false),
    ("sub-zero", "(sub x 0)", "x", false),
    ("mul-one", "(mul x 1)", "x", false),
    ("mul-zero", "(mul x 0)", "0", false),
    ("and-zero", "(and x 0)", "0", false),
    ("and-ones", "(and x -1)", "x", false),
    ("or-zero", "(or x 0)", "x", false),
    ("or-ones", "(or x -1)", "-1", false),
    ("xor-zero", "(xor x 0)", "x", false),
    ("xor-self", "(xor x x)", "0", false),
    ("and-self", "(and x x)", "x", false),
    ("or-self", "(or x x)", "x", false),
    ("sub-self", "(sub x x)", "0", false),
    ("or-not-self", "(or x (not x))", "-1", false),
    ("and-not-self", "(and x (not x))", "0", false),
    ("xor-not-self", "(xor x (not x))", "-1", false),
    ("shl-zero", "(shl x 0)", "x", false),
    ("lshr-zero", "(lshr x 0)", "x", false),
    ("ashr-zero", "(ashr x 0)", "x", false),
    ("zero-shl", "(shl 0 x)", "0", false),
    ("zero-lshr", "(lshr 0 x)", "0", false),
    ("double-not", "(not (not x))", "x", false),
    ("double-neg", "(neg (neg x))", "x", false),
    ("xor-ones-is-not", "(xor x -1)", "(not x)", false),
    ("zero-sub-is-neg", "(sub 0 x)", "(neg x)", false),
    ("mul-minus-one", "(mul x -1)", "(neg x)", false),
    ("not-plus-one", "(add (not x) 1)", "(neg x)", false),
    ("neg-of-not", "(neg (not x))", "(add x 1)", false),
    ("add-neg", "(add x (neg y))", "(sub x y)", false),
    ("sub-neg", "(sub x (neg y))", "(add x y)", false),
    ("sub-const", "(sub x c1)", "(add x (neg c1))", false),
    ("add-self", "(add x x)", "(shl x 1)", false),
    ("add-add-const", "(add (add x c1) c2)", "(add x (add c1 c2))", false),
    ("xor-xor-const", "(xor (xor x c1) c2)", "(xor x (xor c1 c2))", false),
    ("and-and-const", "(and (and x c1) c2)", "(and x (and c1 c2))", false),
    ("or-or-const", "(or (or x c1) c2)", "(or x (or c1 c2))", false),
    ("mul-mul-const", "(mul (mul x c1) c2)", "(mul x (mul c1 c2))", false),
    ("add-sub-cancel", "(add (sub x y) y)", "x", false),
    ("sub-add-cancel", "(sub (add x y) y)", "x", false),
    ("xor-cancel", "(xor (xor x y) y)", "x", false),
    ("de-morgan-and", "(and (not x) (not y))", "(not (or x y))", false),
    ("de-morgan-or", "(or (not x) (not y))", "(not (and x y))", false),
    ("not-xor", "(xor (not x) y)", "(not (xor x y))", false),
    ("and-or-absorb", "(and x (or x y))", "x", false),
    ("or-and-absorb", "(or x (and x y))", "x", false),
    ("xor-select", "(or (and x (not y)) (and (not x) y))", "(xor x y)", false),
    ("and-or-to-xor", "(xor (and x y) (or x y))", "(xor x y)", false),
    ("sub-and", "(sub x (and x y))", "(and x (not y))", false),
    ("icmp-eq-sub", "(icmp.eq (sub x y) 0)", "(icmp.eq x y)", false),
    ("icmp-ne-sub", "(icmp.ne (sub x y) 0)", "(icmp.ne x y)", false),
    ("icmp-eq-xor", "(icmp.eq (xor x y) 0)", "(icmp.eq x y)", false),
    ("icmp-ne-xor", "(icmp.ne (xor x y) 0)", "(icmp.ne x y)", false),
    ("icmp-eq-self", "(icmp.eq x x)", "1", false),
    ("icmp-ne-self", "(icmp.ne x x)", "0", false),
    ("icmp-ult-self", "(icmp.ult x x)", "0", false),
    ("icmp-slt-self", "(icmp.slt x x)", "0", false),
    ("icmp-ule-self", "(icmp.ule x x)", "1", false),
    ("icmp-sle-self", "(icmp.sle x x)", "1", false),
    ("icmp-eq-not", "(icmp.eq (not x) (not y))", "(icmp.eq x y)", false),
    ("icmp-eq-neg", "(icmp.eq (neg x) (neg y))", "(icmp.eq x y)", false),
    ("icmp-eq-add", "(icmp.eq (add x z) (add y z))", "(icmp.eq x y)", false),
    ("select-not-cond", "(select (not x) y z)", "(select x z y)", false),
    ("mba-and-plus-or", "(add (and x y) (or x y))", "(add x y)", true),
    ("mba-xor-plus-twice-and", "(add (xor x y) (shl (and x y) 1))", "(add x y)", true),
    ("mba-xor-plus-and-times-two", "(add (xor x y) (mul (and x y) 2))", "(add x y)", true),
    ("mba-or-minus-and", "(sub (or x y) (and x y))", "(xor x y)", true),
    ("mba-sum-minus-and", "(sub (add x y) (and x y))", "(or x y)", true),
    ("mba-sum-minus-or", "(sub (add x y) (or x y))", "(and x y)", true),
    ("mba-plus-not", "(add x (not x))", "-1", true),
    ("mba-andnot-plus", "(add (and x (not y)) y)", "(or x y)", true),
    ("mba-xor-minus-twice-andnot", "(sub (xor x y) (shl (and (not x) y) 1))", "(sub x y)", true),
    ("mba-consecutive-parity", "(and (mul x (add x 1)) 1)", "0", true),
    ("mba-consecutive-parity-rev", "(and (mul (add x 1) x) 1)", "0", true),
];

/// The catalog with validation results. Computed once per process.
pub fn rules() -> &'static [Rule] {
    static CELL: OnceLock<Vec<Rule>> = OnceLock::new();
    CELL.get_or_init(|| {
        RULES
            .iter()
            .map(|&(name, l, r, mba)| {
                let lhs = parse_pat(l).unwrap_or_else(|e| panic!("rule {name}: {}", e.0));
                let rhs = parse_pat(r).unwrap_or_else(|e| panic!("rule {name}: {}", e.0));
                let mut rule = Rule { name, lhs, rhs, mba, validated: false };
                rule.validated = validate(&rule).is_ok();
                rule
            })
            .collect()
    })
}

/// A counterexample to a rule: bit width, variable values, constant values.
pub type Counterexample = (u32, Vec<u64>, Vec<u64>);

fn odometer(n: usize, base: u64, mut f: impl FnMut(&[u64]) -> bool) -> bool {
    let mut cur = vec![0u64; n];
    loop {
        if !f(&cur) {
            return false;
        }
        let mut i = 0;
        loop {
            if i == n {
                return true;
            }
            cur[i] += 1;
            if cur[i] < base {
                break;
            }
            cur[i] = 0;
            i += 1;
        }
    }
}

/// Check that both sides agree: exhaustively at the widest small width that
/// keeps the enumeration near 2^18 points (16 bits for single-variable
/// rules), at width 1, and on random 64-bit points.
pub fn validate(rule: &Rule) -> Result<(), Counterexample> {
    let (mut nv, mut nc) = (0u8, 0u8);
    rule.lhs.count(&mut nv, &mut nc);
    rule.rhs.count(&mut nv, &mut nc);
    let n = (nv + nc) as usize;
    let lhs_bits = |w: u32| if rule.lhs.is_bool() { 1 } else { w };
    let mut widths = vec![1u32];
    let small = match n {
        0 | 1 => 16,
        2 => 8,
        3 => 6,
        _ => 4,
    };
    widths.push(small);
    if small != 8 && n <= 2 {
        widths.push(8);
    }
    for w in widths {
        let mut bad = None;
        odometer(n, 1u64 << w, |vals| {
            let (env, cs) = vals.split_at(nv as usize);
            let ok = rule.lhs.eval(env, cs, w) & mask(lhs_bits(w)) == rule.rhs.eval(env, cs, w) & mask(lhs_bits(w));
            if !ok {
                bad = Some((w, env.to_vec(), cs.to_vec()));
            }
            ok
        });
        if let Some(b) = bad {
            return Err(b);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..4096 {
        let vals: Vec<u64> = (0..n)
            .map(|_| match rng.gen_range(0..3) {
                0 => rng.gen_range(0..70),
                _ => rng.gen(),
            })
            .collect();
        let (env, cs) = vals.split_at(nv as usize);
        if rule.lhs.eval(env, cs, 64) & mask(lhs_bits(64)) != rule.rhs.eval(env, cs, 64) & mask(lhs_bits(64)) {
            return Err((64, env.to_vec(), cs.to_vec()));
        }
    }
    Ok(())
}

type Binds = [Option<Value>; 6];

fn matches(rw: &Rewriter, p: &Pat, v: Value, b: &mut Binds) -> bool {
    let f = &*rw.f;
    match p {
        Pat::Var(i) => match b[*i as usize] {
            Some(x) => x == v,
            None => {
                b[*i as usize] = Some(v);
                true
            }
        },
        Pat::Const(i) => {
            if f.as_const(v).is_none() {
                return false;
            }
            match b[3 + *i as usize] {
                Some(x) => x == v,
                None => {
                    b[3 + *i as usize] = Some(v);
                    true
                }
            }
        }
        Pat::Lit(k) => f.as_const(v) == Some(*k as u64 & f.ty(v).mask()),
        Pat::Bin(op, pa, pb) => {
            let Some(Op::Bin(o)) = f.op(v) else { return false };
            if o != op {
                return false;
            }
            let (x, y) = (f.args(v)[0], f.args(v)[1]);
            two(rw, pa, pb, x, y, b, op.commutative())
        }
        Pat::Icmp(pred, pa, pb) => {
            let Some(Op::Icmp(q)) = f.op(v) else { return false };
            let (x, y) = (f.args(v)[0], f.args(v)[1]);
            if q == pred {
                let sym = matches!(pred, Pred::Eq | Pred::Ne);
                two(rw, pa, pb, x, y, b, sym)
            } else if q.swapped() == *pred {
                two(rw, pa, pb, y, x, b, false)
            } else {
                false
            }
        }
        Pat::Un(op, pa) => {
            let Some(Op::Un(o)) = f.op(v) else { return false };
            o == op && matches(rw, pa, f.args(v)[0], b)
        }
        Pat::Select(pc, pa, pb) => {
            if f.op(v) != Some(&Op::Select) {
                return false;
            }
            let a = f.args(v);
            let (c, x, y) = (a[0], a[1], a[2]);
            matches(rw, pc, c, b) && matches(rw, pa, x, b) && matches(rw, pb, y, b)
        }
    }
}

fn two(rw: &Rewriter, pa: &Pat, pb: &Pat, x: Value, y: Value, b: &mut Binds, commute: bool) -> bool {
    let saved = *b;
    if matches(rw, pa, x, b) && matches(rw, pb, y, b) {
        return true;
    }
    *b = saved;
    if commute && matches(rw, pa, y, b) && matches(rw, pb, x, b) {
        return true;
    }
    *b = saved;
    false
}

/// Type of the operands an icmp template compares.
fn operand_ty(rw: &Rewriter, p: &Pat, b: &Binds) -> Option<Ty> {
    match p {
        Pat::Var(i) => b[*i as usize].map(|v| rw.f.ty(v)),
        Pat::Const(i) => b[3 + *i as usize].map(|v| rw.f.ty(v)),
        Pat::Lit(_) => None,
        Pat::Bin(_, a, c) => operand_ty(rw, a, b).or_else(|| operand_ty(rw, c, b)),
        Pat::Un(_, a) => operand_ty(rw, a, b),
        Pat::Icmp(..) => Some(Ty::I1),
        Pat::Select(_, a, c) => operand_ty(rw, a, b).or_else(|| operand_ty(rw, c, b)),
    }
}

fn build(rw: &mut Rewriter, p: &Pat, b: &Binds, ty: Ty) -> Option<Value> {
    Some(match p {
        Pat::Var(i) => b[*i as usize]?,
        Pat::Const(i) => b[3 + *i as usize]?,
        Pat::Lit(k) => rw.konst(ty, *k as u64),
        Pat::Bin(op, pa, pb) => {
            let x = build(rw, pa, b, ty)?;
            let y = build(rw, pb, b, ty)?;
            if rw.f.ty(x) != ty || rw.f.ty(y) != ty {
                return None;
            }
            rw.build(ty, Op::Bin(*op), vec![x, y])
        }
        Pat::Un(op, pa) => {
            let x = build(rw, pa, b, ty)?;
            rw.build(rw.f.ty(x), Op::Un(*op), vec![x])
        }
        Pat::Icmp(pred, pa, pb) => {
            let oty = operand_ty(rw, pa, b).or_else(|| operand_ty(rw, pb, b))?;
            let x = build(rw, pa, b, oty)?;
            let y = build(rw, pb, b, oty)?;
            rw.build(Ty::I1, Op::Icmp(*pred), vec![x, y])
        }
        Pat::Select(pc, pa, pb) => {
            let c = build(rw, pc, b, Ty::I1)?;
            let x = build(rw, pa, b, ty)?;
            let y = build(rw, pb, b, ty)?;
            if rw.f.ty(c) != Ty::I1 {
                return None;
            }
            rw.build(ty, Op::Select, vec![c, x, y])
        }
    })
}

/// Try every enabled rule on `v`.
pub fn apply(rw: &mut Rewriter, v: Value) -> Option<Value> {
    let op = rw.f.op(v)?;
    if !matches!(op, Op::Bin(_) | Op::Un(_) | Op::Icmp(_) | Op::Select) {
        return None;
    }
    let ty = rw.f.ty(v);
    let mba = rw.ctx.config.mba_rules;
    for r in rules() {
        if !r.validated || (r.mba && !mba) {
            continue;
        }
        let mut b: Binds = [None; 6];
        if !matches(rw, &r.lhs, v, &mut b) {
            continue;
        }
        // A literal root takes the matched value's type; a bare capture
        // must already have it.
        if let Some(out) = build(rw, &r.rhs, &b, ty) {
            if rw.f.ty(out) == ty {
                rw.ctx.fired(r.name);
                return Some(out);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_rule_validates() {
        for r in rules() {
            assert!(r.validated, "rule {} failed: {:?}", r.name, validate(r));
        }
        assert!(rules().len() >= 40);
    }

    #[test]
    fn a_false_rule_is_rejected() {
        let bad = Rule {
            name: "bogus",
            lhs: parse_pat("(add x y)").unwrap(),
            rhs: parse_pat("(or x y)").unwrap(),
            mba: false,
            validated: false,
        };
        let (w, env, _) = validate(&bad).unwrap_err();
        assert_eq!((env[0] & env[1]) & mask(w) != 0, true);
        let outside = Rule {
            name: "outside",
            lhs: parse_pat("(sub (shl (or x y) 1) (xor x y))").unwrap(),
            rhs: parse_pat("(add x y)").unwrap(),
            mba: true,
            validated: false,
        };
        assert!(validate(&outside).is_ok());
    }

    #[test]
    fn patterns_print_back() {
        for &(_, l, r, _) in RULES {
            assert_eq!(parse_pat(l).unwrap().to_string(), l.replace("icmp.", "icmp."));
            assert_eq!(parse_pat(r).unwrap().to_string(), r);
        }
    }

    #[test]
    fn and_plus_or_exhaustive_oracle() {
        for x in 0..256u64 {
            for y in 0..256u64 {
                assert_eq!(((x & y) + (x | y)) & 0xff, (x + y) & 0xff);
                assert_eq!(x ^ x, 0);
                assert_eq!((x | !x) & 0xff, 0xff);
            }
        }
        for x in 0..65536u64 {
            assert_eq!((x * (x + 1)) & 1, 0);
        }
    }
}
