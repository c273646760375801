//! Bit-vector queries over sliced next-pc expressions.

pub mod builtin;
pub mod cache;
pub mod expr;
pub mod external;
pub mod smtlib;

use std::fmt;
use std::time::Duration;

use thiserror::Error;

pub use builtin::BuiltinBackend;
pub use cache::{cache_key, SolverCache};
pub use expr::{extract_candidate, BvExpr, ConstPool, ExprBuilder, ExtractError, Node, NodeId};
pub use external::ExternalBackend;
pub use smtlib::emit_smtlib;

pub struct Query<'a> {
    pub expr: &'a BvExpr,
    /// Model must evaluate to something other than this.
    pub exclude: Option<u64>,
    pub timeout: Option<Duration>,
    /// Mixed into randomized search so the two queries sample differently.
    pub salt: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum UnknownReason {
    Timeout,
    /// Randomized search found nothing; says nothing about satisfiability.
    SearchExhausted,
    Unsupported(String),
    Backend(String),
}

impl fmt::Display for UnknownReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnknownReason::Timeout => f.write_str("timeout"),
            UnknownReason::SearchExhausted => f.write_str("search budget exhausted"),
            UnknownReason::Unsupported(s) => write!(f, "unsupported: {s}"),
            UnknownReason::Backend(s) => write!(f, "backend: {s}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SolverResult {
    /// `model` assigns every variable; `value` is the expression under it.
    Sat { model: Vec<(String, u64)>, value: u64 },
    Unsat,
    Unknown(UnknownReason),
}

pub trait SolverBackend: Send + Sync {
    fn name(&self) -> &str;
    fn solve(&self, q: &Query) -> SolverResult;
}

/// Backends tried in order until one gives a definite answer.
pub struct Portfolio(pub Vec<Box<dyn SolverBackend>>);

impl Portfolio {
    /// The builtin search, followed by z3 when one is on `PATH`.
    pub fn standard() -> Portfolio {
        let mut v: Vec<Box<dyn SolverBackend>> = vec![Box::new(BuiltinBackend::default())];
        if let Some(z) = ExternalBackend::find_z3() {
            v.push(Box::new(z));
        }
        Portfolio(v)
    }
}

impl SolverBackend for Portfolio {
    fn name(&self) -> &str {
        "portfolio"
    }

    fn solve(&self, q: &Query) -> SolverResult {
        let mut last = SolverResult::Unknown(UnknownReason::Unsupported("no backend".into()));
        for b in &self.0 {
            last = b.solve(q);
            if !matches!(last, SolverResult::Unknown(_)) {
                break;
            }
        }
        last
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Uniqueness {
    ProvenOpaque(u64),
    NotOpaque(u64, u64),
    Unknown(UnknownReason),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SolverError {
    #[error("expression has width {0}, expected 64")]
    Width(u32),
    #[error("first query unsatisfiable: the expression has no value")]
    NoModel,
}

/// Check a reported model against direct evaluation. Protects against
/// misparsed or wrong backend output.
fn confirmed(expr: &BvExpr, r: SolverResult) -> SolverResult {
    if let SolverResult::Sat { model, value } = &r {
        let vals: Vec<u64> = expr
            .vars()
            .iter()
            .map(|(n, _)| model.iter().find(|(m, _)| m == n).map_or(0, |p| p.1))
            .collect();
        if expr.eval(&vals) != *value {
            return SolverResult::Unknown(UnknownReason::Backend("model does not reproduce value".into()));
        }
    }
    r
}

/// Two queries: find any value v0, then any value other than v0.
pub fn prove_unique(
    expr: &BvExpr,
    backend: &dyn SolverBackend,
    timeout: Option<Duration>,
) -> Result<Uniqueness, SolverError> {
    if expr.width() != 64 {
        return Err(SolverError::Width(expr.width()));
    }
    if let Some(c) = expr.as_const() {
        return Ok(Uniqueness::ProvenOpaque(c));
    }
    let q1 = Query { expr, exclude: None, timeout, salt: 1 };
    let v0 = match confirmed(expr, backend.solve(&q1)) {
        SolverResult::Sat { value, .. } => value,
        SolverResult::Unsat => return Err(SolverError::NoModel),
        SolverResult::Unknown(r) => return Ok(Uniqueness::Unknown(r)),
    };
    let q2 = Query { expr, exclude: Some(v0), timeout, salt: 2 };
    Ok(match confirmed(expr, backend.solve(&q2)) {
        SolverResult::Unsat => Uniqueness::ProvenOpaque(v0),
        SolverResult::Sat { value, .. } => Uniqueness::NotOpaque(v0, value),
        SolverResult::Unknown(r) => Uniqueness::Unknown(r),
    })
}

/// `prove_unique` behind a cache of definite verdicts.
pub fn prove_unique_cached(
    expr: &BvExpr,
    backend: &dyn SolverBackend,
    timeout: Option<Duration>,
    cache: &mut SolverCache,
) -> Result<Uniqueness, SolverError> {
    let key = cache_key(expr);
    if let Some(v) = cache.lookup(&key) {
        return Ok(v);
    }
    let v = prove_unique(expr, backend, timeout)?;
    cache.store(&key, &v);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{BinOp, Pred};

    fn mba_ite(bits: u32) -> BvExpr {
        let mut b = ExprBuilder::new();
        let x = b.var("x", bits);
        let y = b.var("y", bits);
        let a = b.bin(BinOp::And, x, y);
        let o = b.bin(BinOp::Or, x, y);
        let l = b.bin(BinOp::Add, a, o);
        let s = b.bin(BinOp::Add, x, y);
        let c = b.icmp(Pred::Eq, l, s);
        let t = b.konst(0x1010, 64);
        let f = b.konst(0x1020, 64);
        let r = b.ite(c, t, f);
        b.finish(r)
    }

    #[test]
    fn constant_is_opaque() {
        let mut b = ExprBuilder::new();
        let c = b.konst(0x1465C8B69, 64);
        let e = b.finish(c);
        let r = prove_unique(&e, &BuiltinBackend::default(), None).unwrap();
        assert_eq!(r, Uniqueness::ProvenOpaque(0x1465C8B69));
    }

    #[test]
    fn narrow_mba_is_proven_by_enumeration() {
        let r = prove_unique(&mba_ite(8), &BuiltinBackend::default(), None).unwrap();
        assert_eq!(r, Uniqueness::ProvenOpaque(0x1010));
    }

    #[test]
    fn wide_mba_is_unknown_to_sampling() {
        let be = BuiltinBackend { samples: 2000, ..Default::default() };
        let r = prove_unique(&mba_ite(64), &be, None).unwrap();
        assert!(matches!(r, Uniqueness::Unknown(_)));
    }

    #[test]
    fn real_branch_has_two_values() {
        let mut b = ExprBuilder::new();
        let x = b.var("x", 64);
        let k = b.konst(5, 64);
        let c = b.icmp(Pred::Slt, x, k);
        let t = b.konst(0x1010, 64);
        let f = b.konst(0x1020, 64);
        let r = b.ite(c, t, f);
        let e = b.finish(r);
        let r = prove_unique(&e, &BuiltinBackend::default(), None).unwrap();
        let Uniqueness::NotOpaque(a, c) = r else { panic!("{r:?}") };
        let mut both = [a, c];
        both.sort();
        assert_eq!(both, [0x1010, 0x1020]);
    }

    #[test]
    fn narrow_expression_is_rejected() {
        let mut b = ExprBuilder::new();
        let x = b.var("x", 8);
        let e = b.finish(x);
        assert_eq!(prove_unique(&e, &BuiltinBackend::default(), None), Err(SolverError::Width(8)));
    }

    struct Liar;
    impl SolverBackend for Liar {
        fn name(&self) -> &str {
            "liar"
        }
        fn solve(&self, _: &Query) -> SolverResult {
            SolverResult::Sat { model: vec![("x".into(), 0)], value: 7 }
        }
    }

    #[test]
    fn unreproducible_models_are_not_trusted() {
        let mut b = ExprBuilder::new();
        let x = b.var("x", 64);
        let e = b.finish(x);
        assert!(matches!(prove_unique(&e, &Liar, None).unwrap(), Uniqueness::Unknown(_)));
    }
}
