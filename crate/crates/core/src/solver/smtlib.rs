//! SMT-LIB2 text for bit-vector queries, and parsing of solver replies.

use std::fmt::Write;

use super::expr::{BvExpr, Node};
use crate::ir::{BinOp, CastOp, Pred, UnOp};

/// Symbol for a variable. Prefixed so it cannot collide with node names.
pub fn var_symbol(name: &str) -> String {
    let simple = name.chars().all(|c| c.is_ascii_alphanumeric() || "_.-".contains(c));
    if simple {
        format!("v_{name}")
    } else {
        format!("|v_{}|", name.replace(['|', '\\'], "_"))
    }
}

pub fn bv_literal(v: u64, w: u32) -> String {
    if w % 4 == 0 {
        format!("#x{:0>1$x}", v, (w / 4) as usize)
    } else {
        format!("#b{:0>1$b}", v, w as usize)
    }
}

fn bin_name(op: BinOp) -> &'static str {
    match op {
        BinOp::Add => "bvadd",
        BinOp::Sub => "bvsub",
        BinOp::Mul => "bvmul",
        BinOp::UDiv => "bvudiv",
        BinOp::SDiv => "bvsdiv",
        BinOp::And => "bvand",
        BinOp::Or => "bvor",
        BinOp::Xor => "bvxor",
        BinOp::Shl => "bvshl",
        BinOp::LShr => "bvlshr",
        BinOp::AShr => "bvashr",
    }
}

fn pred_name(p: Pred) -> &'static str {
    match p {
        Pred::Eq | Pred::Ne => "=",
        Pred::Ult => "bvult",
        Pred::Ule => "bvule",
        Pred::Ugt => "bvugt",
        Pred::Uge => "bvuge",
        Pred::Slt => "bvslt",
        Pred::Sle => "bvsle",
        Pred::Sgt => "bvsgt",
        Pred::Sge => "bvsge",
    }
}

/// The query text. `result` is asserted equal to the expression; with
/// `exclude` it must also differ from that value.
pub fn emit_smtlib(e: &BvExpr, exclude: Option<u64>) -> String {
    let mut s = String::new();
    s.push_str("(set-logic QF_BV)\n(set-option :produce-models true)\n");
    for (name, w) in e.vars() {
        let _ = writeln!(s, "(declare-fun {} () (_ BitVec {w}))", var_symbol(name));
    }
    let sym = |k: u32| format!("n{k}");
    for (i, &(n, w)) in e.nodes().iter().enumerate() {
        let body = match n {
            Node::Var(v) => var_symbol(&e.vars()[v as usize].0),
            Node::Const(c) => bv_literal(c, w),
            Node::Un(UnOp::Not, a) => format!("(bvnot {})", sym(a)),
            Node::Un(UnOp::Neg, a) => format!("(bvneg {})", sym(a)),
            Node::Bin(op, a, b) => format!("({} {} {})", bin_name(op), sym(a), sym(b)),
            Node::Icmp(p, a, b) => {
                let c = format!("({} {} {})", pred_name(p), sym(a), sym(b));
                let c = if p == Pred::Ne { format!("(not {c})") } else { c };
                format!("(ite {c} #b1 #b0)")
            }
            Node::Cast(op, a) => {
                let from = e.node(a).1;
                match op {
                    CastOp::Zext => format!("((_ zero_extend {}) {})", w - from, sym(a)),
                    CastOp::Sext => format!("((_ sign_extend {}) {})", w - from, sym(a)),
                    CastOp::Trunc => format!("((_ extract {} 0) {})", w - 1, sym(a)),
                }
            }
            Node::Ite(c, a, b) => format!("(ite (= {} #b1) {} {})", sym(c), sym(a), sym(b)),
        };
        let _ = writeln!(s, "(define-fun n{i} () (_ BitVec {w}) {body})");
    }
    let w = e.width();
    let _ = writeln!(s, "(declare-fun result () (_ BitVec {w}))");
    let _ = writeln!(s, "(assert (= result {}))", sym(e.root()));
    if let Some(x) = exclude {
        let _ = writeln!(s, "(assert (not (= result {})))", bv_literal(x, w));
    }
    s.push_str("(check-sat)\n");
    let mut names: Vec<String> = vec!["result".into()];
    names.extend(e.vars().iter().map(|(n, _)| var_symbol(n)));
    let _ = writeln!(s, "(get-value ({}))", names.join(" "));
    s
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Reply {
    Sat(Vec<(String, u64)>),
    Unsat,
    Unknown(String),
}

fn parse_literal(t: &str) -> Option<u64> {
    if let Some(h) = t.strip_prefix("#x") {
        u64::from_str_radix(h, 16).ok()
    } else if let Some(b) = t.strip_prefix("#b") {
        u64::from_str_radix(b, 2).ok()
    } else if let Some(rest) = t.strip_prefix("(_ bv") {
        rest.split_whitespace().next()?.parse().ok()
    } else {
        None
    }
}

/// Parse the output of `(check-sat)` followed by `(get-value ...)`.
pub fn parse_reply(out: &str) -> Reply {
    let mut lines = out.lines().map(str::trim).filter(|l| !l.is_empty());
    let status = lines.next().unwrap_or("");
    match status {
        "unsat" => return Reply::Unsat,
        "sat" => {}
        "" => return Reply::Unknown("no output".into()),
        s => return Reply::Unknown(s.to_string()),
    }
    let rest: String = lines.collect::<Vec<_>>().join(" ");
    let mut model = Vec::new();
    // Pairs look like `(name #x..)` or `(name (_ bv12 64))`.
    let b = rest.as_bytes();
    let mut i = 0;
    let mut depth = 0;
    let mut start = None;
    while i < b.len() {
        match b[i] {
            b'(' => {
                depth += 1;
                if depth == 2 {
                    start = Some(i + 1);
                }
            }
            b')' => {
                if depth == 2 {
                    if let Some(s) = start.take() {
                        let pair = rest[s..i].trim();
                        let (name, val) = match pair.strip_prefix('|') {
                            Some(q) => {
                                let end = q.find('|').unwrap_or(q.len());
                                (format!("|{}|", &q[..end]), q[end + 1..].trim())
                            }
                            None => match pair.split_once(char::is_whitespace) {
                                Some((n, v)) => (n.to_string(), v.trim()),
                                None => (pair.to_string(), ""),
                            },
                        };
                        if let Some(v) = parse_literal(val) {
                            model.push((name, v));
                        }
                    }
                }
                depth -= 1;
            }
            _ => {}
        }
        i += 1;
    }
    Reply::Sat(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::expr::ExprBuilder;

    fn sample() -> BvExpr {
        let mut b = ExprBuilder::new();
        let x = b.var("x", 8);
        let k = b.konst(5, 8);
        let c = b.icmp(Pred::Ult, x, k);
        let t = b.konst(0x1010, 64);
        let f = b.konst(0x1020, 64);
        let r = b.ite(c, t, f);
        b.finish(r)
    }

    #[test]
    fn emission_is_deterministic() {
        let e = sample();
        assert_eq!(emit_smtlib(&e, None), emit_smtlib(&e.clone().normalize(), None));
        let t = emit_smtlib(&e, None);
        assert!(t.contains("(declare-fun v_x () (_ BitVec 8))"));
        assert!(t.contains("(check-sat)"));
        assert!(!t.contains("(assert (not"));
    }

    #[test]
    fn second_query_has_disequality() {
        let t = emit_smtlib(&sample(), Some(0x1010));
        assert!(t.contains("(assert (not (= result #x0000000000001010)))"));
    }

    #[test]
    fn literals() {
        assert_eq!(bv_literal(1, 1), "#b1");
        assert_eq!(bv_literal(0xab, 8), "#xab");
        assert_eq!(bv_literal(5, 3), "#b101");
    }

    #[test]
    fn replies() {
        assert_eq!(parse_reply("unsat\n(error \"model is not available\")\n"), Reply::Unsat);
        assert_eq!(
            parse_reply("sat\n((result #x0000000000001010)\n (v_x #x03))\n"),
            Reply::Sat(vec![("result".into(), 0x1010), ("v_x".into(), 3)])
        );
        assert_eq!(
            parse_reply("sat\n((result (_ bv16 64)) (|v_a b| #b1))\n"),
            Reply::Sat(vec![("result".into(), 16), ("|v_a b|".into(), 1)])
        );
        assert!(matches!(parse_reply("unknown\n"), Reply::Unknown(_)));
    }
}
