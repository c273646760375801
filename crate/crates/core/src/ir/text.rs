//! Textual IR: printer and parser.
//!
//! ```text
//! @stack_m8 = global i64 mirror 0x7fffffff0000
//!
//! define i64 @f(ptr %0, i64 %1) {
//! b0 @0x1000:
//!   %2 = fieldaddr.rax ptr %0
//!   %3 = load i64 %2
//!   %4 = add i64 %3, i64 5
//!   store %2, %4
//!   ret %1
//! }
//! ```
//!
//! Values are numbered in definition order (parameters first), blocks by
//! layout position. Constants are written inline with their type.

use std::collections::HashMap;
use std::fmt::Write;

use thiserror::Error;

use super::state::{field_index, field_name};
use super::{AllocaKind, BinOp, CastOp, Function, Global, Module, Op, Pred, Ty, UnOp, Value, ValueDef};
use super::Block;

fn fmt_const(ty: Ty, c: u64) -> String {
    if c < 4096 {
        format!("{ty} {c}")
    } else {
        format!("{ty} {c:#x}")
    }
}

struct Names {
    vals: HashMap<Value, usize>,
    blocks: HashMap<Block, usize>,
}

impl Names {
    fn of(f: &Function) -> Names {
        let mut vals = HashMap::new();
        for &p in &f.params {
            let n = vals.len();
            vals.insert(p, n);
        }
        for v in f.insts() {
            if f.ty(v) != Ty::Void {
                let n = vals.len();
                vals.insert(v, n);
            }
        }
        let blocks = f.layout.iter().enumerate().map(|(i, &b)| (b, i)).collect();
        Names { vals, blocks }
    }

    fn val(&self, f: &Function, v: Value) -> String {
        match f.values[v.idx()].def {
            ValueDef::Const(c) => fmt_const(f.ty(v), c),
            _ => match self.vals.get(&v) {
                Some(n) => format!("%{n}"),
                None => format!("%dangling{}", v.0),
            },
        }
    }

    fn block(&self, b: Block) -> String {
        match self.blocks.get(&b) {
            Some(n) => format!("b{n}"),
            None => format!("bdangling{}", b.0),
        }
    }
}

fn op_mnemonic(op: &Op) -> String {
    match op {
        Op::Unknown => "unknown".into(),
        Op::Bin(b) => b.name().into(),
        Op::Un(UnOp::Not) => "not".into(),
        Op::Un(UnOp::Neg) => "neg".into(),
        Op::Icmp(p) => format!("icmp.{}", p.name()),
        Op::Select => "select".into(),
        Op::Cast(c) => c.name().into(),
        Op::Phi(_) => "phi".into(),
        Op::FieldAddr(i) => format!("fieldaddr.{}", field_name(*i as usize)),
        Op::Load => "load".into(),
        Op::Store => "store".into(),
        Op::Alloca(AllocaKind::Scalar(t)) => format!("alloca.{t}"),
        Op::Alloca(AllocaKind::State) => "alloca.state".into(),
        Op::GlobalAddr(_) => "globaladdr".into(),
        Op::MemRead => "memread".into(),
        Op::MemWrite => "memwrite".into(),
        Op::Call(_) => "call".into(),
        Op::Br(_) => "br".into(),
        Op::CondBr(..) => "condbr".into(),
        Op::Ret => "ret".into(),
    }
}

pub fn print_function(f: &Function) -> String {
    let n = Names::of(f);
    let mut out = String::new();
    let params: Vec<String> = f.params.iter().map(|&p| format!("{} {}", f.ty(p), n.val(f, p))).collect();
    let _ = writeln!(out, "define {} @{}({}) {{", f.ret_ty, f.name, params.join(", "));
    for &b in &f.layout {
        match f.blocks[b.idx()].addr {
            Some(a) => {
                let _ = writeln!(out, "{} @{a:#x}:", n.block(b));
            }
            None => {
                let _ = writeln!(out, "{}:", n.block(b));
            }
        }
        for &v in &f.blocks[b.idx()].insts {
            let inst = f.inst(v).unwrap();
            let ty = f.ty(v);
            let mut line = String::from("  ");
            if ty != Ty::Void {
                let _ = write!(line, "{} = ", n.val(f, v));
            }
            line.push_str(&op_mnemonic(&inst.op));
            let args: Vec<String> = inst.args.iter().map(|&a| n.val(f, a)).collect();
            match &inst.op {
                Op::Store | Op::MemWrite | Op::Ret => {
                    if !args.is_empty() {
                        let _ = write!(line, " {}", args.join(", "));
                    }
                }
                Op::Br(t) => {
                    let _ = write!(line, " {}", n.block(*t));
                }
                Op::CondBr(t, e) => {
                    let _ = write!(line, " {}, {}, {}", args[0], n.block(*t), n.block(*e));
                }
                Op::Phi(blocks) => {
                    let inc: Vec<String> =
                        args.iter().zip(blocks).map(|(a, b)| format!("[{a}, {}]", n.block(*b))).collect();
                    let _ = write!(line, " {ty} {}", inc.join(", "));
                }
                Op::Call(name) => {
                    let _ = write!(line, " {ty} @{name}({})", args.join(", "));
                }
                Op::GlobalAddr(name) => {
                    let _ = write!(line, " {ty} @{name}");
                }
                _ => {
                    let _ = write!(line, " {ty}");
                    if !args.is_empty() {
                        let _ = write!(line, " {}", args.join(", "));
                    }
                }
            }
            out.push_str(&line);
            out.push('\n');
        }
    }
    out.push_str("}\n");
    out
}

pub fn print_module(m: &Module) -> String {
    let mut out = String::new();
    for (name, g) in &m.globals {
        match g.mirror {
            Some(a) => {
                let _ = writeln!(out, "@{name} = global {} mirror {a:#x}", g.ty);
            }
            None => {
                let _ = writeln!(out, "@{name} = global {}", g.ty);
            }
        }
    }
    for f in m.functions.values() {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&print_function(f));
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

fn perr(line: usize, msg: impl Into<String>) -> ParseError {
    ParseError { line, msg: msg.into() }
}

fn lex(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            ';' => break,
            ' ' | '\t' => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            }
            ',' | '(' | ')' | '[' | ']' | '{' | '}' | '=' | ':' => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            }
            _ => cur.push(ch),
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn parse_u64(s: &str) -> Option<u64> {
    if let Some(h) = s.strip_prefix("0x") {
        u64::from_str_radix(h, 16).ok()
    } else if let Some(d) = s.strip_prefix('-') {
        d.parse::<u64>().ok().map(|v| v.wrapping_neg())
    } else {
        s.parse().ok()
    }
}

struct Toks<'a> {
    t: &'a [String],
    i: usize,
    line: usize,
}

impl<'a> Toks<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.t.get(self.i).map(|s| s.as_str())
    }

    fn next(&mut self) -> Result<&'a str, ParseError> {
        let s = self.t.get(self.i).ok_or_else(|| perr(self.line, "unexpected end of line"))?;
        self.i += 1;
        Ok(s)
    }

    fn expect(&mut self, want: &str) -> Result<(), ParseError> {
        let got = self.next()?;
        if got == want {
            Ok(())
        } else {
            Err(perr(self.line, format!("expected `{want}`, found `{got}`")))
        }
    }

    fn eat(&mut self, want: &str) -> bool {
        if self.peek() == Some(want) {
            self.i += 1;
            true
        } else {
            false
        }
    }

    fn ty(&mut self) -> Result<Ty, ParseError> {
        let s = self.next()?;
        Ty::parse(s).ok_or_else(|| perr(self.line, format!("bad type `{s}`")))
    }

    fn done(&self) -> Result<(), ParseError> {
        match self.peek() {
            None => Ok(()),
            Some(t) => Err(perr(self.line, format!("trailing token `{t}`"))),
        }
    }
}

struct FnCtx {
    vals: HashMap<String, Value>,
    blocks: HashMap<String, Block>,
}

impl FnCtx {
    fn operand(&self, f: &mut Function, t: &mut Toks) -> Result<Value, ParseError> {
        let s = t.next()?;
        if let Some(ty) = Ty::parse(s) {
            let lit = t.next()?;
            let c = parse_u64(lit).ok_or_else(|| perr(t.line, format!("bad constant `{lit}`")))?;
            return Ok(f.konst(ty, c));
        }
        self.vals.get(s).copied().ok_or_else(|| perr(t.line, format!("undefined value `{s}`")))
    }

    fn block(&self, t: &mut Toks) -> Result<Block, ParseError> {
        let s = t.next()?;
        self.blocks.get(s).copied().ok_or_else(|| perr(t.line, format!("undefined block `{s}`")))
    }

    fn operands(&self, f: &mut Function, t: &mut Toks) -> Result<Vec<Value>, ParseError> {
        let mut out = Vec::new();
        if t.peek().is_none() {
            return Ok(out);
        }
        loop {
            out.push(self.operand(f, t)?);
            if !t.eat(",") {
                break;
            }
        }
        Ok(out)
    }
}

fn parse_op(m: &str, line: usize) -> Result<Op, ParseError> {
    let (head, sub) = match m.split_once('.') {
        Some((h, s)) => (h, Some(s)),
        None => (m, None),
    };
    let bin = BinOp::ALL.iter().find(|b| b.name() == head);
    let op = match (head, sub) {
        (_, None) if bin.is_some() => Op::Bin(*bin.unwrap()),
        ("unknown", None) => Op::Unknown,
        ("not", None) => Op::Un(UnOp::Not),
        ("neg", None) => Op::Un(UnOp::Neg),
        ("icmp", Some(p)) => Op::Icmp(
            *Pred::ALL.iter().find(|x| x.name() == p).ok_or_else(|| perr(line, format!("bad predicate `{p}`")))?,
        ),
        ("select", None) => Op::Select,
        ("zext", None) => Op::Cast(CastOp::Zext),
        ("sext", None) => Op::Cast(CastOp::Sext),
        ("trunc", None) => Op::Cast(CastOp::Trunc),
        ("phi", None) => Op::Phi(vec![]),
        ("fieldaddr", Some(fld)) => {
            Op::FieldAddr(field_index(fld).ok_or_else(|| perr(line, format!("bad field `{fld}`")))? as u16)
        }
        ("load", None) => Op::Load,
        ("store", None) => Op::Store,
        ("alloca", Some("state")) => Op::Alloca(AllocaKind::State),
        ("alloca", Some(t)) => {
            Op::Alloca(AllocaKind::Scalar(Ty::parse(t).ok_or_else(|| perr(line, format!("bad type `{t}`")))?))
        }
        ("globaladdr", None) => Op::GlobalAddr(String::new()),
        ("memread", None) => Op::MemRead,
        ("memwrite", None) => Op::MemWrite,
        ("call", None) => Op::Call(String::new()),
        ("br", None) => Op::Br(Block(0)),
        ("condbr", None) => Op::CondBr(Block(0), Block(0)),
        ("ret", None) => Op::Ret,
        _ => return Err(perr(line, format!("unknown opcode `{m}`"))),
    };
    Ok(op)
}

fn sym(s: &str, line: usize) -> Result<String, ParseError> {
    s.strip_prefix('@').map(|x| x.to_string()).ok_or_else(|| perr(line, format!("expected @name, found `{s}`")))
}

pub fn parse_module(src: &str) -> Result<Module, ParseError> {
    let lines: Vec<(usize, Vec<String>)> =
        src.lines().enumerate().map(|(i, l)| (i + 1, lex(l))).filter(|(_, t)| !t.is_empty()).collect();
    let mut m = Module::new();
    let mut i = 0;
    while i < lines.len() {
        let (ln, toks) = &lines[i];
        let mut t = Toks { t: toks, i: 0, line: *ln };
        let first = t.next()?;
        if first == "define" {
            let end = lines[i..]
                .iter()
                .position(|(_, t)| t.len() == 1 && t[0] == "}")
                .map(|p| p + i)
                .ok_or_else(|| perr(*ln, "function is not closed"))?;
            let f = parse_function(&lines[i..=end])?;
            m.functions.insert(f.name.clone(), f);
            i = end + 1;
        } else if first.starts_with('@') {
            let name = sym(first, *ln)?;
            t.expect("=")?;
            t.expect("global")?;
            let ty = t.ty()?;
            let mirror = if t.eat("mirror") {
                let s = t.next()?;
                Some(parse_u64(s).ok_or_else(|| perr(*ln, "bad mirror address"))?)
            } else {
                None
            };
            t.done()?;
            m.globals.insert(name, Global { ty, mirror });
            i += 1;
        } else {
            return Err(perr(*ln, format!("unexpected `{first}` at top level")));
        }
    }
    Ok(m)
}

fn parse_function(lines: &[(usize, Vec<String>)]) -> Result<Function, ParseError> {
    let (ln, head) = &lines[0];
    let mut t = Toks { t: head, i: 0, line: *ln };
    t.expect("define")?;
    let ret_ty = t.ty()?;
    let name = sym(t.next()?, *ln)?;
    t.expect("(")?;
    let mut ptys = Vec::new();
    let mut pnames = Vec::new();
    if !t.eat(")") {
        loop {
            ptys.push(t.ty()?);
            pnames.push(t.next()?.to_string());
            if t.eat(")") {
                break;
            }
            t.expect(",")?;
        }
    }
    t.expect("{")?;
    t.done()?;

    let mut f = Function::new(name, &ptys, ret_ty);
    let mut cx = FnCtx { vals: HashMap::new(), blocks: HashMap::new() };
    for (n, &p) in pnames.iter().zip(f.params.clone().iter()) {
        if cx.vals.insert(n.clone(), p).is_some() {
            return Err(perr(*ln, format!("duplicate parameter {n}")));
        }
    }

    // First pass: blocks and value placeholders.
    let body = &lines[1..lines.len() - 1];
    let mut plan: Vec<(usize, &[String], Block, Value)> = Vec::new();
    let mut cur: Option<Block> = None;
    for (ln, toks) in body {
        if toks.last().map(|s| s.as_str()) == Some(":") {
            let label = &toks[0];
            let b = f.add_block();
            if toks.len() == 3 {
                f.blocks[b.idx()].addr =
                    Some(parse_u64(toks[1].trim_start_matches('@')).ok_or_else(|| perr(*ln, "bad block address"))?);
            } else if toks.len() != 2 {
                return Err(perr(*ln, "malformed block label"));
            }
            if cx.blocks.insert(label.clone(), b).is_some() {
                return Err(perr(*ln, format!("duplicate block {label}")));
            }
            cur = Some(b);
            continue;
        }
        let b = cur.ok_or_else(|| perr(*ln, "instruction before first block label"))?;
        let v = f.create(Ty::Void, Op::Unknown, vec![]);
        if toks.len() >= 2 && toks[1] == "=" {
            if cx.vals.insert(toks[0].clone(), v).is_some() {
                return Err(perr(*ln, format!("value {} defined twice", toks[0])));
            }
        }
        plan.push((*ln, toks.as_slice(), b, v));
    }

    // Second pass: fill in opcodes and operands.
    for (ln, toks, b, v) in plan {
        let mut t = Toks { t: toks, i: 0, line: ln };
        let named = toks.len() >= 2 && toks[1] == "=";
        if named {
            t.i = 2;
        }
        let mut op = parse_op(t.next()?, ln)?;
        let mut ty = Ty::Void;
        let args = match &mut op {
            Op::Store | Op::MemWrite | Op::Ret => cx.operands(&mut f, &mut t)?,
            Op::Br(target) => {
                *target = cx.block(&mut t)?;
                vec![]
            }
            Op::CondBr(tb, eb) => {
                let c = cx.operand(&mut f, &mut t)?;
                t.expect(",")?;
                *tb = cx.block(&mut t)?;
                t.expect(",")?;
                *eb = cx.block(&mut t)?;
                vec![c]
            }
            Op::Phi(blocks) => {
                ty = t.ty()?;
                let mut args = Vec::new();
                loop {
                    t.expect("[")?;
                    args.push(cx.operand(&mut f, &mut t)?);
                    t.expect(",")?;
                    blocks.push(cx.block(&mut t)?);
                    t.expect("]")?;
                    if !t.eat(",") {
                        break;
                    }
                }
                args
            }
            Op::Call(callee) => {
                ty = t.ty()?;
                *callee = sym(t.next()?, ln)?;
                t.expect("(")?;
                let mut args = Vec::new();
                if !t.eat(")") {
                    loop {
                        args.push(cx.operand(&mut f, &mut t)?);
                        if t.eat(")") {
                            break;
                        }
                        t.expect(",")?;
                    }
                }
                args
            }
            Op::GlobalAddr(g) => {
                ty = t.ty()?;
                *g = sym(t.next()?, ln)?;
                vec![]
            }
            _ => {
                ty = t.ty()?;
                cx.operands(&mut f, &mut t)?
            }
        };
        t.done()?;
        if named == (ty == Ty::Void) {
            return Err(perr(ln, "value-producing instructions must be named, others must not"));
        }
        f.values[v.idx()].ty = ty;
        if let ValueDef::Inst(inst) = &mut f.values[v.idx()].def {
            inst.op = op;
            inst.args = args;
        }
        f.place(b, f.blocks[b.idx()].insts.len(), v);
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{verify, Cursor};

    const SAMPLE: &str = "\
@g = global i64 mirror 0x7fffffff0008

define i64 @f(ptr %0, i64 %1) {
b0 @0x1000:
  %2 = fieldaddr.rax ptr %0
  %3 = load i64 %2
  %4 = add i64 %3, i64 5
  store %2, %4
  %5 = icmp.eq i1 %4, i64 0x7fffffff0000
  condbr %5, b1, b2
b1:
  %6 = memread i32 %1
  %7 = zext i64 %6
  br b2
b2:
  %8 = phi i64 [%4, b0], [%7, b1]
  %9 = globaladdr ptr @g
  %10 = load i64 %9
  %11 = call i64 @h(%10)
  ret %8
}

define i64 @h(i64 %0) {
b0:
  %1 = unknown i64
  %2 = alloca.state ptr
  %3 = alloca.i8 ptr
  memwrite %0, %1
  ret %1
}
";

    #[test]
    fn print_parse_roundtrip() {
        let m = parse_module(SAMPLE).unwrap();
        let p1 = print_module(&m);
        assert_eq!(p1, SAMPLE);
        let p2 = print_module(&parse_module(&p1).unwrap());
        assert_eq!(p1, p2);
        for f in m.functions.values() {
            verify(f).unwrap();
        }
    }

    #[test]
    fn one_block_listing() {
        let mut f = Function::new("z", &[], Ty::I64);
        let b = f.add_block();
        let z = f.konst(Ty::I64, 0);
        Cursor::new(&mut f, b).ret(Some(z));
        assert_eq!(print_function(&f), "define i64 @z() {\nb0:\n  ret i64 0\n}\n");
    }

    #[test]
    fn errors_carry_lines() {
        let e = parse_module("define i64 @f() {\nb0:\n  ret %9\n}\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(parse_module("define i64 @f() {\nb0:\n  %1 = frob i64\n}\n").is_err());
        assert!(parse_module("define i64 @f() {\nb0:\n  ret i64 1\n").is_err());
    }
}
