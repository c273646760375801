//! Generated pairs of clean and obfuscated programs with ground truth.
//!
//! Every sample computes a random arithmetic function of its arguments.
//! The obfuscated side applies one construction:
//!
//! - `constant_unfolding`: immediates are loaded from a `.data` pool.
//! - `bogus_cf`: never-taken branches on number-theoretic predicates, with
//!   junk blocks behind them.
//! - `mba_op`: always-taken branches guarded by an MBA identity.
//! - `dead_code`: arithmetic on scratch registers and flags nobody reads.
//! - `integer_encoding`: arguments are stored as `a*x+b` in stack locals and
//!   decoded with the inverse of `a` at each use.
//! - `for_trick`: a constant becomes the trip count of a counting loop over a
//!   stack local, plus an MBA guard.
//! - `split_trick`: an equality test becomes eight chained byte tests.
//! - `stack_args`, `loop`, `overlapping_slots`, `infinite_loop`: scenarios in
//!   both programs (stack-passed arguments, a data-dependent loop, overlapping
//!   frame accesses, a spin loop for one input), obfuscated with one bogus
//!   branch.
//! - `cross_block_op`: the predicate value is computed in the previous block,
//!   so proving it needs a two-block slice.
//!
//! Every label that is a branch target is entered only by jumps, never by
//! falling through, so lifted blocks do not overlap.

pub mod mba;
pub mod truth;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{differential_check, DiffTarget};
use crate::machine::{assemble, Abi, Program};

pub use truth::{contracted_count, truth_cfg};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    ConstantUnfolding,
    BogusCf,
    MbaOp,
    DeadCode,
    IntegerEncoding,
    ForTrick,
    SplitTrick,
    StackArgs,
    Loop,
    OverlappingSlots,
    InfiniteLoop,
    CrossBlockOp,
}

impl SampleKind {
    pub const ALL: [SampleKind; 12] = [
        SampleKind::ConstantUnfolding,
        SampleKind::BogusCf,
        SampleKind::MbaOp,
        SampleKind::DeadCode,
        SampleKind::IntegerEncoding,
        SampleKind::ForTrick,
        SampleKind::SplitTrick,
        SampleKind::StackArgs,
        SampleKind::Loop,
        SampleKind::OverlappingSlots,
        SampleKind::InfiniteLoop,
        SampleKind::CrossBlockOp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SampleKind::ConstantUnfolding => "constant_unfolding",
            SampleKind::BogusCf => "bogus_cf",
            SampleKind::MbaOp => "mba_op",
            SampleKind::DeadCode => "dead_code",
            SampleKind::IntegerEncoding => "integer_encoding",
            SampleKind::ForTrick => "for_trick",
            SampleKind::SplitTrick => "split_trick",
            SampleKind::StackArgs => "stack_args",
            SampleKind::Loop => "loop",
            SampleKind::OverlappingSlots => "overlapping_slots",
            SampleKind::InfiniteLoop => "infinite_loop",
            SampleKind::CrossBlockOp => "cross_block_op",
        }
    }
}

impl fmt::Display for SampleKind {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SampleKind {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, CorpusError> {
        SampleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CorpusError::UnknownKind(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub register_args: u32,
    pub stack_args: u32,
    pub returns_value: bool,
}

impl Signature {
    pub fn arg_count(&self) -> usize {
        (self.register_args + self.stack_args) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub kind: SampleKind,
    pub seed: u64,
    pub abi: Abi,
    pub signature: Signature,
    pub injected_op_count: usize,
    /// Addresses of the opaque branches and the junk code behind them.
    pub injected_op_addresses: Vec<u64>,
    pub injected_dead_block_addresses: Vec<u64>,
    /// Block count of the obfuscated program's true control flow graph
    /// (opaque branches reduced to their live edge), after contracting
    /// straight-line edges.
    pub clean_block_count: usize,
    /// Data ranges holding unfolded constants.
    pub constant_pool: Vec<(u64, u64)>,
    /// Predecessor chain length needed to prove every opaque branch.
    pub solver_bb_count_jcc: u32,
    /// The constant a split comparison tests against.
    pub split_constant: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub clean: String,
    pub obfuscated: String,
    pub meta: SampleMeta,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unknown sample kind `{0}`")]
    UnknownKind(String),
    #[error("generated {kind} sample {seed} does not assemble: {err}")]
    Assemble { kind: SampleKind, seed: u64, err: String },
    #[error("generated {kind} sample {seed}: {why}")]
    Truth { kind: SampleKind, seed: u64, why: String },
    #[error("generated {kind} sample {seed} is not equivalent to its clean version ({mismatches} mismatches)")]
    NotEquivalent { kind: SampleKind, seed: u64, mismatches: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const ABI: Abi = Abi::Win64;
const POOL_BASE: u64 = 0x4000;
const SELF_CHECK_TRIALS: usize = 200;

/// Argument `i` as an operand: a register, or a caller stack slot.
fn arg_operand(i: usize) -> String {
    let regs = ABI.arg_regs();
    if i < regs.len() {
        regs[i].name64().to_string()
    } else {
        format!("qword [rsp + {}]", ABI.stack_arg_offset() + 8 * (i - regs.len()) as u64)
    }
}

#[derive(Clone, Copy, Debug)]
enum Step {
    /// `op rax, arg`
    Arg(&'static str, usize),
    /// `op rax, imm`
    Imm(&'static str, u64),
    Shl(u32),
}

/// One program under construction: code lines, trailing out-of-line code
/// and branch bookkeeping.
#[derive(Default)]
struct Asm {
    lines: Vec<String>,
    tail: Vec<String>,
    data: Vec<u8>,
    /// (branch label, live target label) for opaque branches.
    ops: Vec<(String, String)>,
    junk: Vec<String>,
    labels: usize,
}

impl Asm {
    fn push(&mut self, l: impl Into<String>) {
        self.lines.push(l.into());
    }

    fn extend(&mut self, ls: impl IntoIterator<Item = String>) {
        self.lines.extend(ls);
    }

    fn label(&mut self, stem: &str) -> String {
        self.labels += 1;
        format!("{stem}{}", self.labels)
    }

    fn text(&self) -> String {
        let mut s = String::new();
        if !self.data.is_empty() {
            let bytes: Vec<String> = self.data.iter().map(|b| format!("{b:02x}")).collect();
            s += &format!(".data {POOL_BASE:#x}: {}\n", bytes.join(" "));
        }
        for l in self.lines.iter().chain(&self.tail) {
            if l.ends_with(':') {
                s += l;
            } else {
                s += "    ";
                s += l;
            }
            s.push('\n');
        }
        s
    }

    /// A never-taken branch to junk code placed after the function body.
    fn bogus(&mut self, rng: &mut ChaCha8Rng, x: &str) {
        let (site, junk, cont) = (self.label("op"), self.label("junk"), self.label("cont"));
        let (body, jcc): (Vec<String>, &str) = match rng.gen_range(0..4) {
            0 => (vec![format!("mov r11, {x}"), "lea r10, [r11 + 1]".into(), "imul r11, r10".into(), "test r11, 1".into()], "jnz"),
            1 => (vec![format!("mov r11, {x}"), "imul r11, r11".into(), "and r11, 3".into(), "cmp r11, 2".into()], "je"),
            2 => (vec![format!("mov r11, {x}"), "or r11, 1".into(), "test r11, r11".into()], "jz"),
            _ => (vec![format!("mov r11, {x}"), format!("sub r11, {x}")], "jnz"),
        };
        self.extend(body);
        self.push(format!("{site}:"));
        self.push(format!("{jcc} {junk}"));
        // The fallthrough is live; a jump keeps it from being a join point.
        self.push(format!("jmp {cont}"));
        self.push(format!("{cont}:"));
        self.ops.push((site, cont));
        self.junk_block(rng, junk);
    }

    fn junk_block(&mut self, rng: &mut ChaCha8Rng, junk: String) {
        let k: u32 = rng.gen();
        self.tail.push(format!("{junk}:"));
        self.tail.push(format!("mov rax, {k:#x}"));
        self.tail.push("xor rax, rcx".into());
        self.tail.push("ret".into());
        self.junk.push(junk);
    }

    /// An always-taken branch guarded by an MBA identity, junk inline.
    fn mba(&mut self, id: &mba::MbaIdentity, x: &str, y: &str) {
        let (site, junk, live) = (self.label("op"), self.label("junk"), self.label("live"));
        self.extend((id.emit)(x, y));
        self.push("cmp r10, r11");
        self.push(format!("{site}:"));
        self.push(format!("je {live}"));
        self.push(format!("{junk}:"));
        self.push("mov rax, 0");
        self.push("ret");
        self.push(format!("{live}:"));
        self.ops.push((site, live));
        self.junk.push(junk);
    }
}

struct Gen {
    rng: ChaCha8Rng,
    kind: SampleKind,
    nargs: usize,
}

impl Gen {
    fn steps(&mut self) -> Vec<Step> {
        const OPS: [&str; 6] = ["add", "sub", "xor", "imul", "and", "or"];
        let mut s: Vec<Step> = (1..self.nargs).map(|i| Step::Arg(OPS[self.rng.gen_range(0..OPS.len())], i)).collect();
        for _ in 0..self.rng.gen_range(1..=3) {
            let op = ["add", "sub", "xor", "imul"][self.rng.gen_range(0..4)];
            let k = self.rng.gen_range(1..0x7fff_ffffu64) | u64::from(op == "imul");
            s.push(Step::Imm(op, k));
        }
        if self.rng.gen_bool(0.5) {
            s.push(Step::Shl(self.rng.gen_range(1..8)));
        }
        s
    }

    /// Registers holding live values an opaque predicate may test.
    fn pick_source(&mut self) -> String {
        let n = self.nargs.min(ABI.arg_regs().len());
        match self.rng.gen_range(0..=n) {
            0 => "rax".into(),
            i => arg_operand(i - 1),
        }
    }
}

/// Render the arithmetic steps into `a`, starting from argument 0.
fn emit_steps(a: &mut Asm, steps: &[Step], imm: &mut dyn FnMut(&mut Asm, &'static str, u64)) {
    a.push(format!("mov rax, {}", arg_operand(0)));
    for &s in steps {
        match s {
            Step::Arg(op, i) if i >= ABI.arg_regs().len() => {
                a.push(format!("mov r11, {}", arg_operand(i)));
                a.push(format!("{op} rax, r11"));
            }
            Step::Arg(op, i) => a.push(format!("{op} rax, {}", arg_operand(i))),
            Step::Imm(op, k) => imm(a, op, k),
            Step::Shl(c) => a.push(format!("shl rax, {c}")),
        }
    }
}

fn plain_imm(a: &mut Asm, op: &'static str, k: u64) {
    a.push(format!("{op} rax, {k:#x}"));
}

fn mod_inverse(a: u64) -> u64 {
    // Newton iteration; each step doubles the correct low bits.
    let mut x = a;
    for _ in 0..6 {
        x = x.wrapping_mul(2u64.wrapping_sub(a.wrapping_mul(x)));
    }
    x
}

struct Built {
    clean: Asm,
    obf: Asm,
    split_constant: Option<u64>,
    solver_bb_count_jcc: u32,
}

fn build(g: &mut Gen) -> Built {
    let steps = g.steps();
    let mut clean = Asm::default();
    let mut obf = Asm::default();
    let mut split_constant = None;
    let mut solver_bb_count_jcc = 1;
    match g.kind {
        SampleKind::ConstantUnfolding => {
            emit_steps(&mut clean, &steps, &mut plain_imm);
            emit_steps(&mut obf, &steps, &mut |a, op, k| {
                let at = POOL_BASE + a.data.len() as u64;
                a.data.extend_from_slice(&k.to_le_bytes());
                a.push(format!("mov r10, qword [{at:#x}]"));
                a.push(format!("{op} rax, r10"));
            });
        }
        SampleKind::BogusCf => {
            emit_steps(&mut clean, &steps, &mut plain_imm);
            let n = g.rng.gen_range(1..=3);
            let mut body = Asm::default();
            emit_steps(&mut body, &steps, &mut plain_imm);
            let mut at: Vec<usize> = (0..n).map(|_| g.rng.gen_range(1..=body.lines.len())).collect();
            at.sort_unstable();
            let mut from = 0;
            for p in at {
                obf.extend(body.lines[from..p].iter().cloned());
                let x = g.pick_source();
                obf.bogus(&mut g.rng, &x);
                from = p;
            }
            obf.extend(body.lines[from..].iter().cloned());
        }
        SampleKind::MbaOp => {
            emit_steps(&mut clean, &steps, &mut plain_imm);
            let mut body = Asm::default();
            emit_steps(&mut body, &steps, &mut plain_imm);
            let pool = mba::pool();
            let (x, y) = (g.pick_source(), g.pick_source());
            obf.push(body.lines[0].clone());
            obf.mba(&pool[0], &x, &y);
            obf.extend(body.lines[1..].iter().cloned());
            if g.rng.gen_bool(0.5) {
                let id = &pool[g.rng.gen_range(1..pool.len())];
                let (x, y) = (g.pick_source(), g.pick_source());
                obf.mba(id, &x, &y);
            }
        }
        SampleKind::DeadCode => {
            emit_steps(&mut clean, &steps, &mut plain_imm);
            let mut body = Asm::default();
            emit_steps(&mut body, &steps, &mut plain_imm);
            for l in body.lines {
                obf.push(l);
                for _ in 0..g.rng.gen_range(0..=2) {
                    let x = g.pick_source();
                    let k: u32 = g.rng.gen();
                    let junk: Vec<String> = match g.rng.gen_range(0..4) {
                        0 => vec![format!("mov r11, {x}"), format!("add r11, {k:#x}"), "imul r11, r11".into()],
                        1 => vec![format!("cmp {x}, {k:#x}")],
                        2 => vec![format!("lea r10, [{x} + {x}*2 + {k:#x}]"), "xor r10, r11".into()],
                        _ => vec![format!("test {x}, {x}"), "mov r10, rax".into(), "shr r10, 3".into()],
                    };
                    obf.extend(junk);
                }
            }
        }
        SampleKind::IntegerEncoding => {
            emit_steps(&mut clean, &steps, &mut plain_imm);
            let n = g.nargs;
            let frame = 8 * n.div_ceil(2) * 2;
            let keys: Vec<(u64, u64)> = (0..n).map(|_| (g.rng.gen::<u32>() as u64 | 1, g.rng.gen::<u32>() as u64)).collect();
            obf.push(format!("sub rsp, {frame}"));
            for (i, &(a, b)) in keys.iter().enumerate() {
                obf.push(format!("mov r10, {}", arg_operand(i)));
                obf.push(format!("imul r10, {a:#x}"));
                obf.push(format!("add r10, {b:#x}"));
                obf.push(format!("mov qword [rsp + {}], r10", 8 * i));
            }
            let decode = |a: &mut Asm, i: usize| {
                let (k, b) = keys[i];
                a.push(format!("mov r11, qword [rsp + {}]", 8 * i));
                a.push(format!("sub r11, {b:#x}"));
                a.push(format!("imul r11, {:#x}", mod_inverse(k)));
            };
            decode(&mut obf, 0);
            obf.push("mov rax, r11");
            for &s in &steps {
                match s {
                    Step::Arg(op, i) => {
                        decode(&mut obf, i);
                        obf.push(format!("{op} rax, r11"));
                    }
                    Step::Imm(op, k) => plain_imm(&mut obf, op, k),
                    Step::Shl(c) => obf.push(format!("shl rax, {c}")),
                }
            }
            obf.push(format!("add rsp, {frame}"));
        }
        SampleKind::ForTrick => {
            let k = g.rng.gen_range(2..=50u64);
            emit_steps(&mut clean, &steps, &mut plain_imm);
            clean.push(format!("add rax, {k}"));
            emit_steps(&mut obf, &steps, &mut plain_imm);
            let (head, done) = (obf.label("for"), obf.label("done"));
            obf.push("sub rsp, 16");
            obf.push("mov qword [rsp + 8], 0");
            obf.push(format!("jmp {head}"));
            obf.push(format!("{head}:"));
            obf.push("add qword [rsp + 8], 1");
            obf.push(format!("cmp qword [rsp + 8], {k}"));
            obf.push(format!("jne {head}"));
            obf.push(format!("jmp {done}"));
            obf.push(format!("{done}:"));
            let (x, y) = (g.pick_source(), g.pick_source());
            obf.mba(&mba::pool()[0], &x, &y);
            obf.push("add rax, qword [rsp + 8]");
            obf.push("add rsp, 16");
        }
        SampleKind::SplitTrick => {
            let k = g.rng.gen_range(1..=16u64);
            let v: u32 = g.rng.gen();
            split_constant = Some(k);
            for a in [&mut clean, &mut obf] {
                emit_steps(a, &steps, &mut plain_imm);
            }
            let (ce, oe) = (clean.label("else"), obf.label("else"));
            clean.push(format!("cmp rcx, {k}"));
            clean.push(format!("jne {ce}"));
            for i in 0..8 {
                obf.push("mov r10, rcx");
                if i > 0 {
                    obf.push(format!("shr r10, {}", 8 * i));
                }
                obf.push("and r10, 0xff");
                obf.push(format!("cmp r10, {}", (k >> (8 * i)) & 0xff));
                obf.push(format!("jne {oe}"));
            }
            for (a, e) in [(&mut clean, ce), (&mut obf, oe)] {
                a.push(format!("xor rax, {v:#x}"));
                a.push("ret");
                a.push(format!("{e}:"));
            }
        }
        SampleKind::StackArgs | SampleKind::Loop | SampleKind::OverlappingSlots | SampleKind::InfiniteLoop => {
            let mut body = Asm::default();
            scenario(g, &mut body, &steps);
            clean.lines = body.lines.clone();
            let split = 1 + body.lines.iter().position(|l| l.starts_with("mov rax, ")).unwrap();
            obf.labels = body.labels;
            obf.extend(body.lines[..split].iter().cloned());
            obf.bogus(&mut g.rng, "rcx");
            obf.extend(body.lines[split..].iter().cloned());
        }
        SampleKind::CrossBlockOp => {
            emit_steps(&mut clean, &steps, &mut plain_imm);
            let mut body = Asm::default();
            emit_steps(&mut body, &steps, &mut plain_imm);
            let p = g.rng.gen_range(1..=body.lines.len());
            obf.extend(body.lines[..p].iter().cloned());
            let x = g.pick_source();
            let (next, site, junk, cont) = (obf.label("next"), obf.label("op"), obf.label("junk"), obf.label("cont"));
            obf.push(format!("mov r11, {x}"));
            obf.push("imul r11, r11");
            obf.push(format!("jmp {next}"));
            obf.push(format!("{next}:"));
            obf.push("and r11, 3");
            obf.push("cmp r11, 2");
            obf.push(format!("{site}:"));
            obf.push(format!("je {junk}"));
            obf.push(format!("jmp {cont}"));
            obf.push(format!("{cont}:"));
            obf.ops.push((site, cont));
            obf.junk_block(&mut g.rng, junk);
            obf.extend(body.lines[p..].iter().cloned());
            solver_bb_count_jcc = 2;
        }
    }
    for a in [&mut clean, &mut obf] {
        if !a.lines.last().is_some_and(|l| l.starts_with("jmp")) {
            a.push("ret");
        }
    }
    Built { clean, obf, split_constant, solver_bb_count_jcc }
}

/// Code shared by both programs of a scenario kind.
fn scenario(g: &mut Gen, a: &mut Asm, steps: &[Step]) {
    match g.kind {
        SampleKind::StackArgs => emit_steps(a, steps, &mut plain_imm),
        SampleKind::Loop => {
            emit_steps(a, steps, &mut plain_imm);
            let (head, body, done) = (a.label("head"), a.label("body"), a.label("done"));
            let x = arg_operand(g.rng.gen_range(0..g.nargs));
            let m: u32 = g.rng.gen_range(1..0x1000);
            a.push("mov r10, rcx");
            a.push("and r10, 15");
            a.push(format!("jmp {head}"));
            a.push(format!("{head}:"));
            a.push("test r10, r10");
            a.push(format!("jz {done}"));
            a.push(format!("jmp {body}"));
            a.push(format!("{body}:"));
            a.push(format!("imul rax, {}", m | 1));
            a.push(format!("add rax, {x}"));
            a.push("dec r10");
            a.push(format!("jmp {head}"));
            a.push(format!("{done}:"));
        }
        SampleKind::OverlappingSlots => {
            emit_steps(a, steps, &mut plain_imm);
            let k: u8 = g.rng.gen();
            a.push("sub rsp, 24");
            a.push("mov qword [rsp + 8], rax");
            a.push(format!("mov byte [rsp + 9], {k:#x}"));
            a.push("mov dword [rsp + 12], ecx");
            a.push(format!("mov word [rsp + 2], {:#x}", g.rng.gen::<u16>()));
            a.push("mov qword [rsp], rdx");
            a.push("mov rax, qword [rsp + 8]");
            a.push("mov r10d, dword [rsp + 10]");
            a.push("add rax, r10");
            a.push("add rax, qword [rsp]");
            a.push("add rsp, 24");
        }
        SampleKind::InfiniteLoop => {
            let magic = g.rng.gen_range(1..=16);
            let spin = a.label("spin");
            a.push(format!("cmp rcx, {magic}"));
            a.push(format!("je {spin}"));
            let ret = a.label("work");
            a.push(format!("jmp {ret}"));
            a.push(format!("{ret}:"));
            emit_steps(a, steps, &mut plain_imm);
            a.push("ret");
            a.push(format!("{spin}:"));
            a.push(format!("jmp {spin}"));
        }
        _ => unreachable!(),
    }
}

fn arg_range(kind: SampleKind, rng: &mut ChaCha8Rng) -> usize {
    match kind {
        SampleKind::StackArgs => rng.gen_range(5..=6),
        SampleKind::ForTrick => 3,
        SampleKind::OverlappingSlots => rng.gen_range(2..=4),
        _ => rng.gen_range(1..=4),
    }
}

/// Deterministically generate one sample, checked for equivalence.
pub fn gen_sample(kind: SampleKind, seed: u64) -> Result<Sample, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let nargs = arg_range(kind, &mut rng);
    let mut g = Gen { rng, kind, nargs };
    let built = build(&mut g);
    let (clean_text, obf_text) = (built.clean.text(), built.obf.text());
    let asm_err = |e: crate::machine::AsmError| CorpusError::Assemble { kind, seed, err: e.to_string() };
    let clean = assemble(&clean_text).map_err(asm_err)?;
    let obf = assemble(&obf_text).map_err(asm_err)?;
    let label = |p: &Program, l: &str| p.labels[l];
    let live: BTreeMap<u64, u64> = built.obf.ops.iter().map(|(s, t)| (label(&obf, s), label(&obf, t))).collect();
    let (nodes, edges) = truth_cfg(&obf, obf.entry, &live).map_err(|why| CorpusError::Truth { kind, seed, why })?;
    let report = differential_check(
        &obf,
        obf.entry,
        ABI,
        nargs,
        DiffTarget::Machine { program: &clean, entry: clean.entry },
        SELF_CHECK_TRIALS,
        seed,
    );
    if !report.passed() {
        return Err(CorpusError::NotEquivalent { kind, seed, mismatches: report.mismatches.len() });
    }
    let nregs = ABI.arg_regs().len();
    let meta = SampleMeta {
        kind,
        seed,
        abi: ABI,
        signature: Signature {
            register_args: nargs.min(nregs) as u32,
            stack_args: nargs.saturating_sub(nregs) as u32,
            returns_value: true,
        },
        injected_op_count: built.obf.ops.len(),
        injected_op_addresses: live.keys().copied().collect(),
        injected_dead_block_addresses: built.obf.junk.iter().map(|j| label(&obf, j)).collect(),
        clean_block_count: contracted_count(obf.entry, &nodes, &edges),
        constant_pool: if built.obf.data.is_empty() {
            vec![]
        } else {
            vec![(POOL_BASE, POOL_BASE + built.obf.data.len() as u64)]
        },
        solver_bb_count_jcc: built.solver_bb_count_jcc,
        split_constant: built.split_constant,
    };
    Ok(Sample { clean: clean_text, obfuscated: obf_text, meta })
}

impl Sample {
    pub fn stem(&self) -> String {
        format!("{}_{}", self.meta.kind, self.meta.seed)
    }

    /// Write `<stem>.clean.s`, `<stem>.obf.s` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
        std::fs::create_dir_all(dir)?;
        let stem = self.stem();
        let files = [
            (dir.join(format!("{stem}.clean.s")), self.clean.clone()),
            (dir.join(format!("{stem}.obf.s")), self.obfuscated.clone()),
            (dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&self.meta).expect("meta serializes") + "\n"),
        ];
        for (p, s) in &files {
            std::fs::write(p, s)?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}
