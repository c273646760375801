//! Cleanup after control flow recovery, and reconstruction of an
//! argument-based function.

pub mod args;
pub mod pool;
pub mod stack;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::exec::STACK_BASE;
use crate::explorer::{build_cfg_function, BuildError, RecoveredCfg};
use crate::ir::state::{field_ty, NUM_FIELDS, NUM_GPR, RIP, RSP};
use crate::ir::{AllocaKind, BinOp, Block, CastOp, Function, Global, Module, Op, Ty, Value};
use crate::machine::{Abi, Program};
use crate::opt::{inline_calls, run_pipeline_observed, OptConfig, OptContext, OptError};

pub use args::{reconstruct_function, recover_register_arguments, Reconstruction, RecoveredSignature};
pub use pool::promote_constant_pool;
pub use stack::{classify_residual_globals, recover_stack_slots, Residual, ResidualClass, Slot, StackSlotMap};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecoverError {
    #[error("no function @{0}")]
    NoFunction(String),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Build(#[from] BuildError),
}

#[derive(Clone, Debug)]
pub struct RecoverConfig {
    pub abi: Abi,
    pub constant_pool: Vec<(u64, u64)>,
    pub opt: OptConfig,
    /// Bound on pipeline / promotion rounds.
    pub max_rounds: u32,
    /// Skip argument recovery and keep the state-record form.
    pub keep_state: bool,
}

impl Default for RecoverConfig {
    fn default() -> Self {
        RecoverConfig {
            abi: Abi::Win64,
            constant_pool: Vec::new(),
            opt: OptConfig::default(),
            max_rounds: 8,
            keep_state: false,
        }
    }
}

/// Inserts instructions at a fixed position of a block.
pub(crate) struct At<'a> {
    pub f: &'a mut Function,
    b: Block,
    pos: usize,
}

impl<'a> At<'a> {
    pub fn new(f: &'a mut Function, b: Block, pos: usize) -> At<'a> {
        At { f, b, pos }
    }

    pub fn before(f: &'a mut Function, v: Value) -> At<'a> {
        let b = f.block_of(v).expect("placed instruction");
        let pos = f.blocks[b.idx()].insts.iter().position(|&x| x == v).unwrap();
        At { f, b, pos }
    }

    pub fn ins(&mut self, ty: Ty, op: Op, args: Vec<Value>) -> Value {
        let v = self.f.create(ty, op, args);
        self.f.place(self.b, self.pos, v);
        self.pos += 1;
        v
    }

    pub fn konst(&mut self, ty: Ty, v: u64) -> Value {
        self.f.konst(ty, v)
    }

    pub fn bin_k(&mut self, op: BinOp, a: Value, k: u64) -> Value {
        let ty = self.f.ty(a);
        let c = self.f.konst(ty, k);
        self.ins(ty, Op::Bin(op), vec![a, c])
    }

    pub fn bin(&mut self, op: BinOp, a: Value, b: Value) -> Value {
        let ty = self.f.ty(a);
        self.ins(ty, Op::Bin(op), vec![a, b])
    }

    /// Zero-extend or truncate to `to`.
    pub fn resize(&mut self, v: Value, to: Ty) -> Value {
        let from = self.f.ty(v);
        match from.bits().cmp(&to.bits()) {
            std::cmp::Ordering::Equal => v,
            std::cmp::Ordering::Less => self.ins(to, Op::Cast(CastOp::Zext), vec![v]),
            std::cmp::Ordering::Greater => self.ins(to, Op::Cast(CastOp::Trunc), vec![v]),
        }
    }

    pub fn field_addr(&mut self, st: Value, i: usize) -> Value {
        self.ins(Ty::Ptr, Op::FieldAddr(i as u16), vec![st])
    }

    pub fn load(&mut self, ty: Ty, p: Value) -> Value {
        self.ins(ty, Op::Load, vec![p])
    }

    pub fn store(&mut self, p: Value, v: Value) -> Value {
        self.ins(Ty::Void, Op::Store, vec![p, v])
    }
}

pub(crate) fn ret_blocks(f: &Function) -> Vec<Block> {
    f.layout.iter().copied().filter(|&b| f.terminator(b).and_then(|t| f.op(t)) == Some(&Op::Ret)).collect()
}

/// Move the state record into a local copy: every field is loaded from the
/// parameter at entry (with rsp and rip concretized), all accesses go to
/// the copy, and the general purpose registers are written back before each
/// return. Flags and rip are not written back.
pub fn localize_state(f: &mut Function, entry: u64) {
    let p = f.params[0];
    let users = f.users().remove(&p).unwrap_or_default();
    let b = f.entry();
    let mut at = At::new(f, b, 0);
    let l = at.ins(Ty::Ptr, Op::Alloca(AllocaKind::State), vec![]);
    for i in 0..NUM_FIELDS {
        let v = match i {
            RSP => at.konst(Ty::I64, STACK_BASE),
            RIP => at.konst(Ty::I64, entry),
            _ => {
                let pa = at.field_addr(p, i);
                at.load(field_ty(i), pa)
            }
        };
        let la = at.field_addr(l, i);
        at.store(la, v);
    }
    for u in users {
        for a in &mut f.inst_mut(u).unwrap().args {
            if *a == p {
                *a = l;
            }
        }
    }
    for rb in ret_blocks(f) {
        let t = f.terminator(rb).unwrap();
        let mut at = At::before(f, t);
        for i in 0..NUM_GPR {
            let la = at.field_addr(l, i);
            let v = at.load(Ty::I64, la);
            let pa = at.field_addr(p, i);
            at.store(pa, v);
        }
    }
}

/// Field index when `p` is `fieldaddr` off parameter `st`.
pub(crate) fn param_field(f: &Function, p: Value, st: Value) -> Option<usize> {
    match f.op(p) {
        Some(Op::FieldAddr(i)) if f.args(p)[0] == st => Some(*i as usize),
        _ => None,
    }
}

/// Drop write-backs that store a field's own entry value.
fn drop_passthrough_stores(f: &mut Function) -> bool {
    let st = f.params[0];
    let dead: Vec<Value> = f
        .insts()
        .into_iter()
        .filter(|&v| {
            f.op(v) == Some(&Op::Store) && {
                let (p, x) = (f.args(v)[0], f.args(v)[1]);
                let field = param_field(f, p, st);
                field.is_some()
                    && f.op(x) == Some(&Op::Load)
                    && param_field(f, f.args(x)[0], st) == field
            }
        })
        .collect();
    for &v in &dead {
        f.remove(v);
    }
    !dead.is_empty()
}

pub struct PostTranslated {
    /// The optimized state-form function and the globals it uses.
    pub module: Module,
    pub func: String,
    pub slots: StackSlotMap,
    pub rounds: u32,
    pub diagnostics: Vec<String>,
}

fn opt_context(config: &OptConfig, m: &Module) -> OptContext {
    let mut ctx = OptContext::new(config.clone());
    ctx.globals = Some(m.globals.clone());
    ctx
}

/// Inline the block functions of a dispatcher and optimize it, alternating
/// the pipeline with constant-pool promotion and stack-slot recovery until
/// neither finds anything new.
pub fn post_translation_optimize(
    m: &Module,
    func: &str,
    program: &Program,
    entry: u64,
    config: &RecoverConfig,
) -> Result<PostTranslated, RecoverError> {
    post_translation_observed(m, func, program, entry, config, &mut |_, _, _| {})
}

/// Globals visible to an observed stage.
pub type Globals = BTreeMap<String, Global>;

/// `post_translation_optimize`, calling `observe` with a stage name after
/// every step that changed the function.
pub fn post_translation_observed(
    m: &Module,
    func: &str,
    program: &Program,
    entry: u64,
    config: &RecoverConfig,
    observe: &mut dyn FnMut(&str, &Function, &Globals),
) -> Result<PostTranslated, RecoverError> {
    let mut f = m.functions.get(func).cloned().ok_or_else(|| RecoverError::NoFunction(func.into()))?;
    let callees: BTreeMap<String, Function> =
        m.functions.iter().filter(|(n, _)| *n != func).map(|(n, g)| (n.clone(), g.clone())).collect();
    inline_calls(&mut f, &callees)?;
    observe("inline", &f, &m.globals);
    localize_state(&mut f, entry);
    observe("localize", &f, &m.globals);
    let mut out = Module::new();
    out.globals = m.globals.clone();
    let mut slots = StackSlotMap::default();
    let mut diagnostics = Vec::new();
    let mut rounds = 0;
    let pipeline = |f: &mut Function, out: &Module, diagnostics: &mut Vec<String>, observe: &mut dyn FnMut(&str, &Function, &Globals)| {
        let mut ctx = opt_context(&config.opt, out);
        run_pipeline_observed(f, &mut ctx, &mut |p, f| observe(p.name(), f, &out.globals));
        diagnostics.append(&mut ctx.diagnostics);
    };
    loop {
        rounds += 1;
        pipeline(&mut f, &out, &mut diagnostics, observe);
        let dropped = drop_passthrough_stores(&mut f);
        if dropped {
            observe("drop_passthrough", &f, &out.globals);
        }
        if rounds >= config.max_rounds {
            diagnostics.push(format!("warning: {func}: no fixpoint after {rounds} rounds"));
            break;
        }
        let pooled = promote_constant_pool(&mut f, program, &config.constant_pool, &mut diagnostics);
        if pooled {
            observe("constant_pool", &f, &out.globals);
        }
        let stacked = stack::promote_round(&mut f, &mut out.globals, &mut slots, &mut diagnostics);
        if stacked {
            observe("stack_slots", &f, &out.globals);
        }
        if !pooled && !stacked {
            if dropped {
                pipeline(&mut f, &out, &mut diagnostics, observe);
            }
            break;
        }
    }
    out.add(f);
    out.remove_unused_globals();
    classify_residual_globals(&mut slots, &out.functions[func], &out.globals, config.abi);
    diagnostics.dedup();
    Ok(PostTranslated { module: out, func: func.to_string(), slots, rounds, diagnostics })
}

/// Result of the whole cleanup on one recovered function.
pub struct Brightened {
    pub state_form: PostTranslated,
    pub signature: Option<RecoveredSignature>,
    /// Argument-based function, or the state form when that failed or was
    /// not requested.
    pub output: Reconstruction,
    pub report: RecoveryReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct RecoveryReport {
    pub function: String,
    pub state_form: bool,
    pub signature: Option<RecoveredSignature>,
    pub slots: Vec<SlotRow>,
    pub residual_globals: Vec<Residual>,
    pub rounds: u32,
    pub lifted_instructions: usize,
    pub optimized_instructions: usize,
    pub output_instructions: usize,
    pub diagnostics: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SlotRow {
    pub address: String,
    pub offset: i64,
    pub width: u32,
    pub global: String,
}

pub fn state_form_name(entry: u64) -> String {
    format!("sub_{entry:x}_state")
}

pub fn brightened_name(entry: u64) -> String {
    format!("sub_{entry:x}")
}

pub fn brighten(program: &Program, cfg: &RecoveredCfg, config: &RecoverConfig) -> Result<Brightened, RecoverError> {
    let sname = state_form_name(cfg.entry);
    let dispatcher = build_cfg_function(cfg, &sname)?;
    let pt = post_translation_optimize(&dispatcher, &sname, program, cfg.entry, config)?;
    let mut diagnostics = pt.diagnostics.clone();
    let (signature, output) = if config.keep_state {
        (None, Reconstruction { module: pt.module.clone(), func: sname.clone(), state_form: true })
    } else {
        let sig = recover_register_arguments(&pt.module.functions[&sname], config.abi, &pt.slots, &mut diagnostics);
        let r = reconstruct_function(
            &pt.module,
            &sname,
            &brightened_name(cfg.entry),
            &sig,
            config.abi,
            &pt.slots,
            &config.opt,
            &mut diagnostics,
        )?;
        (Some(sig), r)
    };
    let report = RecoveryReport {
        function: output.func.clone(),
        state_form: output.state_form,
        signature: signature.filter(|_| !output.state_form),
        slots: pt
            .slots
            .slots
            .iter()
            .map(|(&a, s)| SlotRow {
                address: format!("{a:#x}"),
                offset: a.wrapping_sub(STACK_BASE) as i64,
                width: s.width,
                global: s.global.clone(),
            })
            .collect(),
        residual_globals: pt.slots.residual_globals.clone(),
        rounds: pt.rounds,
        lifted_instructions: cfg.raw_instruction_count(),
        optimized_instructions: pt.module.functions[&sname].inst_count(),
        output_instructions: output.module.functions[&output.func].inst_count(),
        diagnostics,
    };
    Ok(Brightened { state_form: pt, signature, output, report })
}
