//! Acceptance criteria over the generated corpus. Each criterion prints
//! one PASS/FAIL line to stderr (uncaptured) and the test fails if any
//! criterion does.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::time::{Duration, Instant};

use brighten::corpus::{gen_sample, Sample, SampleKind};
use brighten::exec::{differential_check, DiffTarget, STACK_BASE};
use brighten::explorer::slice::{slice_instruction_pointer, Prover};
use brighten::explorer::{build_cfg_function, explore, ExploreConfig, RecoveredCfg, VerdictState};
use brighten::ir::{Block, Function, Module, Op};
use brighten::machine::{assemble, Abi, Program};
use brighten::opt::{catalog, OptConfig};
use brighten::recover::{brighten, post_translation_observed, state_form_name, Brightened, RecoverConfig};
use brighten::solver::{
    cache_key, extract_candidate, prove_unique, BuiltinBackend, BvExpr, ExternalBackend, Query, SolverBackend,
    SolverCache, SolverResult, Uniqueness,
};

const SEEDS: u64 = 20;
const TIME_LIMIT: Duration = Duration::from_secs(5);

struct Case {
    sample: Sample,
    program: Program,
    cfg: RecoveredCfg,
    out: Brightened,
    kept: Brightened,
    elapsed: Duration,
}

fn explore_config(s: &Sample) -> ExploreConfig {
    ExploreConfig {
        solver_bb_count_jcc: s.meta.solver_bb_count_jcc,
        constant_pool: s.meta.constant_pool.clone(),
        ..Default::default()
    }
}

fn recover_config(s: &Sample, keep_state: bool) -> RecoverConfig {
    RecoverConfig { constant_pool: s.meta.constant_pool.clone(), keep_state, ..Default::default() }
}

fn case(kind: SampleKind, seed: u64) -> Case {
    let sample = gen_sample(kind, seed).unwrap();
    let program = assemble(&sample.obfuscated).unwrap();
    let t = Instant::now();
    let cfg = explore(&program, program.entry, &explore_config(&sample)).unwrap();
    let out = brighten(&program, &cfg, &recover_config(&sample, false)).unwrap();
    let elapsed = t.elapsed();
    let kept = brighten(&program, &cfg, &recover_config(&sample, true)).unwrap();
    Case { sample, program, cfg, out, kept, elapsed }
}

fn id(c: &Case) -> String {
    c.sample.stem()
}

/// Collects failures of one criterion.
#[derive(Default)]
struct Check {
    failures: Vec<String>,
    checked: usize,
}

impl Check {
    fn expect(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok {
            self.failures.push(what());
        }
    }
}

struct Report {
    lines: Vec<(String, bool)>,
}

impl Report {
    fn record(&mut self, name: &str, c: Check, summary: String) {
        let ok = c.failures.is_empty();
        let mut line = format!("{} {name}: {summary}", if ok { "PASS" } else { "FAIL" });
        for f in c.failures.iter().take(5) {
            line.push_str(&format!("\n    {f}"));
        }
        if c.failures.len() > 5 {
            line.push_str(&format!("\n    ... {} more", c.failures.len() - 5));
        }
        let _ = writeln!(std::io::stderr(), "{line}");
        self.lines.push((line, ok));
    }
}

fn output(b: &Brightened) -> &Function {
    &b.output.module.functions[&b.output.func]
}

fn has_back_edge(f: &Function) -> bool {
    // 0 unvisited, 1 on the stack, 2 done.
    let mut color: BTreeMap<Block, u8> = BTreeMap::new();
    let mut stack = vec![(f.entry(), 0usize)];
    color.insert(f.entry(), 1);
    while let Some((b, i)) = stack.pop() {
        let succs = f.succs(b);
        if i < succs.len() {
            stack.push((b, i + 1));
            let s = succs[i];
            match color.get(&s).copied().unwrap_or(0) {
                1 => return true,
                0 => {
                    color.insert(s, 1);
                    stack.push((s, 0));
                }
                _ => {}
            }
        } else {
            color.insert(b, 2);
        }
    }
    false
}

/// Constant operands of every icmp in `f`.
fn compared_constants(f: &Function) -> Vec<Vec<u64>> {
    f.insts()
        .into_iter()
        .filter(|&v| matches!(f.op(v), Some(Op::Icmp(_))))
        .map(|v| f.args(v).iter().filter_map(|&a| f.as_const(a)).collect())
        .collect()
}

fn rq1(cases: &[Case], r: &mut Report) {
    let mut c = Check::default();
    let mut slowest = Duration::ZERO;
    for k in cases {
        let (n, want) = (k.cfg.merged_block_count(), k.sample.meta.clean_block_count);
        c.expect(n >= want && n <= want + 1, || format!("{}: {n} blocks, clean has {want}", id(k)));
        let dead: HashSet<u64> = k.sample.meta.injected_dead_block_addresses.iter().copied().collect();
        let lifted_dead = k.cfg.blocks.values().flat_map(|b| &b.instrs).any(|a| dead.contains(a));
        c.expect(!lifted_dead, || format!("{}: dead block lifted", id(k)));
        c.expect(k.elapsed < TIME_LIMIT, || format!("{}: took {:?}", id(k), k.elapsed));
        slowest = slowest.max(k.elapsed);
    }
    let s = format!("{} samples, slowest {:.0} ms", cases.len(), slowest.as_secs_f64() * 1e3);
    r.record("RQ1 CFG recovery", c, s);
}

fn rq2(cases: &[Case], r: &mut Report) {
    let mut c = Check::default();
    let (mut found, mut injected) = (0, 0);
    for k in cases {
        let n = k.cfg.proven_opaque().len();
        found += n;
        injected += k.sample.meta.injected_op_count;
        c.expect(n == k.sample.meta.injected_op_count, || {
            format!("{}: {n} proven, {} injected", id(k), k.sample.meta.injected_op_count)
        });
    }
    for k in cases.iter().filter(|k| k.sample.meta.kind == SampleKind::CrossBlockOp) {
        let one = ExploreConfig { solver_bb_count_jcc: 1, ..explore_config(&k.sample) };
        let short = explore(&k.program, k.program.entry, &one).unwrap();
        c.expect(short.proven_opaque().len() < k.sample.meta.injected_op_count, || {
            format!("{}: proven with a one-block slice", id(k))
        });
        c.expect(k.sample.meta.solver_bb_count_jcc == 2, || format!("{}: generated for a longer slice", id(k)));
    }
    r.record("RQ2 opaque predicate detection", c, format!("{found}/{injected} proven"));
}

fn rq3(cases: &[Case], r: &mut Report) {
    let mut c = Check::default();
    let mut worst = 0f64;
    for k in cases {
        let f = output(&k.out);
        match k.sample.meta.kind {
            SampleKind::ForTrick => {
                c.expect(!has_back_edge(f), || format!("{}: loop survives", id(k)));
                c.expect(compared_constants(f).is_empty(), || format!("{}: compare survives", id(k)));
            }
            SampleKind::SplitTrick => {
                let want = k.sample.meta.split_constant.unwrap();
                let cmps = compared_constants(f);
                c.expect(!has_back_edge(f), || format!("{}: loop survives", id(k)));
                c.expect(cmps == [vec![want]], || format!("{}: compares {cmps:x?}, want only {want:#x}", id(k)));
            }
            _ => {}
        }
        let (opt, lifted) = (k.out.report.optimized_instructions, k.out.report.lifted_instructions);
        worst = worst.max(opt as f64 / lifted as f64);
        c.expect(opt * 2 <= lifted, || format!("{}: {opt} of {lifted} instructions left", id(k)));
    }
    r.record("RQ3 deobfuscation effectiveness", c, format!("worst ratio {:.1}%", worst * 100.0));
}

fn rq4(cases: &[Case], r: &mut Report) {
    let mut c = Check::default();
    for k in cases {
        let m = &k.sample.meta.signature;
        let got = k.out.signature.map(|s| (s.register_args, s.stack_args, s.returns_value));
        c.expect(got == Some((m.register_args, m.stack_args, m.returns_value)), || {
            format!("{}: {got:?}, metadata {m:?}", id(k))
        });
        c.expect(!k.out.output.state_form, || format!("{}: fell back to the state form", id(k)));
        if k.sample.meta.kind == SampleKind::OverlappingSlots {
            let st = &k.out.state_form;
            let f = &st.module.functions[&st.func];
            let frame = STACK_BASE - 0x1000..STACK_BASE + 0x1000;
            let left = f
                .insts()
                .into_iter()
                .filter(|&v| matches!(f.op(v), Some(Op::MemRead | Op::MemWrite)))
                .filter(|&v| f.as_const(f.args(v)[0]).is_some_and(|a| frame.contains(&a)))
                .count();
            c.expect(left == 0, || format!("{}: {left} frame accesses remain", id(k)));
        }
    }
    r.record("RQ4 signature and stack recovery", c, format!("{} samples", cases.len()));
}

fn rq5(cases: &[Case], r: &mut Report) {
    let mut c = Check::default();
    for k in cases {
        let n = k.sample.meta.signature.arg_count();
        let (p, e) = (&k.program, k.program.entry);
        let b = &k.out.output;
        let t = DiffTarget::Brightened { module: &b.module, func: &b.func };
        let d = differential_check(p, e, Abi::Win64, n, t, 1000, k.sample.meta.seed);
        c.expect(d.passed(), || format!("{}: brightened, {} mismatches", id(k), d.mismatches.len()));
        let s = &k.kept.output;
        let t = DiffTarget::StateForm { module: &s.module, func: &s.func };
        let d = differential_check(p, e, Abi::Win64, n, t, 1000, k.sample.meta.seed);
        c.expect(d.passed(), || format!("{}: state form, {} mismatches", id(k), d.mismatches.len()));
    }
    r.record("RQ5 semantic equivalence", c, format!("{} samples x 2 forms x 1000 trials", cases.len()));
}

/// Every slice the explorer may build for a lifted block: the block alone
/// and behind each predecessor.
fn slice_expressions(k: &Case) -> Vec<BvExpr> {
    let be = BuiltinBackend::default();
    let mut cache = SolverCache::in_memory();
    let pool = k.sample.meta.constant_pool.clone();
    let mut pr = Prover::new(&k.program, OptConfig::default(), pool, &be, &mut cache, None);
    let mut out = Vec::new();
    for (a, lb) in &k.cfg.blocks {
        let mut chains = vec![vec![lb]];
        chains.extend(k.cfg.edges.iter().filter(|e| e.1 == *a).map(|e| vec![&k.cfg.blocks[&e.0], lb]));
        for ch in chains {
            let f = pr.optimize_slice(&slice_instruction_pointer(&ch, None).unwrap());
            if let Ok(e) = extract_candidate(&f, Some(&pr.pool)) {
                out.push(e);
            }
        }
    }
    out
}

const ORACLE_BITS: u32 = 24;

/// Distinct values of `e`, stopping at two. Spaces wider than
/// `ORACLE_BITS` are enumerated over the variable bits the root depends on.
fn distinct_values(e: &BvExpr) -> Option<BTreeSet<u64>> {
    let masks: Vec<u64> = if e.var_bits() <= ORACLE_BITS {
        e.vars().iter().map(|v| brighten::ir::mask(v.1)).collect()
    } else {
        brighten::solver::builtin::demanded_var_bits(e)
    };
    let bits: Vec<(usize, u32)> =
        masks.iter().enumerate().flat_map(|(i, m)| (0..64).filter(move |b| m >> b & 1 == 1).map(move |b| (i, b))).collect();
    if bits.len() as u32 > ORACLE_BITS {
        return None;
    }
    let mut seen = BTreeSet::new();
    let mut vals = vec![0u64; e.vars().len()];
    let mut scratch = vec![0u64; e.nodes().len()];
    for n in 0u64..1 << bits.len() {
        vals.iter_mut().for_each(|v| *v = 0);
        for (j, &(i, b)) in bits.iter().enumerate() {
            vals[i] |= (n >> j & 1) << b;
        }
        seen.insert(e.eval_into(&vals, &mut scratch));
        if seen.len() > 1 {
            break;
        }
    }
    Some(seen)
}

fn status(r: &SolverResult) -> &'static str {
    match r {
        SolverResult::Sat { .. } => "sat",
        SolverResult::Unsat => "unsat",
        SolverResult::Unknown(_) => "unknown",
    }
}

fn solver_protocol(cases: &[Case], r: &mut Report) {
    let mut c = Check::default();
    let mut seen = HashSet::new();
    let mut projected = Vec::new();
    for k in cases {
        for e in slice_expressions(k) {
            let p = e.project(8).zext(64);
            if p.as_const().is_none() && seen.insert(cache_key(&p)) {
                projected.push((id(k), p));
            }
        }
    }
    let builtin = BuiltinBackend::default();
    let z3 = ExternalBackend::find_z3();
    let (mut opaque, mut skipped) = (0, 0);
    for (name, e) in &projected {
        let Some(vals) = distinct_values(e) else {
            skipped += 1;
            continue;
        };
        let v = match &z3 {
            Some(z) => prove_unique(e, &brighten::solver::Portfolio(vec![Box::new(builtin.clone()), Box::new(z.clone())]), None),
            None => prove_unique(e, &builtin, None),
        };
        let ok = match &v {
            Ok(Uniqueness::ProvenOpaque(d)) => vals.len() == 1 && vals.contains(d),
            Ok(Uniqueness::NotOpaque(a, b)) => a != b && vals.len() > 1,
            _ => false,
        };
        opaque += matches!(v, Ok(Uniqueness::ProvenOpaque(_))) as usize;
        c.expect(ok, || format!("{name}: {v:?}, oracle {vals:x?}"));
    }
    let mut agreed = 0;
    if let Some(z) = &z3 {
        for (name, e) in projected.iter().filter(|(_, e)| e.var_bits() <= 16) {
            let first = builtin.solve(&Query { expr: e, exclude: None, timeout: None, salt: 0 });
            let mut excludes = vec![None];
            if let SolverResult::Sat { value, .. } = first {
                excludes.push(Some(value));
            }
            for exclude in excludes {
                let q = Query { expr: e, exclude, timeout: None, salt: 0 };
                let (a, b) = (builtin.solve(&q), z.solve(&q));
                c.expect(status(&a) == status(&b), || format!("{name}: builtin {}, z3 {}", status(&a), status(&b)));
                agreed += 1;
            }
        }
    }
    let ext = if z3.is_some() { format!("{agreed} queries agree with z3") } else { "no z3, agreement skipped".into() };
    let s = format!("{} projected slices, {opaque} unique, {skipped} too wide; {ext}", projected.len());
    c.expect(skipped * 10 <= projected.len(), || format!("{skipped} slices too wide for the oracle"));
    r.record("Solver protocol", c, s);
}

fn exhaustive_8bit(rule: &catalog::Rule) -> bool {
    let (mut nv, mut nc) = (0u8, 0u8);
    rule.lhs.count(&mut nv, &mut nc);
    rule.rhs.count(&mut nv, &mut nc);
    let n = (nv + nc) as usize;
    let m = if rule.lhs.is_bool() { 1 } else { 0xff };
    let mut vals = vec![0u64; n];
    for x in 0u64..1 << (8 * n) {
        for (i, v) in vals.iter_mut().enumerate() {
            *v = x >> (8 * i) & 0xff;
        }
        let (env, cs) = vals.split_at(nv as usize);
        if rule.lhs.eval(env, cs, 8) & m != rule.rhs.eval(env, cs, 8) & m {
            return false;
        }
    }
    true
}

fn optimizer_soundness(cases: &[Case], r: &mut Report) {
    let mut c = Check::default();
    for rule in catalog::rules() {
        c.expect(exhaustive_8bit(rule), || format!("rule {} fails at 8 bits", rule.name));
        c.expect(catalog::validate(rule).is_ok(), || format!("rule {} fails validation", rule.name));
    }
    let nrules = c.checked / 2;
    let mut stages = 0;
    for k in cases {
        let sname = state_form_name(k.cfg.entry);
        let m = build_cfg_function(&k.cfg, &sname).unwrap();
        let n = k.sample.meta.signature.arg_count();
        let (p, e) = (&k.program, k.program.entry);
        let rc = recover_config(&k.sample, true);
        let mut bad = Vec::new();
        post_translation_observed(&m, &sname, p, e, &rc, &mut |stage, f, globals| {
            let mut m = Module::new();
            m.globals = globals.clone();
            m.add(f.clone());
            let t = DiffTarget::StateForm { module: &m, func: &sname };
            let d = differential_check(p, e, Abi::Win64, n, t, 200, k.sample.meta.seed);
            stages += 1;
            if !d.passed() {
                bad.push(stage.to_string());
            }
        })
        .unwrap();
        c.expect(bad.is_empty(), || format!("{}: mismatches after {bad:?}", id(k)));
    }
    r.record("Optimizer soundness", c, format!("{nrules} rules, {stages} pipeline stages checked"));
}

fn order_independence(cases: &[Case], r: &mut Report) {
    let mut c = Check::default();
    let states = |g: &RecoveredCfg| -> BTreeMap<u64, VerdictState> {
        g.verdicts.iter().map(|(a, v)| (*a, v.state.clone())).collect()
    };
    for k in cases {
        let base = (k.cfg.blocks.keys().copied().collect::<Vec<_>>(), &k.cfg.edges, states(&k.cfg));
        for order in 0..10 {
            let cfg = ExploreConfig { order_seed: Some(order * 7919 + 1), ..explore_config(&k.sample) };
            let g = explore(&k.program, k.program.entry, &cfg).unwrap();
            let other = (g.blocks.keys().copied().collect::<Vec<_>>(), &g.edges, states(&g));
            c.expect(other == base, || format!("{}: ordering {order} differs", id(k)));
        }
    }
    r.record("Order independence", c, format!("{} samples x 10 orderings", cases.len()));
}

#[test]
fn acceptance() {
    let cases: Vec<Case> =
        SampleKind::ALL.into_iter().flat_map(|kind| (0..SEEDS).map(move |seed| case(kind, seed))).collect();
    let mut r = Report { lines: Vec::new() };
    rq1(&cases, &mut r);
    rq2(&cases, &mut r);
    rq3(&cases, &mut r);
    rq4(&cases, &mut r);
    rq5(&cases, &mut r);
    solver_protocol(&cases, &mut r);
    optimizer_soundness(&cases, &mut r);
    order_independence(&cases, &mut r);
    let failed: Vec<&str> = r.lines.iter().filter(|l| !l.1).map(|l| l.0.as_str()).collect();
    assert!(failed.is_empty(), "{} criteria failed:\n{}", failed.len(), failed.join("\n"));
}
