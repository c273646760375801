use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use brighten::corpus::SampleMeta;
use brighten::explorer::{explore_with, ExploreConfig, RecoveredCfg};
use brighten::ir::print_module;
use brighten::recover::{brighten, Brightened, RecoverConfig};
use brighten::solver::{BuiltinBackend, ExternalBackend, Portfolio, SolverBackend, SolverCache};
use serde_json::{json, Value};

use crate::{load_program, write_file, DeobfuscateArgs, SolverChoice, EXIT_UNRESOLVED};

fn parse_int(s: &str) -> Result<u64> {
    let s = s.trim();
    let v = match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    };
    v.with_context(|| format!("bad number `{s}`"))
}

/// `lo:hi[,lo:hi...]`
pub fn parse_pool(s: &str) -> Result<Vec<(u64, u64)>> {
    s.split(',')
        .filter(|r| !r.trim().is_empty())
        .map(|r| {
            let (lo, hi) = r.split_once(':').with_context(|| format!("range `{r}` is not `lo:hi`"))?;
            let (lo, hi) = (parse_int(lo)?, parse_int(hi)?);
            anyhow::ensure!(lo < hi, "empty range `{r}`");
            Ok((lo, hi))
        })
        .collect()
}

fn backend(a: &DeobfuscateArgs) -> Box<dyn SolverBackend> {
    match a.solver {
        None => Box::new(Portfolio::standard()),
        Some(SolverChoice::Builtin) => Box::new(BuiltinBackend::default()),
        Some(SolverChoice::External) => Box::new(ExternalBackend::z3(&a.solver_cmd)),
    }
}

fn hex(a: u64) -> String {
    format!("{a:#x}")
}

fn verdicts(cfg: &RecoveredCfg) -> Vec<Value> {
    cfg.reachable()
        .into_iter()
        .map(|a| {
            let v = &cfg.verdicts[&a];
            json!({
                "block": hex(a),
                "terminator": hex(cfg.blocks[&a].last_addr()),
                "state": v.state.to_string(),
                "proof_source": format!("{:?}", v.proof_source).to_lowercase(),
            })
        })
        .collect()
}

fn comparison(meta: &SampleMeta, cfg: &RecoveredCfg, b: Option<&Brightened>) -> Value {
    let sig = b.and_then(|b| b.signature);
    json!({
        "kind": meta.kind,
        "seed": meta.seed,
        "opaque_predicates": format!("{}/{}", cfg.proven_opaque().len(), meta.injected_op_count),
        "blocks": format!("{}/{}", cfg.merged_block_count(), meta.clean_block_count),
        "signature_matches": sig.map(|s| {
            (s.register_args, s.stack_args, s.returns_value)
                == (meta.signature.register_args, meta.signature.stack_args, meta.signature.returns_value)
        }),
    })
}

pub fn run(a: &DeobfuscateArgs) -> Result<ExitCode> {
    let (program, entry, abi) = load_program(&a.program)?;
    let pool = match &a.constant_pool {
        Some(s) => parse_pool(s)?,
        None => vec![],
    };
    let meta: Option<SampleMeta> = match &a.meta {
        Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?),
        None => None,
    };
    let ecfg = ExploreConfig {
        solver_bb_count_jcc: a.solver_bb_count_jcc,
        solver_bb_count_return: a.solver_bb_count_return,
        constant_pool: pool.clone(),
        timeout_ms: a.timeout_ms,
        order_seed: a.seed,
        ..Default::default()
    };
    let start = Instant::now();
    let backend = backend(a);
    let mut cache = SolverCache::in_memory();
    let cfg = explore_with(&program, entry, &ecfg, backend.as_ref(), &mut cache)?;
    let explored = start.elapsed();
    if let Some(p) = &a.emit_dot {
        write_file(p, &cfg.to_dot())?;
    }
    if let Some(p) = &a.emit_smt {
        let text: String = cfg
            .smt_queries
            .iter()
            .map(|(chain, q)| {
                let c: Vec<String> = chain.iter().map(|&x| hex(x)).collect();
                format!("; chain {}\n{q}\n", c.join(" "))
            })
            .collect();
        write_file(p, &text)?;
    }
    let unknown = cfg.unknown_blocks();
    let rc = RecoverConfig { abi, constant_pool: pool.clone(), keep_state: a.keep_state, ..Default::default() };
    let t1 = Instant::now();
    let recovered = if unknown.is_empty() { Some(brighten(&program, &cfg, &rc)?) } else { None };
    let optimized = t1.elapsed();

    let report = json!({
        "input": a.program.input.display().to_string(),
        "entry": hex(entry),
        "abi": abi.name(),
        "config": {
            "constant_pool": pool.iter().map(|&(l, h)| format!("{l:#x}:{h:#x}")).collect::<Vec<_>>(),
            "solver_bb_count_jcc": a.solver_bb_count_jcc,
            "solver_bb_count_return": a.solver_bb_count_return,
            "solver": backend.name(),
            "timeout_ms": a.timeout_ms,
            "keep_state": a.keep_state,
            "seed": a.seed,
        },
        "blocks": {
            "lifted": cfg.blocks.len(),
            "recovered": cfg.merged_block_count(),
            "edges": cfg.edges.len(),
            "after_optimization": recovered.as_ref().map(|b| b.output.module.functions[&b.output.func].layout.len()),
        },
        "opaque_predicates": cfg.proven_opaque().into_iter().map(hex).collect::<Vec<_>>(),
        "unresolved_blocks": unknown.iter().copied().map(hex).collect::<Vec<_>>(),
        "verdicts": verdicts(&cfg),
        "recovery": recovered.as_ref().map(|b| &b.report),
        "expected": meta.as_ref().map(|m| comparison(m, &cfg, recovered.as_ref())),
        "diagnostics": cfg.diagnostics,
        "timings_ms": {
            "lift_and_explore": explored.as_secs_f64() * 1e3,
            "optimize": optimized.as_secs_f64() * 1e3,
        },
    });
    if let Some(p) = &a.emit_report {
        write_file(p, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }

    eprintln!(
        "{}: {} blocks recovered ({} lifted), {} opaque predicates",
        a.program.input.display(),
        cfg.merged_block_count(),
        cfg.blocks.len(),
        cfg.proven_opaque().len()
    );
    if let Some(m) = &meta {
        eprintln!("  expected {} opaque predicates, {} blocks", m.injected_op_count, m.clean_block_count);
    }
    let Some(b) = recovered else {
        let u: Vec<String> = unknown.iter().map(|&x| hex(x)).collect();
        eprintln!("unresolved control flow at {}; no function emitted", u.join(", "));
        return Ok(ExitCode::from(EXIT_UNRESOLVED));
    };
    match b.report.signature {
        Some(s) => eprintln!(
            "  signature: {} register + {} stack arguments, {}",
            s.register_args,
            s.stack_args,
            if s.returns_value { "returns a value" } else { "void" }
        ),
        None => eprintln!("  state-record form"),
    }
    for d in &b.report.diagnostics {
        eprintln!("  {d}");
    }
    let ir = print_module(&b.output.module);
    match &a.emit_ir {
        Some(p) => write_file(p, &ir)?,
        None => print!("{ir}"),
    }
    Ok(ExitCode::SUCCESS)
}
