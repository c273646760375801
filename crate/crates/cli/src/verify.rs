use std::process::ExitCode;

use anyhow::{anyhow, bail, ensure, Context, Result};
use brighten::corpus::SampleMeta;
use brighten::exec::{differential_check, DiffTarget};
use brighten::ir::{parse_module, verify_module, Ty};

use crate::{load_program, write_file, VerifyArgs, EXIT_MISMATCH};

pub fn run(a: &VerifyArgs) -> Result<ExitCode> {
    let (program, entry, abi) = load_program(&a.program)?;
    let text = std::fs::read_to_string(&a.recovered).with_context(|| format!("reading {}", a.recovered.display()))?;
    let m = parse_module(&text).with_context(|| format!("parsing {}", a.recovered.display()))?;
    verify_module(&m).map_err(|v| anyhow!("{} is not well formed: {v:?}", a.recovered.display()))?;
    let name = match &a.func {
        Some(n) => n.clone(),
        None if m.functions.len() == 1 => m.functions.keys().next().unwrap().clone(),
        None => bail!("module has {} functions; choose one with --func", m.functions.len()),
    };
    let f = m.functions.get(&name).ok_or_else(|| anyhow!("no function @{name}"))?;
    let state_form = f.ret_ty == Ty::Void && f.params.len() == 1 && f.ty(f.params[0]) == Ty::Ptr;
    let meta: Option<SampleMeta> = match &a.meta {
        Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?),
        None => None,
    };
    let nargs = match (&meta, state_form) {
        (Some(m), false) => {
            let n = m.signature.arg_count();
            ensure!(n == f.params.len(), "arity mismatch: metadata has {n} arguments, @{name} takes {}", f.params.len());
            n
        }
        (Some(m), true) => m.signature.arg_count(),
        (None, false) => f.params.len(),
        (None, true) => abi.arg_regs().len(),
    };
    let target = if state_form {
        DiffTarget::StateForm { module: &m, func: &name }
    } else {
        DiffTarget::Brightened { module: &m, func: &name }
    };
    let report = differential_check(&program, entry, abi, nargs, target, a.trials, a.seed);
    if let Some(p) = &a.emit_report {
        write_file(p, &(report.to_json() + "\n"))?;
    }
    println!("@{name}: {} trials, {} mismatches", report.trials, report.mismatches.len());
    for mm in report.mismatches.iter().take(3) {
        let args: Vec<String> = mm.inputs.iter().map(|x| format!("{x:#x}")).collect();
        println!("  trial {}: ({}) machine {:?}, recovered {:?}", mm.trial, args.join(", "), mm.machine, mm.ir);
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(EXIT_MISMATCH) })
}
