use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use brighten::machine::{assemble, Abi, Program};
use clap::{Args, Parser, Subcommand, ValueEnum};

mod deobfuscate;
mod verify;

#[derive(Parser)]
#[command(name = "brighten", version, about = "Recover readable functions from obfuscated toy x86-64 assembly")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Recover the control flow graph and a brightened function.
    Deobfuscate(DeobfuscateArgs),
    /// Write a generated clean/obfuscated sample pair and its metadata.
    Gen {
        /// Sample kind, e.g. `bogus_cf` or `for_trick`.
        kind: String,
        seed: u64,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Check recovered IR against the machine program on random inputs.
    Verify(VerifyArgs),
    /// List the rewrite rules the optimizer knows.
    ExplainRules,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SolverChoice {
    Builtin,
    External,
}

#[derive(Args)]
pub struct ProgramArgs {
    /// Assembly file.
    pub input: PathBuf,
    /// Entry label or address; defaults to the program entry.
    #[arg(long)]
    pub entry: Option<String>,
    /// Calling convention, `win64` or `sysv64`.
    #[arg(long, default_value = "win64")]
    pub abi: String,
}

#[derive(Args)]
pub struct DeobfuscateArgs {
    #[command(flatten)]
    pub program: ProgramArgs,
    /// Read-only data ranges, `lo:hi[,lo:hi...]`, end exclusive.
    #[arg(long)]
    pub constant_pool: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub solver_bb_count_jcc: u32,
    #[arg(long, default_value_t = 1)]
    pub solver_bb_count_return: u32,
    /// Solver backend; by default the builtin search falls back to z3 when found.
    #[arg(long, value_enum)]
    pub solver: Option<SolverChoice>,
    /// Executable for the external solver.
    #[arg(long, default_value = "z3")]
    pub solver_cmd: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub timeout_ms: u64,
    /// Keep the state-record signature instead of recovering arguments.
    #[arg(long)]
    pub keep_state: bool,
    /// Write the recovered IR here instead of standard output.
    #[arg(long)]
    pub emit_ir: Option<PathBuf>,
    #[arg(long)]
    pub emit_dot: Option<PathBuf>,
    /// Write the SMT-LIB text of every solver query.
    #[arg(long)]
    pub emit_smt: Option<PathBuf>,
    #[arg(long)]
    pub emit_report: Option<PathBuf>,
    /// Explore the worklist in a seeded random order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sample metadata to compare the results against.
    #[arg(long)]
    pub meta: Option<PathBuf>,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub program: ProgramArgs,
    /// IR module printed by `deobfuscate`.
    pub recovered: PathBuf,
    /// Function to check when the module has more than one.
    #[arg(long)]
    pub func: Option<String>,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sample metadata giving the argument count.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Write the full comparison report as JSON.
    #[arg(long)]
    pub emit_report: Option<PathBuf>,
}

/// Exit status when some control flow could not be resolved.
pub const EXIT_UNRESOLVED: u8 = 3;
/// Exit status when verification found a mismatch.
pub const EXIT_MISMATCH: u8 = 4;

fn explain_rules() -> std::io::Result<()> {
    use brighten::opt::{catalog, procedural};
    let mut out = std::io::stdout().lock();
    for r in catalog::rules() {
        let tag = if r.mba { " [mba]" } else { "" };
        writeln!(out, "{:<28} {} => {}{tag}", r.name, r.lhs, r.rhs)?;
    }
    for (name, what) in procedural::PROCEDURAL {
        writeln!(out, "{name:<28} {what}")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Deobfuscate(a) => deobfuscate::run(&a),
        Command::Gen { kind, seed, out } => gen(&kind, seed, &out),
        Command::Verify(a) => verify::run(&a),
        Command::ExplainRules => {
            // A closed pipe just ends the listing.
            let _ = explain_rules();
            Ok(ExitCode::SUCCESS)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Assemble the input and resolve the entry point and calling convention.
pub fn load_program(a: &ProgramArgs) -> anyhow::Result<(Program, u64, Abi)> {
    let src = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let program = assemble(&src).with_context(|| format!("assembling {}", a.input.display()))?;
    let abi: Abi = a.abi.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
    let entry = match &a.entry {
        None => program.entry,
        Some(e) => match program.labels.get(e) {
            Some(&addr) => addr,
            None => {
                let v = match e.strip_prefix("0x") {
                    Some(h) => u64::from_str_radix(h, 16),
                    None => e.parse(),
                };
                v.map_err(|_| anyhow::anyhow!("entry `{e}` is neither a label nor an address"))?
            }
        },
    };
    Ok((program, entry, abi))
}

pub fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen(kind: &str, seed: u64, out: &Path) -> anyhow::Result<ExitCode> {
    let kind: brighten::corpus::SampleKind = kind.parse()?;
    let sample = brighten::corpus::gen_sample(kind, seed)?;
    for p in sample.write(out)? {
        println!("{}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}
