//! Optimization passes and the fixpoint pipeline.

pub mod catalog;
pub mod cfg;
pub mod cse;
pub mod dce;
pub mod inline;
pub mod mem2reg;
pub mod memory;
pub mod procedural;
pub mod simplify;
pub mod unroll;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::ir::{verify, Function, Global};

pub use cfg::simplify_cfg;
pub use cse::cse;
pub use dce::dce;
pub use inline::inline_calls;
pub use mem2reg::{mem2reg, sroa};
pub use memory::forward_memory;
pub use simplify::{constant_fold, instcombine};
pub use unroll::{unroll_loops, DEFAULT_TRIP_LIMIT};

pub const DEFAULT_MAX_ITERATIONS: u32 = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OptError {
    #[error("recursive inlining through {}", .0.join(" -> "))]
    RecursiveInline(Vec<String>),
    #[error("unknown pass `{0}`")]
    UnknownPass(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PassKind {
    ConstantFold,
    InstCombine,
    Sroa,
    Mem2Reg,
    MemForward,
    Cse,
    Dce,
    SimplifyCfg,
    Unroll,
}

impl PassKind {
    pub const ALL: [PassKind; 9] = [
        PassKind::ConstantFold,
        PassKind::InstCombine,
        PassKind::Sroa,
        PassKind::Mem2Reg,
        PassKind::MemForward,
        PassKind::Cse,
        PassKind::Dce,
        PassKind::SimplifyCfg,
        PassKind::Unroll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PassKind::ConstantFold => "constant_fold",
            PassKind::InstCombine => "instcombine",
            PassKind::Sroa => "sroa",
            PassKind::Mem2Reg => "mem2reg",
            PassKind::MemForward => "memforward",
            PassKind::Cse => "cse",
            PassKind::Dce => "dce",
            PassKind::SimplifyCfg => "simplify_cfg",
            PassKind::Unroll => "unroll",
        }
    }
}

impl fmt::Display for PassKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PassKind {
    type Err = OptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PassKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| OptError::UnknownPass(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PassPipeline {
    pub passes: Vec<PassKind>,
    pub max_iterations: u32,
}

impl Default for PassPipeline {
    fn default() -> Self {
        PassPipeline { passes: PassKind::ALL.to_vec(), max_iterations: DEFAULT_MAX_ITERATIONS }
    }
}

impl PassPipeline {
    /// Parse a comma separated pass list.
    pub fn from_names(list: &str) -> Result<PassPipeline, OptError> {
        let passes = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<_, _>>()?;
        Ok(PassPipeline { passes, max_iterations: DEFAULT_MAX_ITERATIONS })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OptConfig {
    pub mba_rules: bool,
    pub trip_limit: u32,
    pub pipeline: PassPipeline,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig { mba_rules: true, trip_limit: DEFAULT_TRIP_LIMIT, pipeline: PassPipeline::default() }
    }
}

#[derive(Clone, Debug, Default)]
pub struct OptContext {
    pub config: OptConfig,
    /// Module globals, so mirrored ones can be treated as memory.
    pub globals: Option<BTreeMap<String, Global>>,
    pub diagnostics: Vec<String>,
    /// Rewrite rule firing counts.
    pub fired: BTreeMap<&'static str, u64>,
}

impl OptContext {
    pub fn new(config: OptConfig) -> OptContext {
        OptContext { config, ..Default::default() }
    }

    pub fn diag(&mut self, msg: String) {
        self.diagnostics.push(msg);
    }

    pub fn fired(&mut self, rule: &'static str) {
        *self.fired.entry(rule).or_insert(0) += 1;
    }
}

pub fn run_pass(f: &mut Function, pass: PassKind, ctx: &mut OptContext) -> bool {
    match pass {
        PassKind::ConstantFold => constant_fold(f, ctx),
        PassKind::InstCombine => instcombine(f, ctx),
        PassKind::Sroa => sroa(f),
        PassKind::Mem2Reg => mem2reg(f),
        PassKind::MemForward => forward_memory(f, ctx.globals.as_ref()),
        PassKind::Cse => cse(f),
        PassKind::Dce => dce(f),
        PassKind::SimplifyCfg => simplify_cfg(f),
        PassKind::Unroll => unroll_loops(f, ctx.config.trip_limit),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PipelineReport {
    pub rounds: u32,
    /// Which passes changed the function in the final round.
    pub last_changed: Vec<(PassKind, bool)>,
    /// Changes per pass over all rounds.
    pub change_counts: BTreeMap<PassKind, u32>,
    pub converged: bool,
}

/// Run the configured passes in rounds until a round changes nothing or
/// the iteration bound is hit.
pub fn run_pipeline(f: &mut Function, ctx: &mut OptContext) -> PipelineReport {
    run_pipeline_observed(f, ctx, &mut |_, _| {})
}

/// `run_pipeline`, calling `observe` after every pass that changed `f`.
pub fn run_pipeline_observed(
    f: &mut Function,
    ctx: &mut OptContext,
    observe: &mut dyn FnMut(PassKind, &Function),
) -> PipelineReport {
    let pipeline = ctx.config.pipeline.clone();
    let mut report = PipelineReport::default();
    while report.rounds < pipeline.max_iterations.max(1) {
        report.rounds += 1;
        report.last_changed.clear();
        let mut any = false;
        for &p in &pipeline.passes {
            let c = run_pass(f, p, ctx);
            if cfg!(debug_assertions) {
                if let Err(v) = verify(f) {
                    panic!("{p} broke {}: {:?}", f.name, v);
                }
            }
            report.last_changed.push((p, c));
            if c {
                *report.change_counts.entry(p).or_insert(0) += 1;
                observe(p, f);
            }
            any |= c;
        }
        if !any {
            report.converged = true;
            break;
        }
    }
    if !report.converged {
        ctx.diag(format!(
            "warning: {} still changing after {} iterations",
            f.name, pipeline.max_iterations
        ));
    }
    f.compact();
    report
}
