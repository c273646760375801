//! Differential checking of recovered code against the machine interpreter.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ir::{run_ir, run_state_form, IrEnv};
use super::machine::run_machine;
use super::ExecError;
use crate::ir::Module;
use crate::machine::{Abi, Operand, Program};

/// What a run produced, for comparison purposes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Value(u64),
    /// Function returned without a value.
    Void,
    BudgetExhausted,
    Error(String),
}

impl Outcome {
    fn from_result(r: Result<Option<u64>, ExecError>) -> Outcome {
        match r {
            Ok(Some(v)) => Outcome::Value(v),
            Ok(None) => Outcome::Void,
            Err(ExecError::BudgetExhausted(_)) => Outcome::BudgetExhausted,
            Err(e) => Outcome::Error(e.to_string()),
        }
    }

    fn agrees(&self, other: &Outcome) -> bool {
        match (self, other) {
            (Outcome::Value(_), Outcome::Void) | (Outcome::Void, Outcome::Value(_)) => true,
            (Outcome::Error(_), _) | (_, Outcome::Error(_)) => false,
            _ => self == other,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub trial: usize,
    pub inputs: Vec<u64>,
    pub machine: Outcome,
    pub ir: Outcome,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffReport {
    pub trials: usize,
    pub mismatches: Vec<Mismatch>,
    /// Block edges observed while running the reference program.
    pub edge_trace: BTreeSet<(u64, u64)>,
}

impl DiffReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// The side compared against the reference machine program.
#[derive(Clone, Copy)]
pub enum DiffTarget<'a> {
    /// An argument-based function.
    Brightened { module: &'a Module, func: &'a str },
    /// A function over a state record, run through the context-switch shim.
    StateForm { module: &'a Module, func: &'a str },
    /// Another machine program with the same calling convention.
    Machine { program: &'a Program, entry: u64 },
}

/// Values worth feeding as arguments: immediates appearing in the program
/// and their neighbours, plus common edge cases.
pub fn interesting_values(p: &Program) -> Vec<u64> {
    let mut s: BTreeSet<u64> = [0u64, 1, 2, u64::MAX, 0x7f, 0x80, 0xff, 0x100, i64::MAX as u64, i64::MIN as u64]
        .into_iter()
        .collect();
    for i in p.instructions.values() {
        for op in &i.operands {
            if let Operand::Imm(v) = op {
                let v = *v as u64;
                s.extend([v, v.wrapping_add(1), v.wrapping_sub(1), v & 0xffff_ffff]);
            }
        }
    }
    s.into_iter().collect()
}

pub fn random_args(rng: &mut ChaCha8Rng, pool: &[u64], n: usize) -> Vec<u64> {
    (0..n)
        .map(|_| match rng.gen_range(0..8) {
            0 | 1 => pool[rng.gen_range(0..pool.len())],
            2 => rng.gen_range(0..=16),
            3 => rng.gen::<u8>() as u64,
            4 => rng.gen::<u32>() as u64,
            _ => rng.gen(),
        })
        .collect()
}

/// Compare `target` against `program` on `trials` argument tuples drawn
/// deterministically from `seed`.
pub fn differential_check(
    program: &Program,
    entry: u64,
    abi: Abi,
    nargs: usize,
    target: DiffTarget,
    trials: usize,
    seed: u64,
) -> DiffReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = interesting_values(program);
    let mut report = DiffReport { trials, mismatches: Vec::new(), edge_trace: BTreeSet::new() };
    for trial in 0..trials {
        let args = random_args(&mut rng, &pool, nargs);
        let reference = run_machine(program, entry, &args, abi);
        if let Ok(r) = &reference {
            report.edge_trace.extend(r.edges.iter().copied());
        }
        let m = Outcome::from_result(reference.map(|r| Some(r.ret)));
        let other = match target {
            DiffTarget::Brightened { module, func } => {
                let mut env = IrEnv::for_program(program);
                run_ir(module, func, &args, &mut env)
            }
            DiffTarget::StateForm { module, func } => {
                run_state_form(module, func, program, entry, &args, abi).map(|(v, _)| Some(v))
            }
            DiffTarget::Machine { program: p2, entry: e2 } => run_machine(p2, e2, &args, abi).map(|r| Some(r.ret)),
        };
        let o = Outcome::from_result(other);
        if !m.agrees(&o) {
            report.mismatches.push(Mismatch { trial, inputs: args, machine: m, ir: o });
        }
    }
    report
}
