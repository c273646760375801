//! Interpreters for machine code and IR, plus the differential harness.

pub mod diff;
pub mod ir;
pub mod machine;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::machine::DecodeError;

pub use diff::{differential_check, DiffReport, DiffTarget, Mismatch, Outcome};
pub use ir::{run_ir, run_state_form, IrEnv, RtVal};
pub use machine::{run_machine, MachineRun, MachineState};

/// Concrete value of the stack pointer at function entry.
pub const STACK_BASE: u64 = 0x7FFF_FFFF_0000;
/// Bytes of frame below the entry stack pointer treated as local storage.
pub const FRAME_LIMIT: u64 = 4096;
/// Bytes above the entry stack pointer that may hold incoming arguments.
pub const ARG_LIMIT: u64 = 256;
pub const DEFAULT_STEP_BUDGET: u64 = 1_000_000;
/// Return address planted at the entry stack slot; reaching it ends a run.
pub const RETURN_SENTINEL: u64 = 0x0000_0BAD_C0DE_0000;

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecError {
    #[error("step budget of {0} exhausted")]
    BudgetExhausted(u64),
    #[error("read of unmapped memory at {0:#x}")]
    Unmapped(u64),
    #[error("{0}")]
    Decode(String),
    #[error("instruction pointer {0:#x} is not 4-byte aligned")]
    MisalignedRip(u64),
    #[error("stack pointer {0:#x} left the virtual stack")]
    StackOutOfRange(u64),
    #[error("evaluated an unknown value")]
    Unknown,
    #[error("division by zero")]
    DivisionByZero,
    #[error("load from uninitialized storage")]
    Uninitialized,
    #[error("type error: {0}")]
    Type(String),
    #[error("no function @{0}")]
    NoFunction(String),
    #[error("arity mismatch: expected {expected}, got {got}")]
    Arity { expected: usize, got: usize },
}

impl From<DecodeError> for ExecError {
    fn from(e: DecodeError) -> ExecError {
        ExecError::Decode(e.to_string())
    }
}

/// Sparse byte-addressed memory. Bytes never written are unmapped.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Memory {
    pub bytes: HashMap<u64, u8>,
}

impl Memory {
    pub fn read(&self, addr: u64, size: u32) -> Result<u64, ExecError> {
        let mut v = 0u64;
        for i in 0..size as u64 {
            let a = addr.wrapping_add(i);
            let b = *self.bytes.get(&a).ok_or(ExecError::Unmapped(a))?;
            v |= (b as u64) << (8 * i);
        }
        Ok(v)
    }

    pub fn write(&mut self, addr: u64, size: u32, v: u64) {
        for i in 0..size as u64 {
            self.bytes.insert(addr.wrapping_add(i), (v >> (8 * i)) as u8);
        }
    }
}

/// One memory write: address, size in bytes, value.
pub type WriteEvent = (u64, u32, u64);

/// Final byte contents left by a write trace. Two traces with the same net
/// effect differ only in writes that were later overwritten.
pub fn net_effect(writes: &[WriteEvent]) -> BTreeMap<u64, u8> {
    let mut out = BTreeMap::new();
    for &(a, size, v) in writes {
        for i in 0..size as u64 {
            out.insert(a.wrapping_add(i), (v >> (8 * i)) as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn little_endian_roundtrip() {
        let mut m = Memory::default();
        m.write(0x10, 4, 0x1122_3344);
        assert_eq!(m.read(0x10, 2), Ok(0x3344));
        assert_eq!(m.read(0x12, 2), Ok(0x1122));
        assert_eq!(m.read(0x13, 2), Err(ExecError::Unmapped(0x14)));
    }
}
