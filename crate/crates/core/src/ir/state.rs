//! Field layout of the machine-state record.
//!
//! Sixteen 64-bit GPR fields in hardware order, four flags stored as 8-bit
//! values, then the instruction pointer.

use super::Ty;
use crate::machine::{Flag, Gpr};

pub const NUM_GPR: usize = 16;
pub const FLAG_BASE: usize = 16;
pub const RIP: usize = 20;
pub const NUM_FIELDS: usize = 21;
pub const RSP: usize = 4;
pub const RAX: usize = 0;

const NAMES: [&str; NUM_FIELDS] = [
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12",
    "r13", "r14", "r15", "zf", "sf", "cf", "of", "rip",
];

pub fn field_name(i: usize) -> &'static str {
    NAMES[i]
}

pub fn field_index(name: &str) -> Option<usize> {
    NAMES.iter().position(|&n| n == name)
}

pub fn field_ty(i: usize) -> Ty {
    if (FLAG_BASE..FLAG_BASE + 4).contains(&i) {
        Ty::I8
    } else {
        Ty::I64
    }
}

pub fn gpr_field(g: Gpr) -> usize {
    g.index()
}

pub fn flag_field(f: Flag) -> usize {
    FLAG_BASE + f.index()
}
