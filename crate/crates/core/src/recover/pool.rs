//! Reads from read-only data become constants.

use crate::ir::{Function, Op, Value};
use crate::machine::Program;

/// Half-open address ranges `[lo, hi)`.
pub type Ranges = [(u64, u64)];

pub fn in_ranges(ranges: &Ranges, addr: u64) -> bool {
    ranges.iter().any(|&(lo, hi)| lo <= addr && addr < hi)
}

/// Replace each `memread` at a constant address inside `ranges` with the
/// program data stored there. Reads that leave the mapped data are left
/// alone and reported.
pub fn promote_constant_pool(f: &mut Function, program: &Program, ranges: &Ranges, diags: &mut Vec<String>) -> bool {
    if ranges.is_empty() {
        return false;
    }
    let mut changed = false;
    for v in f.insts() {
        if f.op(v) != Some(&Op::MemRead) {
            continue;
        }
        let Some(addr) = f.as_const(f.args(v)[0]) else { continue };
        if !in_ranges(ranges, addr) {
            continue;
        }
        let ty = f.ty(v);
        let size = ty.bits() / 8;
        let mapped = (0..size as u64).all(|i| in_ranges(ranges, addr.wrapping_add(i)));
        match program.read_data(addr, size).filter(|_| mapped) {
            Some(c) => {
                let k: Value = f.konst(ty, c);
                f.replace_all_uses(v, k);
                f.remove(v);
                changed = true;
            }
            None => diags.push(format!(
                "warning: {}: read of {size} bytes at {addr:#x} leaves the constant pool",
                f.name
            )),
        }
    }
    changed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_module, print_function};
    use crate::machine::assemble;

    fn program() -> Program {
        assemble(".data 0x4000: 2a 00 00 00 00 00 00 00 07\nret").unwrap()
    }

    #[test]
    fn constant_reads_are_promoted() {
        let m = parse_module(
            "define i64 @f(i64 %0) {\nb0:\n  %1 = memread i64 i64 0x4000\n  %2 = memread i64 %0\n  %3 = add i64 %1, %2\n  ret %3\n}\n",
        )
        .unwrap();
        let mut f = m.functions["f"].clone();
        let mut d = vec![];
        assert!(promote_constant_pool(&mut f, &program(), &[(0x4000, 0x4009)], &mut d));
        let t = print_function(&f);
        assert!(t.contains("add i64 i64 42, %"), "{t}");
        assert!(t.contains("memread i64 %0"));
        assert!(d.is_empty());
    }

    #[test]
    fn reads_crossing_the_edge_stay() {
        let m = parse_module("define i64 @f() {\nb0:\n  %0 = memread i64 i64 0x4004\n  ret %0\n}\n").unwrap();
        let mut f = m.functions["f"].clone();
        let mut d = vec![];
        assert!(!promote_constant_pool(&mut f, &program(), &[(0x4000, 0x4009)], &mut d));
        assert_eq!(d.len(), 1);
        let m = parse_module(
            "define i64 @f() {\nb0:\n  %0 = memread i8 i64 0x4008\n  %1 = zext i64 %0\n  ret %1\n}\n",
        )
        .unwrap();
        let mut f = m.functions["f"].clone();
        assert!(promote_constant_pool(&mut f, &program(), &[(0x4000, 0x4009)], &mut d));
        assert!(print_function(&f).contains("zext i64 i8 7"));
    }
}
