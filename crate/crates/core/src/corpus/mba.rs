//! Mixed boolean-arithmetic identities used to build opaque predicates.

use std::sync::OnceLock;

pub struct MbaIdentity {
    pub name: &'static str,
    pub lhs: fn(u64, u64) -> u64,
    pub rhs: fn(u64, u64) -> u64,
    /// Assembly computing the left side into r10 and the right side into
    /// r11 from registers `x` and `y`.
    pub emit: fn(&str, &str) -> Vec<String>,
}

pub const POOL: &[MbaIdentity] = &[
    MbaIdentity {
        name: "(x&y)+(x|y) == x+y",
        lhs: |x, y| (x & y).wrapping_add(x | y),
        rhs: |x, y| x.wrapping_add(y),
        emit: |x, y| {
            vec![
                format!("mov r10, {x}"),
                format!("and r10, {y}"),
                format!("mov r11, {x}"),
                format!("or r11, {y}"),
                "add r10, r11".into(),
                format!("mov r11, {x}"),
                format!("add r11, {y}"),
            ]
        },
    },
    MbaIdentity {
        name: "(x^y)+2(x&y) == x+y",
        lhs: |x, y| (x ^ y).wrapping_add((x & y).wrapping_mul(2)),
        rhs: |x, y| x.wrapping_add(y),
        emit: |x, y| {
            vec![
                format!("mov r10, {x}"),
                format!("xor r10, {y}"),
                format!("mov r11, {x}"),
                format!("and r11, {y}"),
                "add r11, r11".into(),
                "add r10, r11".into(),
                format!("mov r11, {x}"),
                format!("add r11, {y}"),
            ]
        },
    },
    MbaIdentity {
        name: "(x|y)-(x&y) == x^y",
        lhs: |x, y| (x | y).wrapping_sub(x & y),
        rhs: |x, y| x ^ y,
        emit: |x, y| {
            vec![
                format!("mov r10, {x}"),
                format!("or r10, {y}"),
                format!("mov r11, {x}"),
                format!("and r11, {y}"),
                "sub r10, r11".into(),
                format!("mov r11, {x}"),
                format!("xor r11, {y}"),
            ]
        },
    },
    MbaIdentity {
        name: "(x&~y)+y == x|y",
        lhs: |x, y| (x & !y).wrapping_add(y),
        rhs: |x, y| x | y,
        emit: |x, y| {
            vec![
                format!("mov r11, {y}"),
                "not r11".into(),
                format!("mov r10, {x}"),
                "and r10, r11".into(),
                format!("add r10, {y}"),
                format!("mov r11, {x}"),
                format!("or r11, {y}"),
            ]
        },
    },
];

/// Every 8-bit input pair satisfies the identity.
pub fn holds_8bit(id: &MbaIdentity) -> bool {
    (0..256u64).all(|x| (0..256u64).all(|y| (id.lhs)(x, y) & 0xff == (id.rhs)(x, y) & 0xff))
}

/// The pool, checked once.
pub fn pool() -> &'static [MbaIdentity] {
    static CHECKED: OnceLock<()> = OnceLock::new();
    CHECKED.get_or_init(|| {
        for id in POOL {
            assert!(holds_8bit(id), "identity {} is false", id.name);
        }
    });
    POOL
}
