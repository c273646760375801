//! Every lifted instruction must reproduce the reference interpreter's effect
//! on registers, flags, rip and memory.

use brighten::exec::machine::step;
use brighten::exec::{ir::run_ir_values, IrEnv, MachineState, RtVal, STACK_BASE};
use brighten::ir::{verify, Module};
use brighten::lifter::{lift_block, lift_one};
use brighten::machine::{assemble, Cond, Gpr};
use proptest::prelude::*;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DATA: u64 = 0x5000;
const REGS64: [&str; 8] = ["rax", "rcx", "rdx", "rbx", "rsi", "rdi", "r8", "r11"];
const REGS32: [&str; 8] = ["eax", "ecx", "edx", "ebx", "esi", "edi", "r8d", "r11d"];

#[derive(Clone, Copy, Debug)]
enum Family {
    Mov,
    Lea,
    Arith(&'static str),
    Imul,
    Unary(&'static str),
    Shift(&'static str),
    Cmov,
    Push,
    Pop,
    Jmp,
    Jcc,
    CallIndirect,
    Ret,
    Nop,
}

fn imm(rng: &mut ChaCha8Rng) -> i64 {
    match rng.gen_range(0..6) {
        0 => *[0i64, 1, -1, 2, 31, 32, 63, 64, 0x7f, 0x80].choose(rng).unwrap(),
        1 => rng.gen::<i8>() as i64,
        2 => rng.gen::<i32>() as i64,
        3 => i64::MIN,
        _ => rng.gen(),
    }
}

fn mem(rng: &mut ChaCha8Rng, size: Option<&str>) -> String {
    let d = rng.gen_range(0..24);
    let body = match rng.gen_range(0..3) {
        0 => format!("[r14 + {d}]"),
        1 => format!("[r14 + r15*{} + {d}]", [1, 2, 4, 8].choose(rng).unwrap()),
        _ => format!("[{:#x}]", DATA + 32 + d),
    };
    match size {
        Some(s) => format!("{s} {body}"),
        None => body,
    }
}

fn reg(rng: &mut ChaCha8Rng, wide: bool) -> &'static str {
    if wide {
        REGS64.choose(rng).unwrap()
    } else {
        REGS32.choose(rng).unwrap()
    }
}

fn sized_mem(rng: &mut ChaCha8Rng) -> String {
    let kw = ["byte", "word", "dword", "qword"].choose(rng).unwrap();
    mem(rng, Some(kw))
}

/// A binary rm/imm operand pair for `mn`.
fn binary(rng: &mut ChaCha8Rng, mn: &str) -> String {
    let wide = rng.gen_bool(0.5);
    match rng.gen_range(0..5) {
        0 => format!("{mn} {}, {}", reg(rng, wide), reg(rng, wide)),
        1 => format!("{mn} {}, {}", reg(rng, wide), imm(rng)),
        2 => format!("{mn} {}, {}", reg(rng, wide), mem(rng, None)),
        3 => format!("{mn} {}, {}", mem(rng, None), reg(rng, wide)),
        _ => format!("{mn} {}, {}", sized_mem(rng), imm(rng)),
    }
}

fn instruction(f: Family, rng: &mut ChaCha8Rng) -> String {
    let cc = Cond::ALL.choose(rng).unwrap().suffix();
    match f {
        Family::Mov => binary(rng, "mov"),
        Family::Lea => {
            let wide = rng.gen_bool(0.7);
            format!("lea {}, {}", reg(rng, wide), mem(rng, None))
        }
        Family::Arith(mn) => binary(rng, mn),
        Family::Imul => {
            let wide = rng.gen_bool(0.5);
            let r = reg(rng, wide);
            match rng.gen_range(0..3) {
                0 => format!("imul {r}, {}", reg(rng, wide)),
                1 => format!("imul {r}, {}", imm(rng)),
                _ => format!("imul {r}, {}", mem(rng, None)),
            }
        }
        Family::Unary(mn) => match rng.gen_range(0..3) {
            0 => format!("{mn} {}", reg(rng, true)),
            1 => format!("{mn} {}", reg(rng, false)),
            _ => format!("{mn} {}", sized_mem(rng)),
        },
        Family::Shift(mn) => {
            let dst = match rng.gen_range(0..3) {
                0 => reg(rng, true).to_string(),
                1 => reg(rng, false).to_string(),
                _ => sized_mem(rng),
            };
            let cnt = if rng.gen_bool(0.5) { "cl".to_string() } else { rng.gen_range(0..70).to_string() };
            format!("{mn} {dst}, {cnt}")
        }
        Family::Cmov => {
            let wide = rng.gen_bool(0.5);
            let src = if rng.gen_bool(0.5) { reg(rng, wide).to_string() } else { mem(rng, None) };
            format!("cmov{cc} {}, {src}", reg(rng, wide))
        }
        Family::Push => match rng.gen_range(0..4) {
            0 => "push rsp".to_string(),
            1 => format!("push {}", imm(rng)),
            2 => format!("push {}", mem(rng, None)),
            _ => format!("push {}", reg(rng, true)),
        },
        Family::Pop => format!("pop {}", if rng.gen_bool(0.2) { "rsp" } else { reg(rng, true) }),
        Family::Jmp => match rng.gen_range(0..3) {
            0 => "jmp t".to_string(),
            1 => format!("jmp {}", reg(rng, true)),
            _ => format!("jmp {}", mem(rng, None)),
        },
        Family::Jcc => format!("j{cc} t"),
        Family::CallIndirect => format!("call {}", reg(rng, true)),
        Family::Ret => "ret".to_string(),
        Family::Nop => "nop".to_string(),
    }
}

fn random_state(rng: &mut ChaCha8Rng) -> MachineState {
    let mut s = MachineState::new();
    for g in Gpr::ALL {
        let v = match rng.gen_range(0..4) {
            0 => rng.gen_range(0..70),
            1 => rng.gen::<u32>() as u64,
            _ => rng.gen(),
        };
        s.set_reg(g, v);
    }
    s.set_reg(Gpr::R14, DATA);
    s.set_reg(Gpr::R15, rng.gen_range(0..8));
    s.set_reg(Gpr::Rsp, STACK_BASE - 64);
    for f in &mut s.flags {
        *f = rng.gen();
    }
    for a in DATA..DATA + 0x80 {
        s.mem.bytes.insert(a, rng.gen());
    }
    for a in STACK_BASE - 128..STACK_BASE + 64 {
        s.mem.bytes.insert(a, rng.gen());
    }
    s.rip = 0x1000;
    s
}

fn check(f: Family, seed: u64) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text = instruction(f, &mut rng);
    let program = assemble(&format!("{text}\nt:\nnop")).map_err(|e| TestCaseError::fail(format!("{text}: {e}")))?;
    let init = random_state(&mut rng);

    let mut expect = init.clone();
    step(&program, &mut expect, &mut Vec::new()).map_err(|e| TestCaseError::fail(format!("{text}: {e}")))?;

    let func = lift_one(&program, 0x1000).map_err(|e| TestCaseError::fail(format!("{text}: {e}")))?;
    prop_assert!(verify(&func).is_ok(), "{text}: lifted IR fails verification");
    let name = func.name.clone();
    let mut m = Module::new();
    m.add(func);
    let mut env = IrEnv::new(init.mem.clone());
    let st = env.alloc_state(&init);
    let npc = run_ir_values(&m, &name, &[st, RtVal::Int(0x1000)], &mut env)
        .map_err(|e| TestCaseError::fail(format!("{text}: {e}")))?;
    let mut got = MachineState::new();
    env.read_state(st, &mut got).unwrap();
    got.mem = env.mem;

    prop_assert_eq!(npc, Some(RtVal::Int(expect.rip)), "{}: next pc", text);
    prop_assert_eq!(got.regs, expect.regs, "{}: registers", text);
    prop_assert_eq!(got.flags, expect.flags, "{}: flags", text);
    prop_assert_eq!(got.rip, expect.rip, "{}: rip", text);
    prop_assert!(got.mem == expect.mem, "{}: memory differs", text);
    Ok(())
}

macro_rules! fidelity {
    ($($name:ident => $fam:expr),* $(,)?) => {
        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]
            $(
                #[test]
                fn $name(seed in any::<u64>()) {
                    check($fam, seed)?;
                }
            )*
        }
    };
}

fidelity! {
    mov => Family::Mov,
    lea => Family::Lea,
    add => Family::Arith("add"),
    sub => Family::Arith("sub"),
    and => Family::Arith("and"),
    or => Family::Arith("or"),
    xor => Family::Arith("xor"),
    cmp => Family::Arith("cmp"),
    test => Family::Arith("test"),
    imul => Family::Imul,
    not => Family::Unary("not"),
    neg => Family::Unary("neg"),
    inc => Family::Unary("inc"),
    dec => Family::Unary("dec"),
    shl => Family::Shift("shl"),
    shr => Family::Shift("shr"),
    sar => Family::Shift("sar"),
    cmov => Family::Cmov,
    push => Family::Push,
    pop => Family::Pop,
    jmp => Family::Jmp,
    jcc => Family::Jcc,
    call_indirect => Family::CallIndirect,
    ret => Family::Ret,
    nop => Family::Nop,
}

#[test]
fn multi_instruction_block_matches_stepping() {
    let src = "mov rax, rcx\nadd rax, 7\nimul rax, rdx\nxor ecx, eax\nshl rdx, cl\ncmp rax, rdx\njl t\nnop\nt:\nret";
    let p = assemble(src).unwrap();
    let b = lift_block(&p, 0x1000).unwrap();
    assert_eq!(b.instrs.len(), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let name = b.body.name.clone();
    let mut m = Module::new();
    m.add(b.body);
    for _ in 0..500 {
        let init = random_state(&mut rng);
        let mut expect = init.clone();
        for _ in 0..7 {
            step(&p, &mut expect, &mut Vec::new()).unwrap();
        }
        let mut env = IrEnv::new(init.mem.clone());
        let st = env.alloc_state(&init);
        let npc = run_ir_values(&m, &name, &[st, RtVal::Int(0x1000)], &mut env).unwrap();
        let mut got = MachineState::new();
        env.read_state(st, &mut got).unwrap();
        assert_eq!(npc, Some(RtVal::Int(expect.rip)));
        assert_eq!(got.regs, expect.regs);
        assert_eq!(got.flags, expect.flags);
    }
}
