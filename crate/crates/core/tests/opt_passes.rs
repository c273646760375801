//! Optimizer behaviour on lifted code and hand-written shapes, and
//! pass-by-pass semantic preservation against the IR interpreter.

use brighten::exec::machine::step;
use brighten::exec::{ir::run_ir_values, net_effect, run_ir, IrEnv, MachineState, Memory, RtVal, STACK_BASE};
use brighten::ir::state::NUM_FIELDS;
use brighten::ir::{parse_module, print_function, verify, Function, Module, Op};
use brighten::lifter::lift_block;
use brighten::machine::{assemble, Gpr};
use brighten::opt::{run_pass, run_pipeline, OptContext, PassKind};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DATA: u64 = 0x5000;

fn optimized(src: &str) -> (Module, Function) {
    let m = parse_module(src).unwrap();
    let mut f = m.functions.values().next().unwrap().clone();
    let mut ctx = OptContext::default();
    let r = run_pipeline(&mut f, &mut ctx);
    assert!(r.converged);
    verify(&f).unwrap();
    (m, f)
}

fn ret_const(f: &Function) -> Option<u64> {
    let [b] = f.layout.as_slice() else { return None };
    let &last = f.blocks[b.idx()].insts.last()?;
    (f.op(last) == Some(&Op::Ret)).then(|| f.as_const(f.args(last)[0])).flatten()
}

#[test]
fn zeroing_xor_then_jz_folds_next_pc() {
    let p = assemble("xor rax, rax\njz l\nmov rax, 1\nl:\nret").unwrap();
    let b = lift_block(&p, 0x1000).unwrap();
    let mut f = b.body;
    run_pipeline(&mut f, &mut OptContext::default());
    let l = p.labels["l"];
    let t = print_function(&f);
    assert!(t.contains(&format!("ret i64 {l:#x}")), "{t}");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let mut s = MachineState::new();
        for g in Gpr::ALL {
            s.set_reg(g, rng.gen());
        }
        s.rip = 0x1000;
        step(&p, &mut s, &mut Vec::new()).unwrap();
        step(&p, &mut s, &mut Vec::new()).unwrap();
        assert_eq!(s.rip, l);
    }
}

fn for_trick(k: u64) -> String {
    format!(
        "define i64 @f(i64 %0) {{
b0:
  %1 = alloca.i64 ptr
  %2 = alloca.i64 ptr
  store %1, i64 0
  store %2, i64 0
  br b1
b1:
  %3 = load i64 %1
  %4 = icmp.slt i1 %3, i64 {k}
  condbr %4, b2, b3
b2:
  %5 = load i64 %2
  %6 = add i64 %5, i64 1
  store %2, %6
  %7 = add i64 %3, i64 1
  store %1, %7
  br b1
b3:
  %8 = load i64 %2
  %9 = add i64 %8, %0
  %10 = sub i64 %9, %0
  ret %10
}}
"
    )
}

#[test]
fn for_trick_loop_folds_to_its_count() {
    for k in [1u64, 37, 512] {
        let (m, f) = optimized(&for_trick(k));
        assert_eq!(ret_const(&f), Some(k), "{}", print_function(&f));
        for x in [0u64, 9, u64::MAX] {
            assert_eq!(run_ir(&m, "f", &[x], &mut IrEnv::new(Memory::default())), Ok(Some(k)));
        }
    }
}

#[test]
fn long_for_trick_loop_is_kept() {
    let (_, f) = optimized(&for_trick(600));
    assert!(ret_const(&f).is_none());
    assert!(f.layout.len() > 1);
}

#[test]
fn diamond_stores_become_a_phi() {
    let src = "define i64 @f(i64 %0) {
b0:
  %1 = alloca.i64 ptr
  %2 = icmp.eq i1 %0, i64 0
  condbr %2, b1, b2
b1:
  store %1, i64 1
  br b3
b2:
  store %1, i64 2
  br b3
b3:
  %3 = load i64 %1
  ret %3
}
";
    let m = parse_module(src).unwrap();
    let mut f = m.functions["f"].clone();
    let mut ctx = OptContext::default();
    run_pass(&mut f, PassKind::Mem2Reg, &mut ctx);
    let t = print_function(&f);
    assert!(t.contains("phi i64 [i64 1, b1], [i64 2, b2]"), "{t}");
    let mut m2 = Module::new();
    m2.add(f);
    for (x, want) in [(0u64, 1u64), (5, 2)] {
        assert_eq!(run_ir(&m, "f", &[x], &mut IrEnv::new(Memory::default())), Ok(Some(want)));
        assert_eq!(run_ir(&m2, "f", &[x], &mut IrEnv::new(Memory::default())), Ok(Some(want)));
    }
}

#[test]
fn escaping_slot_is_not_promoted() {
    let src = "define i64 @f(i64 %0) {
b0:
  %1 = alloca.i64 ptr
  store %1, %0
  %2 = call i64 @sink(%1)
  %3 = load i64 %1
  ret %3
}
";
    let m = parse_module(src).unwrap();
    let mut f = m.functions["f"].clone();
    assert!(!run_pass(&mut f, PassKind::Mem2Reg, &mut OptContext::default()));
}

#[test]
fn mba_identities_collapse() {
    let (_, f) = optimized(
        "define i64 @f(i64 %0, i64 %1) {\nb0:\n  %2 = and i64 %0, %1\n  %3 = or i64 %0, %1\n  %4 = add i64 %2, %3\n  ret %4\n}\n",
    );
    assert_eq!(print_function(&f), "define i64 @f(i64 %0, i64 %1) {\nb0:\n  %2 = add i64 %0, %1\n  ret %2\n}\n");
    let (_, f) = optimized(
        "define i64 @f(i64 %0) {\nb0:\n  %1 = add i64 %0, i64 1\n  %2 = mul i64 %0, %1\n  %3 = and i64 %2, i64 1\n  ret %3\n}\n",
    );
    assert_eq!(ret_const(&f), Some(0));
    let (_, f) = optimized(
        "define i64 @f(i64 %0) {\nb0:\n  %1 = xor i64 %0, %0\n  %2 = not i64 %0\n  %3 = or i64 %0, %2\n  %4 = add i64 %1, %3\n  ret %4\n}\n",
    );
    assert_eq!(ret_const(&f), Some(u64::MAX));
}

#[test]
fn exhaustive_oracle_for_the_listed_identities() {
    for x in 0u64..256 {
        for y in 0u64..256 {
            assert_eq!(((x & y) + (x | y)) & 0xff, (x + y) & 0xff);
            assert_eq!(((x ^ y) + 2 * (x & y)) & 0xff, (x + y) & 0xff);
        }
        assert_eq!((x + (!x)) & 0xff, 0xff);
    }
    for x in 0u64..1 << 16 {
        assert_eq!((x * (x + 1)) & 1, 0);
    }
}

#[test]
fn inlined_block_leaves_dead_flags_behind() {
    let p = assemble("cmp rcx, 5\nje l\nmov rax, 1\nl:\nret").unwrap();
    let b = lift_block(&p, 0x1000).unwrap();
    let name = b.body.name.clone();
    let src = format!(
        "{}\ndefine i64 @w(i64 %0) {{\nb0:\n  %1 = alloca.state ptr\n  %2 = fieldaddr.rcx ptr %1\n  store %2, %0\n  %3 = call i64 @{name}(%1, i64 0x1000)\n  ret %3\n}}\n",
        print_function(&b.body)
    );
    let m = parse_module(&src).unwrap();
    let mut w = m.functions["w"].clone();
    brighten::opt::inline_calls(&mut w, &m.functions).unwrap();
    assert!(!print_function(&w).contains("call"));
    run_pipeline(&mut w, &mut OptContext::default());
    let t = print_function(&w);
    assert!(!t.contains("load") && !t.contains("store"), "{t}");
    // Only the zero flag decides the branch; the rest of the compare is gone.
    assert!(w.inst_count() <= 3, "{t}");
    for x in [0u64, 5, 6] {
        let want = if x == 5 { p.labels["l"] } else { 0x1008 };
        let mut m2 = Module::new();
        m2.add(w.clone());
        assert_eq!(run_ir(&m2, "w", &[x], &mut IrEnv::new(Memory::default())), Ok(Some(want)));
    }
}

// Pass-by-pass preservation on random lifted blocks.

const REGS: [&str; 8] = ["rax", "rcx", "rdx", "rbx", "rsi", "rdi", "r8", "r9"];
const REGS32: [&str; 4] = ["eax", "ecx", "edx", "ebx"];

fn random_instr(rng: &mut ChaCha8Rng) -> String {
    let r = |rng: &mut ChaCha8Rng| *REGS.choose(rng).unwrap();
    let k = |rng: &mut ChaCha8Rng| *[0i64, 1, -1, 3, 7, 31, 0xff, 0x1234].choose(rng).unwrap();
    let m = |rng: &mut ChaCha8Rng| format!("qword [r14 + {}]", 8 * rng.gen_range(0..4));
    match rng.gen_range(0..14) {
        0 => format!("mov {}, {}", r(rng), r(rng)),
        1 => format!("mov {}, {}", r(rng), k(rng)),
        2 => format!("{} {}, {}", ["add", "sub", "and", "or", "xor"].choose(rng).unwrap(), r(rng), r(rng)),
        3 => format!("{} {}, {}", ["add", "sub", "and", "or", "xor", "cmp", "test"].choose(rng).unwrap(), r(rng), k(rng)),
        4 => format!("imul {}, {}", r(rng), r(rng)),
        5 => format!("{} {}, {}", ["shl", "shr", "sar"].choose(rng).unwrap(), r(rng), rng.gen_range(0..64)),
        6 => format!("{} {}", ["not", "neg", "inc", "dec"].choose(rng).unwrap(), r(rng)),
        7 => format!("mov {}, {}", m(rng), r(rng)),
        8 => format!("mov {}, {}", r(rng), m(rng)),
        9 => format!("push {}", r(rng)),
        10 => format!("pop {}", r(rng)),
        11 => format!("cmov{} {}, {}", ["z", "l", "a", "s"].choose(rng).unwrap(), r(rng), r(rng)),
        12 => format!("mov {}, dword [r14 + {}]", REGS32.choose(rng).unwrap(), rng.gen_range(0..32)),
        _ => format!("lea {}, [{} + {}*4 + 9]", r(rng), r(rng), r(rng)),
    }
}

fn random_block(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..12);
    let mut lines: Vec<String> = (0..n).map(|_| random_instr(rng)).collect();
    lines.push(
        match rng.gen_range(0..4) {
            0 => "ret",
            1 => "jmp rax",
            _ => ["jz t", "jl t", "jbe t", "jns t"].choose(rng).unwrap(),
        }
        .to_string(),
    );
    lines.push("t:\nret".into());
    lines.join("\n")
}

fn random_state(rng: &mut ChaCha8Rng) -> MachineState {
    let mut s = MachineState::new();
    for g in Gpr::ALL {
        let v = match rng.gen_range(0..3) {
            0 => rng.gen_range(0..16),
            _ => rng.gen(),
        };
        s.set_reg(g, v);
    }
    s.set_reg(Gpr::R14, DATA);
    s.set_reg(Gpr::Rsp, STACK_BASE - 256);
    for f in &mut s.flags {
        *f = rng.gen();
    }
    for a in DATA..DATA + 64 {
        s.mem.bytes.insert(a, rng.gen());
    }
    for a in STACK_BASE - 512..STACK_BASE {
        s.mem.bytes.insert(a, rng.gen());
    }
    s.rip = 0x1000;
    s
}

type Observation = (Option<RtVal>, Vec<Option<RtVal>>, std::collections::BTreeMap<u64, u8>);

fn observe(f: &Function, init: &MachineState) -> Option<Observation> {
    let mut m = Module::new();
    m.add(f.clone());
    let mut env = IrEnv::new(init.mem.clone());
    let st = env.alloc_state(init);
    let r = run_ir_values(&m, &f.name, &[st, RtVal::Int(0x1000)], &mut env).ok()?;
    let fields = (0..NUM_FIELDS).map(|i| env.read_field(st, i).unwrap()).collect();
    Some((r, fields, net_effect(&env.writes)))
}

#[test]
fn every_pass_preserves_lifted_block_semantics() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for _ in 0..40 {
        let src = random_block(&mut rng);
        let p = assemble(&src).unwrap();
        let mut cur = lift_block(&p, 0x1000).unwrap().body;
        let states: Vec<MachineState> = (0..200).map(|_| random_state(&mut rng)).collect();
        let before: Vec<Option<Observation>> = states.iter().map(|s| observe(&cur, s)).collect();
        let mut ctx = OptContext::default();
        for _round in 0..3 {
            for pass in PassKind::ALL {
                run_pass(&mut cur, pass, &mut ctx);
                verify(&cur).unwrap_or_else(|e| panic!("{pass} on\n{src}\n{e:?}"));
                for (s, want) in states.iter().zip(&before) {
                    if want.is_some() {
                        assert_eq!(&observe(&cur, s), want, "{pass} changed\n{src}\n{}", print_function(&cur));
                        checked += 1;
                    }
                }
            }
        }
    }
    assert!(checked > 40 * 200 * 20);
}
