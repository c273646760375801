//! Post-translation cleanup, stack slots and signature recovery on small
//! hand-written functions and on generated samples.

use brighten::corpus::{gen_sample, SampleKind};
use brighten::exec::{differential_check, DiffTarget, STACK_BASE};
use brighten::explorer::{explore, ExploreConfig};
use brighten::ir::{print_function, AllocaKind, Function, Op};
use brighten::machine::{assemble, Abi, Program};
use brighten::recover::{brighten, Brightened, RecoverConfig, RecoveredSignature, ResidualClass};

fn run(src: &str, config: &RecoverConfig) -> (Program, Brightened) {
    let p = assemble(src).unwrap();
    let cfg = explore(&p, p.entry, &ExploreConfig::default()).unwrap();
    let b = brighten(&p, &cfg, config).unwrap();
    (p, b)
}

fn output(b: &Brightened) -> &Function {
    &b.output.module.functions[&b.output.func]
}

fn mismatches(p: &Program, b: &Brightened, nargs: usize, trials: usize) -> usize {
    let (module, func) = (&b.output.module, b.output.func.as_str());
    let target = if b.output.state_form {
        DiffTarget::StateForm { module, func }
    } else {
        DiffTarget::Brightened { module, func }
    };
    differential_check(p, p.entry, Abi::Win64, nargs, target, trials, 3).mismatches.len()
}

fn sig(register_args: u32, stack_args: u32) -> Option<RecoveredSignature> {
    Some(RecoveredSignature { register_args, stack_args, returns_value: true })
}

fn has_memory_ops(f: &Function) -> bool {
    f.insts().into_iter().any(|v| matches!(f.op(v), Some(Op::MemRead | Op::MemWrite | Op::Load | Op::Store)))
}

#[test]
fn identity_becomes_return_of_the_argument() {
    let (_, b) = run("mov rax, rcx\nret", &RecoverConfig::default());
    assert_eq!(b.signature, sig(1, 0));
    let t = print_function(output(&b));
    assert_eq!(t, "define i64 @sub_1000(i64 %0) {\nb0:\n  ret %0\n}\n");
}

#[test]
fn reads_of_rcx_then_rdx_make_two_arguments() {
    let (p, b) = run("mov rax, rcx\nimul rax, rdx\nret", &RecoverConfig::default());
    assert_eq!(b.signature, sig(2, 0));
    assert_eq!(mismatches(&p, &b, 2, 500), 0);
}

#[test]
fn register_written_before_read_is_not_an_argument() {
    let (_, b) = run("mov rcx, 5\nmov rax, rcx\nret", &RecoverConfig::default());
    assert_eq!(b.signature, sig(0, 0));
    let t = print_function(output(&b));
    assert!(t.contains("ret i64 5"), "{t}");
}

#[test]
fn saved_frame_pointer_disappears() {
    let src = "push rbp\nmov rbp, rsp\nsub rsp, 16\nmov qword [rbp - 8], rcx\nmov qword [rbp - 16], rdx\n\
               mov rax, qword [rbp - 8]\nadd rax, qword [rbp - 16]\nmov rsp, rbp\npop rbp\nret";
    let (p, b) = run(src, &RecoverConfig::default());
    assert_eq!(b.signature, sig(2, 0));
    assert!(!has_memory_ops(output(&b)), "{}", print_function(output(&b)));
    assert!(b.report.slots.iter().any(|s| s.offset == -8 && s.width == 8));
    assert_eq!(mismatches(&p, &b, 2, 500), 0);
}

#[test]
fn read_above_the_return_address_is_a_stack_argument() {
    let (p, b) = run("mov rax, qword [rsp + 40]\nadd rax, rcx\nret", &RecoverConfig::default());
    let res = &b.state_form.slots.residual_globals;
    assert_eq!(res.len(), 1);
    assert_eq!((res[0].offset, res[0].class), (40, ResidualClass::StackArgument));
    assert_eq!(b.signature, sig(4, 1));
    assert_eq!(output(&b).params.len(), 5);
    assert_eq!(mismatches(&p, &b, 5, 500), 0);
}

#[test]
fn private_slot_leaves_no_residual() {
    let (_, b) = run("mov qword [rsp - 16], rcx\nmov rax, qword [rsp - 16]\nret", &RecoverConfig::default());
    assert!(b.state_form.slots.residual_globals.is_empty());
    assert!(b.output.module.globals.is_empty());
}

#[test]
fn write_into_the_shadow_space_is_a_context_write() {
    let (p, b) = run("mov qword [rsp + 8], rcx\nmov rax, rdx\nret", &RecoverConfig::default());
    let res = &b.state_form.slots.residual_globals;
    assert_eq!(res.len(), 1);
    assert_eq!((res[0].offset, res[0].class), (8, ResidualClass::ContextWrite));
    let keep = RecoverConfig { keep_state: true, ..Default::default() };
    let (_, k) = run("mov qword [rsp + 8], rcx\nmov rax, rdx\nret", &keep);
    assert_eq!(mismatches(&p, &k, 2, 300), 0);
}

#[test]
fn keep_state_preserves_the_record_and_still_agrees() {
    let s = gen_sample(SampleKind::ForTrick, 2).unwrap();
    let keep = RecoverConfig { keep_state: true, ..Default::default() };
    let (p, b) = run(&s.obfuscated, &keep);
    assert!(b.output.state_form && b.signature.is_none() && b.report.signature.is_none());
    let f = output(&b);
    assert_eq!(f.params.len(), 1);
    assert_eq!(mismatches(&p, &b, 3, 1000), 0);
}

#[test]
fn toy_program_becomes_a_three_argument_function() {
    let s = gen_sample(SampleKind::ForTrick, 0).unwrap();
    let (p, b) = run(&s.obfuscated, &RecoverConfig::default());
    assert_eq!(b.signature, sig(3, 0));
    let f = output(&b);
    assert_eq!(f.params.len(), 3);
    assert_eq!(f.layout.len(), 1, "{}", print_function(f));
    assert_eq!(mismatches(&p, &b, 3, 1000), 0);
}

#[test]
fn surviving_unknown_falls_back_to_the_state_form() {
    let (p, b) = run("mov rax, rbx\nadd rax, rcx\nret", &RecoverConfig::default());
    assert!(b.output.state_form);
    assert!(b.report.diagnostics.iter().any(|d| d.contains("keeping the state-record form")));
    let f = output(&b);
    assert!(f.insts().into_iter().all(|v| f.op(v) != Some(&Op::Alloca(AllocaKind::State))));
    assert_eq!(mismatches(&p, &b, 1, 300), 0);
}

#[test]
fn flag_chains_across_blocks_are_removed() {
    let src = "cmp rcx, 3\njmp a\na:\nadd rcx, 1\njmp b\nb:\nmov rax, rcx\nret";
    let (_, b) = run(src, &RecoverConfig::default());
    let t = print_function(&b.state_form.module.functions[&b.state_form.func]);
    assert!(!t.contains("fieldaddr.zf") && !t.contains("fieldaddr.cf"), "{t}");
    assert_eq!(print_function(output(&b)), "define i64 @sub_1000(i64 %0) {\nb0:\n  %1 = add i64 %0, i64 1\n  ret %1\n}\n");
}

#[test]
fn clean_function_converges_in_one_round() {
    let (_, b) = run("lea rax, [rcx + rdx*4]\nret", &RecoverConfig::default());
    assert_eq!(b.report.rounds, 1);
}

#[test]
fn cleanup_always_shrinks_obfuscated_samples() {
    for kind in SampleKind::ALL {
        for seed in 0..3 {
            let s = gen_sample(kind, seed).unwrap();
            let p = assemble(&s.obfuscated).unwrap();
            let ec = ExploreConfig {
                solver_bb_count_jcc: s.meta.solver_bb_count_jcc,
                constant_pool: s.meta.constant_pool.clone(),
                ..Default::default()
            };
            let cfg = explore(&p, p.entry, &ec).unwrap();
            let rc = RecoverConfig { constant_pool: s.meta.constant_pool.clone(), ..Default::default() };
            let b = brighten(&p, &cfg, &rc).unwrap();
            assert!(b.report.optimized_instructions < b.report.lifted_instructions, "{kind} {seed}");
            let sig = b.signature.unwrap();
            assert_eq!(
                (sig.register_args, sig.stack_args, sig.returns_value),
                (s.meta.signature.register_args, s.meta.signature.stack_args, s.meta.signature.returns_value),
                "{kind} {seed}"
            );
        }
    }
}

#[test]
fn stack_base_is_concrete_in_the_state_form() {
    let (_, b) = run("mov rax, rsp\nret", &RecoverConfig::default());
    let t = print_function(output(&b));
    assert!(t.contains(&format!("ret i64 {STACK_BASE:#x}")), "{t}");
}
