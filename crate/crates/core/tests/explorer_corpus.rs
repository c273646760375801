//! Control flow recovery on generated samples, checked against executions
//! of the machine interpreter.

use std::collections::{BTreeMap, BTreeSet};

use brighten::corpus::{gen_sample, Sample, SampleKind};
use brighten::exec::{differential_check, DiffTarget};
use brighten::explorer::{explore, ExploreConfig, RecoveredCfg, VerdictState};
use brighten::machine::{assemble, Abi, Program};
use proptest::prelude::*;

fn config(s: &Sample) -> ExploreConfig {
    ExploreConfig {
        solver_bb_count_jcc: s.meta.solver_bb_count_jcc,
        constant_pool: s.meta.constant_pool.clone(),
        ..Default::default()
    }
}

fn recovered(kind: SampleKind, seed: u64) -> (Sample, Program, RecoveredCfg) {
    let s = gen_sample(kind, seed).unwrap();
    let p = assemble(&s.obfuscated).unwrap();
    let cfg = explore(&p, p.entry, &config(&s)).unwrap();
    (s, p, cfg)
}

fn observed_edges(s: &Sample, p: &Program, trials: usize) -> BTreeSet<(u64, u64)> {
    let n = s.meta.signature.arg_count();
    differential_check(p, p.entry, Abi::Win64, n, DiffTarget::Machine { program: p, entry: p.entry }, trials, 17)
        .edge_trace
}

#[test]
fn recovered_edges_cover_every_observed_edge() {
    for kind in SampleKind::ALL {
        for seed in 0..3 {
            let (s, p, cfg) = recovered(kind, seed);
            let seen = observed_edges(&s, &p, 1000);
            let missing: Vec<_> = seen.difference(&cfg.edges).collect();
            assert!(missing.is_empty(), "{kind} {seed}: missing {missing:x?}");
            for (a, v) in &cfg.verdicts {
                if let VerdictState::ProvenOpaque(d) = v.state {
                    assert!(seen.iter().filter(|e| e.0 == *a).all(|e| e.1 == d), "{kind} {seed}: {a:#x}");
                }
            }
        }
    }
}

#[test]
fn injected_predicates_are_proven_and_junk_is_not_lifted() {
    for kind in SampleKind::ALL {
        for seed in 0..5 {
            let (s, _, cfg) = recovered(kind, seed);
            let ends: BTreeSet<u64> = cfg.proven_opaque().iter().map(|a| cfg.blocks[a].last_addr()).collect();
            let want: BTreeSet<u64> = s.meta.injected_op_addresses.iter().copied().collect();
            assert_eq!(ends, want, "{kind} {seed}");
            for lb in cfg.blocks.values() {
                assert!(lb.instrs.iter().all(|i| !s.meta.injected_dead_block_addresses.contains(i)), "{kind} {seed}");
            }
            assert_eq!(cfg.merged_block_count(), s.meta.clean_block_count, "{kind} {seed}");
        }
    }
}

#[test]
fn cross_block_predicate_needs_two_blocks() {
    for seed in 0..5 {
        let s = gen_sample(SampleKind::CrossBlockOp, seed).unwrap();
        let p = assemble(&s.obfuscated).unwrap();
        let one = ExploreConfig { solver_bb_count_jcc: 1, ..config(&s) };
        let cfg = explore(&p, p.entry, &one).unwrap();
        assert!(cfg.proven_opaque().is_empty());
        let junk = s.meta.injected_dead_block_addresses[0];
        assert!(cfg.blocks.contains_key(&junk));
        let cfg = explore(&p, p.entry, &config(&s)).unwrap();
        assert_eq!(cfg.proven_opaque().len(), 1);
        assert!(!cfg.blocks.contains_key(&junk));
    }
}

#[test]
fn worklist_order_does_not_change_the_result() {
    for kind in SampleKind::ALL {
        let (s, p, base) = recovered(kind, 1);
        let states = |c: &RecoveredCfg| -> BTreeMap<u64, VerdictState> {
            c.verdicts.iter().map(|(a, v)| (*a, v.state.clone())).collect()
        };
        for order in 0..4 {
            let cfg = ExploreConfig { order_seed: Some(order), ..config(&s) };
            let other = explore(&p, p.entry, &cfg).unwrap();
            assert_eq!(other.blocks.keys().collect::<Vec<_>>(), base.blocks.keys().collect::<Vec<_>>(), "{kind}");
            assert_eq!(other.edges, base.edges, "{kind}");
            assert_eq!(states(&other), states(&base), "{kind}");
        }
    }
}

fn parse_state(s: &str) -> VerdictState {
    let hex = |t: &str| u64::from_str_radix(t.trim_start_matches("0x"), 16).unwrap();
    match s.split_once(' ') {
        Some(("opaque", d)) => VerdictState::ProvenOpaque(hex(d)),
        Some(("not-opaque", ts)) => VerdictState::NotOpaque(ts.split(',').map(hex).collect()),
        None if s == "exit" => VerdictState::Exit,
        _ => VerdictState::Unknown,
    }
}

/// Allowed moves of a block verdict during exploration.
fn allowed(from: &VerdictState, to: &VerdictState) -> bool {
    use VerdictState::*;
    match (from, to) {
        (_, Unknown) => true,
        (ProvenOpaque(a), ProvenOpaque(b)) => a == b,
        (ProvenOpaque(a), NotOpaque(s)) => s.contains(a),
        (NotOpaque(a), NotOpaque(b)) => a.is_subset(b),
        (Exit, Exit) => true,
        _ => false,
    }
}

#[test]
fn verdicts_only_weaken_during_exploration() {
    for kind in SampleKind::ALL {
        for seed in 0..3 {
            let (_, _, cfg) = recovered(kind, seed);
            let mut last: BTreeMap<u64, VerdictState> = BTreeMap::new();
            for line in &cfg.trace {
                let Some(rest) = line.strip_prefix("verdict ") else { continue };
                let (addr, rest) = rest.split_once(' ').unwrap();
                let state = parse_state(rest.rsplit_once(" (").unwrap().0);
                let a = u64::from_str_radix(addr.trim_start_matches("0x"), 16).unwrap();
                if let Some(prev) = last.get(&a) {
                    assert!(allowed(prev, &state), "{kind} {seed} {a:#x}: {prev} -> {state}");
                }
                last.insert(a, state);
            }
        }
    }
}

fn arb_state() -> impl Strategy<Value = VerdictState> {
    let addr = prop::sample::select(vec![0x1000u64, 0x1004, 0x1008, 0x100c]);
    prop_oneof![
        addr.clone().prop_map(VerdictState::ProvenOpaque),
        prop::collection::btree_set(addr, 1..4).prop_map(VerdictState::NotOpaque),
        Just(VerdictState::Exit),
        Just(VerdictState::Unknown),
    ]
}

proptest! {
    #[test]
    fn join_is_a_semilattice(a in arb_state(), b in arb_state(), c in arb_state()) {
        prop_assert_eq!(a.join(&b), b.join(&a));
        prop_assert_eq!(a.join(&a), a.clone());
        prop_assert_eq!(a.join(&b).join(&c), a.join(&b.join(&c)));
        prop_assert!(allowed(&a, &a.join(&b)));
    }

    #[test]
    fn not_opaque_is_absorbing(s in prop::collection::btree_set(0x1000u64..0x1010, 1..4), b in arb_state()) {
        let j = VerdictState::NotOpaque(s).join(&b);
        prop_assert!(matches!(j, VerdictState::NotOpaque(_) | VerdictState::Unknown));
    }
}
