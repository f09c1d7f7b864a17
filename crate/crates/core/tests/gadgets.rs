use std::path::Path;

use ghostminion::attacks::{self, Gadget, GadgetKind, Variant, COMMITTED_SLOT, EMIT_SECRET};
use ghostminion::config::{ProtectionMode, RunConfig};
use ghostminion::harness::{self, Verdict};
use ghostminion::isa::load_program;

const MODES: [ProtectionMode; 3] = [ProtectionMode::Unsafe, ProtectionMode::FlushOnly, ProtectionMode::Ghostminion];

fn cfg_for(g: &Gadget, mode: ProtectionMode) -> RunConfig {
    let mut c = RunConfig::default().with_mode(mode);
    c.features.coherence_mode = g.needs_coherence();
    c
}

fn corpus_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/gadgets"))
}

/// (file, instruction count, cores) rows of the corpus table.
fn documented() -> Vec<(String, usize, usize)> {
    let text = std::fs::read_to_string(corpus_dir().join("README.md")).unwrap();
    text.lines()
        .filter(|l| l.starts_with("| ") && l.contains(".gasm"))
        .map(|l| {
            let cells: Vec<&str> = l.split('|').map(str::trim).filter(|c| !c.is_empty()).collect();
            (cells[0].to_string(), cells[1].parse().unwrap(), cells[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn corpus_files_match_generators_and_documented_lengths() {
    let rows = documented();
    assert_eq!(rows.len(), GadgetKind::ALL.len());
    for g in attacks::all() {
        let file = format!("{}.gasm", g.name());
        let text = std::fs::read_to_string(corpus_dir().join(&file)).unwrap();
        assert_eq!(text, g.render(EMIT_SECRET), "{file} is stale; re-run `ghostsim gadgets emit`");
        let p = load_program(&text, RunConfig::default().mem_bytes).unwrap();
        let (_, len, cores) = rows.iter().find(|r| r.0 == file).unwrap_or_else(|| panic!("{file} undocumented"));
        assert_eq!(p.len(), *len, "{file}");
        assert_eq!(p.cores.len(), *cores, "{file}");
    }
}

#[test]
fn unsafe_v1_recovers_the_emitted_secret() {
    let g = attacks::gadget_spectre_v1();
    let c = cfg_for(&g, ProtectionMode::Unsafe);
    let o = ghostminion::sim::simulate(&g.program(EMIT_SECRET, c.mem_bytes).unwrap(), &c, None).unwrap();
    assert_eq!(g.decode(&o.timeline), Some(EMIT_SECRET));
}

#[test]
fn control_variants_are_safe_in_every_mode() {
    for g in attacks::all() {
        for v in [Variant::Untrained, Variant::EmptyTransient, Variant::SecretIndependent] {
            let g = g.with_variant(v);
            for mode in MODES {
                let r = harness::run_differential(&g, &cfg_for(&g, mode)).unwrap();
                assert_eq!(r.verdict, Verdict::Safe, "{} {mode:?} {:?}", g.name(), r.first_difference);
            }
        }
    }
}

#[test]
fn untrained_bounds_check_never_decodes() {
    for g in attacks::all() {
        let g = g.with_variant(Variant::Untrained);
        let r = harness::run_differential(&g, &cfg_for(&g, ProtectionMode::Unsafe)).unwrap();
        assert!(r.runs.iter().all(|run| run.guess.is_none()), "{}", g.name());
    }
}

#[test]
fn older_interfering_access_is_visible_in_every_mode() {
    let g = attacks::gadget_speculative_interference().with_variant(Variant::OlderInProgramOrder);
    for mode in MODES {
        let r = harness::run_differential(&g, &cfg_for(&g, mode)).unwrap();
        assert_eq!(r.verdict, Verdict::Safe);
        assert_eq!(r.decoded as u64, g.domain(), "{mode:?}: victim load not sped up by the older access");
    }
}

#[test]
fn committed_victim_access_changes_attacker_state_in_every_mode() {
    let g = attacks::gadget_spectre_prime().with_variant(Variant::CommittedVictimAccess);
    let d = g.domain() as usize;
    let k = g.sweep_order().iter().position(|&s| s == COMMITTED_SLOT).unwrap();
    for mode in MODES {
        let run = harness::differential(&g, &cfg_for(&g, mode)).unwrap();
        for (secret, o) in &run.outcomes {
            let r = o.timeline.rdcycles(1);
            let deltas: Vec<u64> = r[r.len() - 2 * d..].chunks(2).map(|p| p[1] - p[0]).collect();
            let fast = *deltas.iter().min().unwrap();
            assert!(deltas[k] > fast + 10, "{mode:?} secret {secret}: {deltas:?}");
        }
    }
}

#[test]
fn ablation_passes_for_every_gadget_under_ghostminion() {
    for g in attacks::all() {
        let c = cfg_for(&g, ProtectionMode::Ghostminion);
        let r = harness::run_ablation(&g.program(EMIT_SECRET, c.mem_bytes).unwrap(), &c).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{} {:?}", g.name(), r.divergence);
        assert!(r.pure, "{}", g.name());
        assert!(r.triggers > 0, "{}", g.name());
    }
}

#[test]
fn ablation_fails_for_v1_under_unsafe() {
    let g = attacks::gadget_spectre_v1();
    let c = cfg_for(&g, ProtectionMode::Unsafe);
    let r = harness::run_ablation(&g.program(EMIT_SECRET, c.mem_bytes).unwrap(), &c).unwrap();
    assert_eq!(r.verdict, Verdict::Fail);
    let d = r.divergence.expect("first divergent instruction");
    assert!(d.pc.is_some());
    assert_ne!(r.digest, r.ablated_digest);
}

#[test]
fn v1_under_ghostminion_flushes_without_polluting_the_l1() {
    let g = attacks::gadget_spectre_v1();
    let c = cfg_for(&g, ProtectionMode::Ghostminion);
    let p = g.program(EMIT_SECRET, c.mem_bytes).unwrap();
    let report = harness::run(&p, &c).unwrap();
    assert!(report.counters.flushes > 0);
    let a = harness::ablation(&p, &c).unwrap();
    assert_eq!(a.normal.nonspec, a.ablated.nonspec);
}

#[test]
fn prime_requires_coherence_mode() {
    let g = attacks::gadget_spectre_prime();
    let e = harness::run_differential(&g, &RunConfig::default()).unwrap_err();
    assert!(matches!(e, harness::HarnessError::NeedsCoherence { .. }), "{e}");
}

#[test]
fn secret_width_is_configurable() {
    let g = attacks::gadget_spectre_v1().with_secret_bits(5);
    let r = harness::run_differential(&g, &cfg_for(&g, ProtectionMode::Unsafe)).unwrap();
    assert_eq!(r.runs.len(), 32);
    assert_eq!(r.verdict, Verdict::Leaks);
    assert_eq!(r.decoded, 32);
}
