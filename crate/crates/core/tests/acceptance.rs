//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::time::{Duration, Instant};

use ghostminion::attacks::{self, Gadget, GadgetKind};
use ghostminion::cache::Level;
use ghostminion::config::{ProtectionMode, RunConfig};
use ghostminion::fuzz::{self, FuzzParams};
use ghostminion::ghost::{Fill, FillOutcome, GhostLookup, GhostMinion};
use ghostminion::harness::{self, Verdict};
use ghostminion::isa::{load_program, Opcode};
use ghostminion::memsys::MemCounters;
use ghostminion::mshr::{Allocation, MshrFile, Target};
use ghostminion::order::{Timestamp, TimestampWindow};
use ghostminion::sim::simulate;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ts(v: u32) -> Timestamp {
    Timestamp::new(v, u64::from(v))
}

fn window() -> TimestampWindow {
    TimestampWindow::for_capacity(64)
}

fn fill(line: u64, t: u32) -> Fill {
    Fill { line, ts: ts(t), owner: u64::from(t), origin: Level::L2, noncoherent: false }
}

fn cfg(mode: ProtectionMode) -> RunConfig {
    RunConfig::default().with_mode(mode)
}

fn criterion_1() -> Check {
    let mut g = GhostMinion::new(16, 2, window(), true);
    g.fill(fill(0x100, 22));
    ensure(matches!(g.lookup(0x100, ts(21)), GhostLookup::Miss { .. }), "ts 22 line visible to reader 21")?;
    g.fill(fill(0x201, 27));
    ensure(matches!(g.lookup(0x201, ts(28)), GhostLookup::Hit { .. }), "ts 27 line hidden from reader 28")?;
    ensure(matches!(g.lookup(0x201, ts(27)), GhostLookup::Hit { .. }), "equal timestamps miss")?;
    Ok("22/21 miss, 27/28 hit, 27/27 hit".into())
}

fn ways(g: &GhostMinion) -> Vec<u32> {
    let mut v: Vec<u32> = g.valid_lines().map(|l| l.ts.value()).collect();
    v.sort_unstable();
    v
}

fn criterion_2() -> Check {
    let mut g = GhostMinion::new(1, 2, window(), true);
    g.fill(fill(1, 26));
    g.fill(fill(2, 28));
    ensure(g.fill(fill(3, 25)) == FillOutcome::Stored, "ts 25 fill not stored")?;
    ensure(ways(&g) == [25, 26], format!("after fill 25 into {{26, 28}}: {:?}", ways(&g)))?;

    let mut g = GhostMinion::new(1, 2, window(), true);
    g.fill(fill(1, 3));
    g.fill(fill(2, 4));
    ensure(g.fill(fill(3, 9)) == FillOutcome::Rejected, "ts 9 fill into {3, 4} not rejected")?;
    ensure(ways(&g) == [3, 4], "rejected fill changed the set")?;

    let mut g = GhostMinion::new(1, 2, window(), true);
    g.fill(fill(1, 26));
    g.fill(fill(2, 30));
    ensure(ways(&g) == [26, 30], "free way not preferred")?;
    Ok("{26,28}+25 evicts 28, {3,4}+9 rejected, free way preferred".into())
}

fn criterion_3() -> Check {
    let make = |tss: &[u32]| {
        let mut f: MshrFile<()> = MshrFile::new(3, window(), true);
        for &t in tss {
            assert!(matches!(
                f.allocate(u64::from(t), Target { inst: u64::from(t), ts: ts(t) }, || ()),
                Allocation::Granted(_)
            ));
        }
        f
    };
    let mut f = make(&[22, 23, 28]);
    match f.allocate(0x99, Target { inst: 25, ts: ts(25) }, || ()) {
        Allocation::Leapfrogged { victim, .. } => {
            ensure(victim.ts.value() == 28, format!("leapfrogged ts {}", victim.ts.value()))?;
            ensure(victim.targets.iter().map(|t| t.inst).eq([28]), "victim targets not returned for retry")?;
        }
        other => return Err(format!("ts 25 against {{22,23,28}}: {other:?}")),
    }
    let mut f = make(&[22, 23, 25]);
    let r = f.allocate(0x99, Target { inst: 29, ts: ts(29) }, || ());
    ensure(matches!(r, Allocation::Retry), format!("ts 29 against {{22,23,25}}: {r:?}"))?;
    Ok("28 leapfrogged by 25 with targets retried, 29 retries".into())
}

fn gadget_cfg(g: &Gadget, mode: ProtectionMode) -> RunConfig {
    let mut c = cfg(mode);
    c.features.coherence_mode = g.needs_coherence();
    c
}

fn criterion_4() -> Check {
    let mut slowest = Duration::ZERO;
    for g in attacks::all() {
        for (mode, want) in [
            (ProtectionMode::Ghostminion, Verdict::Safe),
            (ProtectionMode::Unsafe, Verdict::Leaks),
            (ProtectionMode::FlushOnly, Verdict::Leaks),
        ] {
            if mode == ProtectionMode::FlushOnly && g.kind != GadgetKind::SpeculativeInterference {
                continue;
            }
            let start = Instant::now();
            let d = harness::differential(&g, &gadget_cfg(&g, mode)).map_err(|e| format!("{}: {e}", g.name()))?;
            let took = start.elapsed();
            slowest = slowest.max(took);
            ensure(took < Duration::from_secs(5), format!("{} {mode:?} took {took:?}", g.name()))?;
            ensure(d.report.verdict == want, format!("{} {mode:?}: {}", g.name(), d.report.verdict))?;
            if want == Verdict::Safe {
                let first = d.outcomes[0].1.timeline.entries.clone();
                ensure(
                    d.outcomes.iter().all(|(_, o)| o.timeline.entries == first),
                    format!("{}: timelines not bitwise identical", g.name()),
                )?;
                ensure(d.outcomes.len() == 16, "secret domain is not 4 bits")?;
            }
        }
    }
    Ok(format!(
        "5 gadgets SAFE in ghostminion, LEAKS in unsafe, interference LEAKS in flush_only; slowest {slowest:.2?}"
    ))
}

fn fuzz_reports() -> (harness::FuzzReport, harness::FuzzReport, Duration) {
    let start = Instant::now();
    let ghost =
        harness::fuzz_programs(&FuzzParams { count: 1000, ..FuzzParams::default() }, &cfg(ProtectionMode::Ghostminion));
    let unsafe_ = harness::fuzz_programs(
        &FuzzParams { count: 100, mispredicted_loads_only: true, ..FuzzParams::default() },
        &cfg(ProtectionMode::Unsafe),
    );
    (ghost, unsafe_, start.elapsed())
}

fn criterion_5(ghost: &harness::FuzzReport, unsafe_: &harness::FuzzReport, took: Duration) -> Check {
    ensure(ghost.total == 1000, format!("ghost corpus has {} programs", ghost.total))?;
    ensure(
        ghost.passed == 1000,
        format!("ghostminion {}/1000, first failure {:?}", ghost.passed, ghost.failures.first()),
    )?;
    ensure(unsafe_.total == 100, format!("only {} unsafe programs with mispredicted loads", unsafe_.total))?;
    ensure(unsafe_.with_mispredicted_loads == 100, "unsafe corpus includes programs without squashed loads")?;
    ensure(unsafe_.failed_with_mispredicted_loads >= 1, "no unsafe failure")?;
    ensure(took < Duration::from_secs(120), format!("took {took:?}"))?;
    Ok(format!("ghostminion 1000/1000, unsafe {} of 100 fail, {took:.1?}", unsafe_.total - unsafe_.passed))
}

/// A loop with data-dependent branches, loads, stores and divides that
/// commits well over a thousand instructions.
fn long_program() -> String {
    let mut s = String::new();
    for i in 0..16u64 {
        s += &format!(".word {:#x} {}\n", 0x4000 + i * 1024, (i * 5) % 7);
    }
    s += "    li r10, 0x4000\n    li r1, 0\n    li r2, 150\n    li r3, 0\n";
    s += "top:\n";
    s += "    and r4, r1, 15\n    shl r4, r4, 10\n    add r4, r4, r10\n    ld r5, r4, 0\n";
    s += "    and r6, r5, 1\n    beq r6, r0, even\n    div r7, r5, 3\n    add r3, r3, r7\n";
    s += "even:\n    add r5, r5, r1\n    st r5, r4, 8\n    rem r8, r1, 3\n    bne r8, r0, skip\n";
    s += "    ld r9, r4, 8\n    add r3, r3, r9\nskip:\n    add r1, r1, 1\n    blt r1, r2, top\n    halt\n";
    s
}

fn same_with_unbounded(src: &str, c: &RunConfig) -> Result<usize, String> {
    let p = load_program(src, c.mem_bytes).map_err(|e| e.to_string())?;
    let a = simulate(&p, c, None).map_err(|e| e.to_string())?;
    let mut wide = c.clone();
    wide.features.unbounded_timestamps = true;
    let b = simulate(&p, &wide, None).map_err(|e| e.to_string())?;
    match a.timeline.first_difference(&b.timeline) {
        None => Ok(a.timeline.len()),
        Some(d) => Err(format!("diverges from unbounded timestamps at {d:?}")),
    }
}

fn criterion_6() -> Check {
    let src = long_program();
    let mut checked = 0;
    let mut shortest_ratio = usize::MAX;
    for mode in [ProtectionMode::Ghostminion, ProtectionMode::Unsafe] {
        for rob in [64, 8] {
            let mut c = cfg(mode);
            c.core.rob_size = rob;
            c.core.fetch_queue = c.core.fetch_queue.min(rob);
            let committed = same_with_unbounded(&src, &c)?;
            let bound = 4 * 2 * rob;
            ensure(committed > bound, format!("rob {rob}: only {committed} of {bound} instructions committed"))?;
            shortest_ratio = shortest_ratio.min(committed / bound);
            checked += 1;
        }
    }
    let mut small = cfg(ProtectionMode::Ghostminion);
    small.core.rob_size = 8;
    small.core.fetch_queue = 4;
    for i in 0..50 {
        same_with_unbounded(&fuzz::generate(fuzz::program_seed(77, i), 12, 40), &small)?;
        checked += 1;
    }
    Ok(format!("{checked} runs match unbounded timestamps, long program commits >= {shortest_ratio}x 4*2N"))
}

/// Warms 32 lines into the L2 only, then mispredicts a branch whose wrong
/// path either loads all of them (filling the buffer) or does arithmetic.
fn flush_program(fill_buffer: bool) -> String {
    let lines = 32u64;
    let base = 0x40_0000u64;
    let chain = 0x60_0000u64;
    let mut s = String::new();
    for d in 0..6u64 {
        let next = if d == 5 { 0 } else { chain + (d + 1) * 4096 };
        s += &format!(".word {:#x} {}\n", chain + d * 4096, next);
    }
    s += &format!("    li r10, {base:#x}\n");
    for way in 0..=2u64 {
        for i in 0..lines {
            s += &format!("    ld r3, r10, {}\n", i * 64 + way * 32768);
        }
    }
    s += &format!("    fence\n    li r9, {chain:#x}\n");
    for _ in 0..6 {
        s += "    ld r9, r9, 0\n";
    }
    s += "    bne r9, r0, wrong\n    add r2, r2, 1\n    add r2, r2, 1\n    halt\nwrong:\n";
    for i in 0..lines {
        if fill_buffer {
            s += &format!("    ld r3, r10, {}\n", i * 64);
        } else {
            s += "    add r3, r3, 1\n";
        }
    }
    s += "    halt\n";
    s
}

fn criterion_7() -> Check {
    let mut details = Vec::new();
    for mode in [ProtectionMode::Ghostminion, ProtectionMode::FlushOnly] {
        let c = cfg(mode);
        let capacity = (c.dminion.size_bytes / c.line_bytes) as u64;
        let mut seen = Vec::new();
        for fill_buffer in [false, true] {
            let p = load_program(&flush_program(fill_buffer), c.mem_bytes).map_err(|e| e.to_string())?;
            let o = simulate(&p, &c, None).map_err(|e| e.to_string())?;
            let at = o.timeline.entries.iter().position(|e| e.opcode == Opcode::Branch).ok_or("no branch")?;
            let (branch, next) = (&o.timeline.entries[at], &o.timeline.entries[at + 1]);
            seen.push((next.commit - branch.complete, o.counters.lines_flushed));
        }
        let extra = seen[1].1 - seen[0].1;
        ensure(extra == capacity, format!("{mode:?}: buffer held {extra} extra lines at squash, not {capacity}"))?;
        ensure(
            seen[0].0 == seen[1].0,
            format!("{mode:?}: squash to refetched commit {} when empty, {} when full", seen[0].0, seen[1].0),
        )?;
        details.push(format!("{mode:?} {} cycles", seen[0].0));
    }
    Ok(format!("empty vs full buffer: {}", details.join(", ")))
}

fn criterion_8(ghost: &harness::FuzzReport) -> Check {
    ensure(ghost.impure == 0, format!("{} programs end with different cache or predictor state", ghost.impure))?;
    Ok(format!("{} programs end with identical L1, L2 and prefetcher state", ghost.total))
}

fn criterion_9() -> Check {
    let g = attacks::gadget_spectre_rewind();
    let mut spread = Vec::new();
    for ordered in [true, false] {
        let mut c = cfg(ProtectionMode::Ghostminion);
        c.features.ordered_nonpipelined = Some(ordered);
        let d = harness::differential(&g, &c).map_err(|e| e.to_string())?;
        let last: Vec<i64> =
            d.outcomes.iter().map(|(_, o)| g.chain_durations(&o.timeline).last().copied().unwrap_or(-1)).collect();
        let mut distinct = last.clone();
        distinct.sort_unstable();
        distinct.dedup();
        spread.push(distinct);
    }
    ensure(spread[0].len() == 1, format!("ordered durations vary: {:?}", spread[0]))?;
    ensure(spread[1].len() > 1, format!("greedy durations constant: {:?}", spread[1]))?;
    Ok(format!("ordered {:?}, greedy {:?}", spread[0], spread[1]))
}

fn criterion_10() -> Check {
    let g = attacks::gadget_spectre_prime();
    ensure(harness::run_differential(&g, &cfg(ProtectionMode::Ghostminion)).is_err(), "single-core run accepted")?;
    for (mode, want) in [(ProtectionMode::Ghostminion, Verdict::Safe), (ProtectionMode::Unsafe, Verdict::Leaks)] {
        let d = harness::differential(&g, &gadget_cfg(&g, mode)).map_err(|e| e.to_string())?;
        ensure(d.report.verdict == want, format!("{mode:?}: {}", d.report.verdict))?;
        for (s, o) in &d.outcomes {
            ensure(
                o.counters.directory_checks == o.cycles,
                format!("secret {s}: {} checks over {} cycles", o.counters.directory_checks, o.cycles),
            )?;
        }
    }
    Ok("two-core ghostminion SAFE, unsafe LEAKS, directory checked every cycle".into())
}

fn criterion_11() -> Check {
    let g = attacks::gadget_speculative_interference();
    let d = harness::differential(&g, &cfg(ProtectionMode::Ghostminion)).map_err(|e| e.to_string())?;
    let fired = |c: &MemCounters| c.timeguard_blocks + c.leapfrogs + c.timeleaps;
    for (s, o) in &d.outcomes {
        ensure(fired(&o.counters) > 0, format!("secret {s}: no guard mechanism fired"))?;
    }
    let mixed = ".word 0x2000 6\n.word 0x2040 7\n    li r1, 0x2000\n    ld r2, r1, 0\n    ld r3, r1, 64\n    \
                 mul r4, r2, r3\n    div r5, r4, 3\n    add r6, r5, r2\n    st r6, r1, 128\n    ld r7, r1, 128\n    halt\n";
    // many more independent misses than MSHRs
    let misses: String = std::iter::once("    li r1, 0x40000\n".to_string())
        .chain((0..24).map(|i| format!("    ld r{}, r1, {}\n", i % 8 + 2, i * 4096)))
        .chain(std::iter::once("    halt\n".to_string()))
        .collect();
    let c = cfg(ProtectionMode::Ghostminion);
    for (name, src) in [("mixed", mixed.to_string()), ("miss-heavy", misses)] {
        let o = simulate(&load_program(&src, c.mem_bytes).map_err(|e| e.to_string())?, &c, None)
            .map_err(|e| e.to_string())?;
        ensure(fired(&o.counters) == 0, format!("straight-line {name} program: {:?}", o.counters))?;
    }
    Ok(format!(
        "interference total {}, two straight-line programs 0",
        d.report.counters.timeguard_blocks + d.report.counters.leapfrogs + d.report.counters.timeleaps
    ))
}

fn main() {
    let (ghost, unsafe_, fuzz_time) = fuzz_reports();
    let results: Vec<(usize, &str, Check)> = vec![
        (1, "buffer read guard", criterion_1()),
        (2, "buffer fill and eviction", criterion_2()),
        (3, "MSHR leapfrog and retry", criterion_3()),
        (4, "gadget noninterference", criterion_4()),
        (5, "transient ablation", criterion_5(&ghost, &unsafe_, fuzz_time)),
        (6, "timestamp window", criterion_6()),
        (7, "flush timing invariance", criterion_7()),
        (8, "purity", criterion_8(&ghost)),
        (9, "divider scheduling", criterion_9()),
        (10, "coherence", criterion_10()),
        (11, "counter report", criterion_11()),
    ];
    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
