//! The speculative buffer that sits beside an L1 cache.
//!
//! Lines are tagged with the timestamp of the access that brought them in.
//! With time guarding enabled, a read at timestamp `t` only sees lines whose
//! timestamp is not after `t`, and a fill at `t` may only displace a free
//! way or a line whose timestamp is not before `t`. A squash invalidates
//! every line younger than the squash point in one step, through the
//! parallel valid/timestamp registers.
//!
//! Without time guarding (flush-only mode) reads see every valid line and
//! fills replace the oldest-inserted way; only the squash wipe remains.

use serde::{Deserialize, Serialize};

use crate::cache::Level;
use crate::order::{Timestamp, TimestampWindow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GhostLine {
    pub line: u64,
    pub ts: Timestamp,
    /// Instruction that brought the line in (for influence tracing).
    pub owner: u64,
    pub origin: Level,
    /// Forwarded from a remote Exclusive/Modified copy.
    pub noncoherent: bool,
    inserted: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GhostLookup {
    Hit {
        origin: Level,
        noncoherent: bool,
        owner: u64,
    },
    /// `blocked` is set when a matching line exists but is younger than the
    /// reader. Callers must treat this exactly like an absent line.
    Miss {
        blocked: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FillOutcome {
    Stored,
    Rejected,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GhostCounters {
    pub timeguard_blocks: u64,
    pub fills_rejected: u64,
    pub flush_count: u64,
    pub lines_extracted: u64,
    pub lines_flushed: u64,
}

/// Parameters for constructing a fill.
#[derive(Clone, Copy, Debug)]
pub struct Fill {
    pub line: u64,
    pub ts: Timestamp,
    pub owner: u64,
    pub origin: Level,
    pub noncoherent: bool,
}

#[derive(Clone, Debug)]
pub struct GhostMinion {
    sets: Vec<Vec<Option<GhostLine>>>,
    set_mask: u64,
    window: TimestampWindow,
    timeguard: bool,
    clock: u64,
    pub counters: GhostCounters,
}

impl GhostMinion {
    pub fn new(sets: usize, ways: usize, window: TimestampWindow, timeguard: bool) -> Self {
        assert!(sets.is_power_of_two() && ways > 0);
        Self {
            sets: vec![vec![None; ways]; sets],
            set_mask: sets as u64 - 1,
            window,
            timeguard,
            clock: 0,
            counters: GhostCounters::default(),
        }
    }

    pub fn window(&self) -> TimestampWindow {
        self.window
    }

    fn set_of(&self, line: u64) -> usize {
        (line & self.set_mask) as usize
    }

    fn readable(&self, line_ts: Timestamp, reader: Timestamp) -> bool {
        !self.timeguard || self.window.not_after(line_ts, reader)
    }

    pub fn lookup(&mut self, line: u64, reader: Timestamp) -> GhostLookup {
        let s = self.set_of(line);
        let Some(found) = self.sets[s].iter().flatten().find(|g| g.line == line).copied() else {
            return GhostLookup::Miss { blocked: false };
        };
        if self.readable(found.ts, reader) {
            GhostLookup::Hit { origin: found.origin, noncoherent: found.noncoherent, owner: found.owner }
        } else {
            self.counters.timeguard_blocks += 1;
            GhostLookup::Miss { blocked: true }
        }
    }

    /// Peek without counting a guard block.
    pub fn probe(&self, line: u64) -> Option<&GhostLine> {
        let s = self.set_of(line);
        self.sets[s].iter().flatten().find(|g| g.line == line)
    }

    pub fn fill(&mut self, fill: Fill) -> FillOutcome {
        self.clock += 1;
        let s = self.set_of(fill.line);
        let window = self.window;
        let set = &self.sets[s];
        let slot = if self.timeguard {
            let eligible = |g: &GhostLine| window.not_after(fill.ts, g.ts);
            if let Some(same) = set.iter().position(|w| matches!(w, Some(g) if g.line == fill.line)) {
                // a same-tag way is reused so a set never holds duplicates
                if !eligible(&set[same].expect("valid")) {
                    // an older copy is already readable by this filler
                    return FillOutcome::Stored;
                }
                Some(same)
            } else {
                set.iter().position(Option::is_none).or_else(|| {
                    set.iter()
                        .enumerate()
                        .filter_map(|(i, w)| w.filter(|g| eligible(g)).map(|g| (i, g.ts)))
                        .max_by(|a, b| window.cmp(a.1, b.1))
                        .map(|(i, _)| i)
                })
            }
        } else {
            set.iter()
                .position(|w| matches!(w, Some(g) if g.line == fill.line))
                .or_else(|| set.iter().position(Option::is_none))
                .or_else(|| {
                    set.iter().enumerate().min_by_key(|(_, w)| w.map(|g| g.inserted).unwrap_or(0)).map(|(i, _)| i)
                })
        };
        match slot {
            Some(i) => {
                self.sets[s][i] = Some(GhostLine {
                    line: fill.line,
                    ts: fill.ts,
                    owner: fill.owner,
                    origin: fill.origin,
                    noncoherent: fill.noncoherent,
                    inserted: self.clock,
                });
                FillOutcome::Stored
            }
            None => {
                self.counters.fills_rejected += 1;
                FillOutcome::Rejected
            }
        }
    }

    /// Removes and returns the line for `committed` if it may read it.
    /// The caller installs it into the L1 in the same cycle.
    pub fn commit_extract(&mut self, line: u64, committed: Timestamp) -> Option<GhostLine> {
        let s = self.set_of(line);
        let i = self.sets[s].iter().position(|w| matches!(w, Some(g) if g.line == line))?;
        let g = self.sets[s][i].expect("position found a valid way");
        if !self.readable(g.ts, committed) {
            return None;
        }
        self.sets[s][i] = None;
        self.counters.lines_extracted += 1;
        Some(g)
    }

    /// Invalidates every line younger than `squash`. Constant cost:
    /// models a single-cycle parallel clear regardless of how many lines go.
    pub fn flush_after(&mut self, squash: Timestamp) -> usize {
        self.counters.flush_count += 1;
        let window = self.window;
        let timeguard = self.timeguard;
        let mut wiped = 0;
        for way in self.sets.iter_mut().flatten() {
            if let Some(g) = way {
                if !timeguard || !window.not_after(g.ts, squash) {
                    *way = None;
                    wiped += 1;
                }
            }
        }
        self.counters.lines_flushed += wiped as u64;
        wiped
    }

    /// Drops every line (flush-only mode squashes, or a full reset).
    pub fn flush_all(&mut self) -> usize {
        self.counters.flush_count += 1;
        let mut wiped = 0;
        for way in self.sets.iter_mut().flatten() {
            if way.take().is_some() {
                wiped += 1;
            }
        }
        self.counters.lines_flushed += wiped as u64;
        wiped
    }

    /// Drops `line` if present (exclusivity with the L1, coherence upgrades).
    pub fn invalidate(&mut self, line: u64) -> bool {
        let s = self.set_of(line);
        let mut hit = false;
        for way in self.sets[s].iter_mut() {
            if matches!(way, Some(g) if g.line == line) {
                *way = None;
                hit = true;
            }
        }
        hit
    }

    pub fn valid_lines(&self) -> impl Iterator<Item = &GhostLine> + '_ {
        self.sets.iter().flatten().flatten()
    }

    pub fn occupancy(&self) -> usize {
        self.valid_lines().count()
    }

    /// Lines as `(set, line, ts)`, in way order.
    pub fn snapshot(&self) -> Vec<(usize, u64, u32)> {
        let mut out = Vec::new();
        for (s, set) in self.sets.iter().enumerate() {
            for g in set.iter().flatten() {
                out.push((s, g.line, g.ts.value()));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(v: u32) -> Timestamp {
        Timestamp::new(v, u64::from(v))
    }

    fn minion(sets: usize, ways: usize) -> GhostMinion {
        GhostMinion::new(sets, ways, TimestampWindow::for_capacity(192), true)
    }

    fn fill(line: u64, t: u32) -> Fill {
        Fill { line, ts: ts(t), owner: u64::from(t), origin: Level::L2, noncoherent: false }
    }

    fn set_ts(g: &GhostMinion) -> Vec<u32> {
        let mut v: Vec<u32> = g.valid_lines().map(|l| l.ts.value()).collect();
        v.sort();
        v
    }

    #[test]
    fn read_guard_examples() {
        let mut g = minion(16, 2);
        g.fill(fill(0x14, 22));
        assert_eq!(g.lookup(0x14, ts(21)), GhostLookup::Miss { blocked: true });
        g.fill(fill(0x15, 27));
        assert!(matches!(g.lookup(0x15, ts(28)), GhostLookup::Hit { .. }));
        assert!(matches!(g.lookup(0x15, ts(27)), GhostLookup::Hit { .. }));
        assert_eq!(g.counters.timeguard_blocks, 1);
    }

    #[test]
    fn fill_prefers_free_slot() {
        let mut g = minion(1, 2);
        g.fill(fill(1, 26));
        assert_eq!(g.fill(fill(2, 30)), FillOutcome::Stored);
        assert_eq!(set_ts(&g), vec![26, 30]);
    }

    #[test]
    fn fill_evicts_highest_eligible() {
        let mut g = minion(1, 2);
        g.fill(fill(1, 26));
        g.fill(fill(2, 28));
        assert_eq!(g.fill(fill(3, 25)), FillOutcome::Stored);
        assert_eq!(set_ts(&g), vec![25, 26]);
    }

    #[test]
    fn fill_rejected_when_all_older() {
        let mut g = minion(1, 2);
        g.fill(fill(1, 3));
        g.fill(fill(2, 4));
        assert_eq!(g.fill(fill(3, 9)), FillOutcome::Rejected);
        assert_eq!(set_ts(&g), vec![3, 4]);
        assert_eq!(g.counters.fills_rejected, 1);
    }

    #[test]
    fn same_tag_way_is_overwritten() {
        let mut g = minion(1, 2);
        g.fill(fill(1, 10));
        g.fill(fill(2, 30));
        g.fill(fill(2, 20));
        assert_eq!(set_ts(&g), vec![10, 20]);
    }

    #[test]
    fn commit_extract_frees_slot() {
        let mut g = minion(16, 2);
        g.fill(fill(0x40, 30));
        let line = g.commit_extract(0x40, ts(30)).unwrap();
        assert_eq!(line.line, 0x40);
        assert_eq!(g.occupancy(), 0);
        assert_eq!(g.counters.lines_extracted, 1);
        // younger copy is not extractable by an older commit
        g.fill(fill(0x41, 40));
        assert!(g.commit_extract(0x41, ts(35)).is_none());
    }

    #[test]
    fn flush_keeps_older_lines() {
        let mut g = minion(16, 2);
        for (line, t) in [(1, 8), (2, 11), (3, 15)] {
            g.fill(fill(line, t));
        }
        assert_eq!(g.flush_after(ts(10)), 2);
        assert_eq!(set_ts(&g), vec![8]);
        let mut empty = minion(16, 2);
        assert_eq!(empty.flush_after(ts(10)), 0);
        assert_eq!(empty.counters.flush_count, 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[derive(Clone, Debug)]
        enum Op {
            Fill(u64, u32),
            Extract(u64, u32),
            Flush(u32),
        }

        fn op() -> impl Strategy<Value = Op> {
            prop_oneof![
                (0u64..24, 0u32..40).prop_map(|(l, t)| Op::Fill(l, t)),
                (0u64..24, 0u32..40).prop_map(|(l, t)| Op::Extract(l, t)),
                (0u32..40).prop_map(Op::Flush),
            ]
        }

        fn apply(g: &mut GhostMinion, o: &Op) {
            match *o {
                Op::Fill(l, t) => {
                    g.fill(fill(l, t));
                }
                Op::Extract(l, t) => {
                    g.commit_extract(l, ts(t));
                }
                Op::Flush(t) => {
                    g.flush_after(ts(t));
                }
            }
        }

        proptest! {
            // Dropping every speculative fill by a timestamp after `cut` leaves
            // the lines a reader at `cut` can see unchanged, for any geometry.
            // Commits and squashes are not speculative and stay in both runs.
            #[test]
            fn younger_operations_are_invisible(
                ways in 1usize..=4,
                sets_log in 1u32..=4,
                ops in proptest::collection::vec(op(), 0..60),
                cut in 0u32..40,
            ) {
                let sets = 1usize << sets_log;
                let mut full = minion(sets, ways);
                let mut pruned = minion(sets, ways);
                for o in &ops {
                    apply(&mut full, o);
                    let keep = match *o {
                        Op::Fill(_, t) => t <= cut,
                        Op::Extract(..) | Op::Flush(_) => true,
                    };
                    if keep {
                        apply(&mut pruned, o);
                    }
                    let visible = |g: &GhostMinion| {
                        let mut v: Vec<(u64, u32)> = g.valid_lines().filter(|l| l.ts.value() <= cut).map(|l| (l.line, l.ts.value())).collect();
                        v.sort();
                        v
                    };
                    prop_assert_eq!(visible(&full), visible(&pruned));
                }
                for line in 0..24 {
                    let a = matches!(full.lookup(line, ts(cut)), GhostLookup::Hit { .. });
                    let b = matches!(pruned.lookup(line, ts(cut)), GhostLookup::Hit { .. });
                    prop_assert_eq!(a, b);
                }
            }
        }
    }
}
