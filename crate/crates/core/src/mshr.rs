//! Timestamped miss status holding registers.
//!
//! One file per cache level (per core). Each entry tracks one in-flight line
//! and the requests waiting on it; the entry's timestamp is always the
//! earliest among its targets. With ordering enabled, an earlier request that
//! finds the file full steals the highest-timestamped entry (leapfrogging),
//! and an earlier request for a line already in flight takes over the entry
//! and restarts it (timeleaping).

use crate::order::{Timestamp, TimestampWindow};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Target {
    pub inst: u64,
    pub ts: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MshrEntry<P> {
    pub line: u64,
    pub ts: Timestamp,
    pub targets: Vec<Target>,
    pub payload: P,
}

#[derive(Debug, PartialEq, Eq)]
pub enum Allocation<P> {
    Granted(usize),
    /// Joined an entry whose timestamp is not after the request's.
    Merged(usize),
    /// Joined a later-timestamped entry for the same line, which now carries
    /// the request's timestamp; the caller restarts its access.
    Timeleaped(usize),
    /// Took the slot of the highest-timestamped entry, returned as `victim`.
    /// Its targets must retry.
    Leapfrogged {
        slot: usize,
        victim: MshrEntry<P>,
    },
    Retry,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MshrCounters {
    pub leapfrogs: u64,
    pub timeleaps: u64,
    pub retries: u64,
    pub merges: u64,
}

#[derive(Clone, Debug)]
pub struct MshrFile<P> {
    slots: Vec<Option<MshrEntry<P>>>,
    window: TimestampWindow,
    ordered: bool,
    pub counters: MshrCounters,
}

impl<P> MshrFile<P> {
    pub fn new(capacity: usize, window: TimestampWindow, ordered: bool) -> Self {
        assert!(capacity > 0);
        Self { slots: (0..capacity).map(|_| None).collect(), window, ordered, counters: MshrCounters::default() }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn occupied(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    pub fn find(&self, line: u64) -> Option<usize> {
        self.slots.iter().position(|s| matches!(s, Some(e) if e.line == line))
    }

    pub fn get(&self, slot: usize) -> Option<&MshrEntry<P>> {
        self.slots.get(slot).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, slot: usize) -> Option<&mut MshrEntry<P>> {
        self.slots.get_mut(slot).and_then(Option::as_mut)
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, &MshrEntry<P>)> + '_ {
        self.slots.iter().enumerate().filter_map(|(i, s)| s.as_ref().map(|e| (i, e)))
    }

    pub fn release(&mut self, slot: usize) -> Option<MshrEntry<P>> {
        self.slots.get_mut(slot).and_then(Option::take)
    }

    /// Requests `line` on behalf of `target`. `payload` builds the state of a
    /// freshly granted entry.
    pub fn allocate(&mut self, line: u64, target: Target, payload: impl FnOnce() -> P) -> Allocation<P> {
        let window = self.window;
        if let Some(slot) = self.find(line) {
            let entry = self.slots[slot].as_mut().expect("found slot is occupied");
            let earlier = window.before(target.ts, entry.ts);
            entry.targets.push(target);
            if earlier {
                entry.ts = target.ts;
                if self.ordered {
                    self.counters.timeleaps += 1;
                    return Allocation::Timeleaped(slot);
                }
            }
            self.counters.merges += 1;
            return Allocation::Merged(slot);
        }
        let fresh = |p: P| MshrEntry { line, ts: target.ts, targets: vec![target], payload: p };
        if let Some(slot) = self.slots.iter().position(Option::is_none) {
            self.slots[slot] = Some(fresh(payload()));
            return Allocation::Granted(slot);
        }
        if self.ordered {
            let (slot, victim_ts) = self
                .entries()
                .map(|(i, e)| (i, e.ts))
                .max_by(|a, b| window.cmp(a.1, b.1))
                .expect("full file has entries");
            if window.before(target.ts, victim_ts) {
                let victim = self.slots[slot].replace(fresh(payload())).expect("victim slot occupied");
                self.counters.leapfrogs += 1;
                return Allocation::Leapfrogged { slot, victim };
            }
        }
        self.counters.retries += 1;
        Allocation::Retry
    }

    /// Removes every target younger than `squash`. Entries left without
    /// targets are released and returned when `release_empty` is set.
    pub fn squash_after(&mut self, squash: Timestamp, release_empty: bool) -> Vec<(usize, MshrEntry<P>)> {
        let window = self.window;
        let mut released = Vec::new();
        for (i, slot) in self.slots.iter_mut().enumerate() {
            let Some(entry) = slot.as_mut() else { continue };
            entry.targets.retain(|t| window.not_after(t.ts, squash));
            if let Some(min) = entry.targets.iter().map(|t| t.ts).min_by(|a, b| window.cmp(*a, *b)) {
                entry.ts = min;
            } else if release_empty {
                released.push((i, slot.take().expect("slot occupied")));
            }
        }
        released
    }

    /// Detaches one instruction from whatever entry holds it.
    pub fn remove_target(&mut self, inst: u64) {
        let window = self.window;
        for entry in self.slots.iter_mut().flatten() {
            entry.targets.retain(|t| t.inst != inst);
            if let Some(min) = entry.targets.iter().map(|t| t.ts).min_by(|a, b| window.cmp(*a, *b)) {
                entry.ts = min;
            }
        }
    }
}
