//! Set-associative, LRU, write-back cache arrays for the non-speculative
//! hierarchy. Caches track tags and coherence state only; values live in the
//! architectural memory image.

use serde::{Deserialize, Serialize};

/// Where a line's data came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    L1,
    L2,
    Memory,
}

/// Per-line MESI state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LineState {
    Shared,
    Exclusive,
    Modified,
}

impl LineState {
    pub fn writable(self) -> bool {
        matches!(self, LineState::Exclusive | LineState::Modified)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Way {
    pub line: u64,
    pub state: LineState,
    pub lru: u64,
}

/// Result of installing a line: the evicted victim, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Evicted {
    pub line: u64,
    pub state: LineState,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cache {
    sets: Vec<Vec<Option<Way>>>,
    set_mask: u64,
    latency: u64,
    clock: u64,
}

impl Cache {
    pub fn new(sets: usize, ways: usize, latency: u64) -> Self {
        assert!(sets.is_power_of_two() && ways > 0);
        Self { sets: vec![vec![None; ways]; sets], set_mask: sets as u64 - 1, latency, clock: 0 }
    }

    pub fn latency(&self) -> u64 {
        self.latency
    }

    pub fn ways(&self) -> usize {
        self.sets[0].len()
    }

    fn set_of(&self, line: u64) -> usize {
        (line & self.set_mask) as usize
    }

    fn find(&self, line: u64) -> Option<(usize, usize)> {
        let s = self.set_of(line);
        self.sets[s].iter().position(|w| matches!(w, Some(w) if w.line == line)).map(|i| (s, i))
    }

    pub fn state(&self, line: u64) -> Option<LineState> {
        self.find(line).and_then(|(s, i)| self.sets[s][i].map(|w| w.state))
    }

    pub fn contains(&self, line: u64) -> bool {
        self.find(line).is_some()
    }

    /// Marks `line` most recently used. Returns false if absent.
    pub fn touch(&mut self, line: u64) -> bool {
        self.clock += 1;
        let clock = self.clock;
        match self.find(line) {
            Some((s, i)) => {
                if let Some(w) = self.sets[s][i].as_mut() {
                    w.lru = clock;
                }
                true
            }
            None => false,
        }
    }

    pub fn set_state(&mut self, line: u64, state: LineState) {
        if let Some((s, i)) = self.find(line) {
            if let Some(w) = self.sets[s][i].as_mut() {
                w.state = state;
            }
        }
    }

    /// Inserts (or updates) `line`, evicting the LRU way when the set is full.
    pub fn install(&mut self, line: u64, state: LineState) -> Option<Evicted> {
        self.clock += 1;
        let clock = self.clock;
        if let Some((s, i)) = self.find(line) {
            let w = self.sets[s][i].as_mut().expect("found way is valid");
            w.state = state;
            w.lru = clock;
            return None;
        }
        let s = self.set_of(line);
        let set = &mut self.sets[s];
        let slot = match set.iter().position(Option::is_none) {
            Some(free) => free,
            None => set
                .iter()
                .enumerate()
                .min_by_key(|(_, w)| w.map(|w| w.lru).unwrap_or(0))
                .map(|(i, _)| i)
                .expect("set has ways"),
        };
        let evicted = set[slot].map(|w| Evicted { line: w.line, state: w.state });
        set[slot] = Some(Way { line, state, lru: clock });
        evicted
    }

    pub fn invalidate(&mut self, line: u64) -> Option<LineState> {
        let (s, i) = self.find(line)?;
        self.sets[s][i].take().map(|w| w.state)
    }

    /// Contents as `(set, way, line, state)` with recency order per set,
    /// independent of absolute LRU clock values.
    pub fn snapshot(&self) -> Vec<(usize, u64, LineState, usize)> {
        let mut out = Vec::new();
        for (s, set) in self.sets.iter().enumerate() {
            let mut valid: Vec<&Way> = set.iter().flatten().collect();
            valid.sort_by_key(|w| w.lru);
            for (rank, w) in valid.into_iter().enumerate() {
                out.push((s, w.line, w.state, rank));
            }
        }
        out
    }

    pub fn valid_lines(&self) -> impl Iterator<Item = u64> + '_ {
        self.sets.iter().flatten().flatten().map(|w| w.line)
    }
}
