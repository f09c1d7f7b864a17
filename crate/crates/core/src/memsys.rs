//! The cache hierarchy shared by all cores: private L1D + data ghost,
//! private L1I + instruction ghost, per-core MSHR files, a shared L2, the
//! backing memory image and the commit-trained stride prefetchers.
//!
//! The hierarchy only moves tags and coherence state; architectural values
//! live in the memory image, written by stores at commit.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{Cache, Level, LineState};
use crate::config::{CoherencePolicy, RunConfig};
use crate::ghost::{Fill, GhostLookup, GhostMinion};
use crate::mshr::{Allocation, MshrFile, Target};
use crate::order::{Timestamp, TimestampWindow};
use crate::prefetch::StridePrefetcher;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemCounters {
    pub timeguard_blocks: u64,
    pub fills_rejected: u64,
    pub flushes: u64,
    pub lines_extracted: u64,
    pub lines_flushed: u64,
    pub leapfrogs: u64,
    pub timeleaps: u64,
    pub retries: u64,
    pub prefetches_issued: u64,
    pub async_reloads: u64,
    pub replays: u64,
    pub directory_checks: u64,
}

impl std::ops::Add for MemCounters {
    type Output = MemCounters;

    fn add(self, o: MemCounters) -> MemCounters {
        MemCounters {
            timeguard_blocks: self.timeguard_blocks + o.timeguard_blocks,
            fills_rejected: self.fills_rejected + o.fills_rejected,
            flushes: self.flushes + o.flushes,
            lines_extracted: self.lines_extracted + o.lines_extracted,
            lines_flushed: self.lines_flushed + o.lines_flushed,
            leapfrogs: self.leapfrogs + o.leapfrogs,
            timeleaps: self.timeleaps + o.timeleaps,
            retries: self.retries + o.retries,
            prefetches_issued: self.prefetches_issued + o.prefetches_issued,
            async_reloads: self.async_reloads + o.async_reloads,
            replays: self.replays + o.replays,
            directory_checks: self.directory_checks + o.directory_checks,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoherenceViolation {
    #[error("cycle {cycle}: line {line:#x} writable in core {owner} while also held by core {other}")]
    MultipleOwners { cycle: u64, line: u64, owner: usize, other: usize },
    #[error("cycle {cycle}: ghost of core {core} holds line {line:#x} while core {owner} has it writable")]
    StaleGhost { cycle: u64, line: u64, core: usize, owner: usize },
}

/// Outcome of presenting a load to the data side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LoadAccess {
    Hit {
        ready_at: u64,
        origin: Level,
        noncoherent: bool,
    },
    /// Waiting on an MSHR. `retry` lists instructions whose entry was
    /// leapfrogged and must present themselves again.
    Pending {
        retry: Vec<u64>,
    },
    Retry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadDone {
    pub inst: u64,
    pub origin: Level,
    pub noncoherent: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IFetch {
    Hit,
    Miss { ready_at: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    /// Waiting to present itself to the L2 at cycle `at`.
    AwaitL2 {
        at: u64,
    },
    /// Blocked behind a remote writable copy until non-speculative.
    Deferred,
    Filling {
        ready_at: u64,
        origin: Level,
        noncoherent: bool,
        l2_slot: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct L1Miss {
    phase: Phase,
    nonspec: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct L2Miss {
    l1_slot: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FillTarget {
    L1(usize),
    L2,
}

#[derive(Clone, Copy, Debug)]
struct Scheduled {
    at: u64,
    line: u64,
    target: FillTarget,
    from_memory: bool,
}

#[derive(Clone, Copy, Debug)]
struct PendingIFill {
    core: usize,
    line: u64,
    ts: Timestamp,
    at: u64,
    origin: Level,
}

#[derive(Clone, Debug)]
struct CoreMem {
    l1d: Cache,
    dghost: GhostMinion,
    l1i: Cache,
    ighost: GhostMinion,
    l1_mshrs: MshrFile<L1Miss>,
    l2_mshrs: MshrFile<L2Miss>,
    l1_prefetch: Option<StridePrefetcher>,
}

/// `(set, line, state, lru rank)` of one cached line.
pub type CachedLine = (usize, u64, LineState, usize);
/// `(slot, pc, last address, stride, confidence)` of one prefetcher entry.
pub type StrideEntry = (usize, u64, u64, i64, u8);

/// Snapshot of all non-speculative state, for purity comparisons.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NonSpecState {
    pub l1d: Vec<Vec<CachedLine>>,
    pub l1i: Vec<Vec<CachedLine>>,
    pub l2: Vec<CachedLine>,
    pub prefetchers: Vec<Vec<StrideEntry>>,
}

#[derive(Clone, Debug)]
pub struct MemSystem {
    cores: Vec<CoreMem>,
    l2: Cache,
    l2_prefetch: Option<StridePrefetcher>,
    memory: HashMap<u64, u64>,
    scheduled: Vec<Scheduled>,
    ifills: Vec<PendingIFill>,
    line_bytes: u64,
    mem_mask: u64,
    memory_latency: u64,
    minion: bool,
    iminion: bool,
    coherence: bool,
    policy: CoherencePolicy,
    async_reload: bool,
    window: TimestampWindow,
    pub counters: MemCounters,
}

fn cmp_ts(w: TimestampWindow) -> impl Fn(&(usize, Timestamp), &(usize, Timestamp)) -> std::cmp::Ordering {
    move |a, b| w.cmp(a.1, b.1)
}

impl MemSystem {
    pub fn new(cfg: &RunConfig, data: impl IntoIterator<Item = (u64, u64)>) -> Self {
        let line = cfg.line_bytes;
        let window = rob_window(cfg);
        let fetch_window = fetch_window(cfg);
        let timeguard = cfg.mode.timeguarded();
        let ncores = cfg.num_cores();
        let l2_mshrs = (cfg.l2.mshrs / ncores).max(1);
        let cores = (0..ncores)
            .map(|_| CoreMem {
                l1d: Cache::new(cfg.l1d.sets(line), cfg.l1d.ways, cfg.l1d.latency),
                dghost: GhostMinion::new(
                    cfg.dminion.size_bytes / (cfg.dminion.ways * line),
                    cfg.dminion.ways,
                    window,
                    timeguard,
                ),
                l1i: Cache::new(cfg.l1i.sets(line), cfg.l1i.ways, cfg.l1i.latency),
                ighost: GhostMinion::new(
                    cfg.iminion.size_bytes / (cfg.iminion.ways * line),
                    cfg.iminion.ways,
                    fetch_window,
                    timeguard,
                ),
                l1_mshrs: MshrFile::new(cfg.l1d.mshrs, window, timeguard),
                l2_mshrs: MshrFile::new(l2_mshrs, window, timeguard),
                l1_prefetch: cfg
                    .prefetch
                    .l1_enabled
                    .then(|| StridePrefetcher::new(cfg.prefetch.table_entries, cfg.prefetch.confidence_threshold)),
            })
            .collect();
        let mem_mask = cfg.mem_bytes - 1;
        Self {
            cores,
            l2: Cache::new(cfg.l2.sets(line), cfg.l2.ways, cfg.l2.latency),
            l2_prefetch: cfg
                .prefetch
                .l2_enabled
                .then(|| StridePrefetcher::new(cfg.prefetch.table_entries, cfg.prefetch.confidence_threshold)),
            memory: data.into_iter().map(|(a, v)| (a & mem_mask & !7, v)).collect(),
            scheduled: Vec::new(),
            ifills: Vec::new(),
            line_bytes: line as u64,
            mem_mask,
            memory_latency: cfg.memory_latency,
            minion: cfg.mode.has_minion(),
            iminion: cfg.mode.has_minion() && cfg.features.icache_minion,
            coherence: cfg.features.coherence_mode,
            policy: cfg.features.coherence_policy,
            async_reload: cfg.features.async_reload,
            window,
            counters: MemCounters::default(),
        }
    }

    pub fn line_of(&self, addr: u64) -> u64 {
        addr / self.line_bytes
    }

    /// Word-aligned address inside the memory image.
    pub fn canonical(&self, addr: u64) -> u64 {
        addr & self.mem_mask & !7
    }

    pub fn read_word(&self, addr: u64) -> u64 {
        self.memory.get(&self.canonical(addr)).copied().unwrap_or(0)
    }

    pub fn write_word(&mut self, addr: u64, value: u64) {
        let a = self.canonical(addr);
        self.memory.insert(a, value);
    }

    fn l1_latency(&self, core: usize) -> u64 {
        self.cores[core].l1d.latency()
    }

    fn miss_latency_below_l1(&self, line: u64) -> (u64, Level) {
        if self.l2.contains(line) {
            (self.l2.latency(), Level::L2)
        } else {
            (self.l2.latency() + self.memory_latency, Level::Memory)
        }
    }

    fn l2_fill_clean(&mut self, line: u64) {
        if !self.l2.touch(line) {
            self.l2.install(line, LineState::Shared);
        }
    }

    fn remote_writable(&self, core: usize, line: u64) -> Option<usize> {
        (0..self.cores.len()).find(|&r| r != core && self.cores[r].l1d.state(line).is_some_and(LineState::writable))
    }

    /// Installs `line` into a core's L1D, keeping ghost exclusivity and
    /// writing a dirty victim back to the L2.
    fn install_l1d(&mut self, core: usize, line: u64, state: LineState) {
        self.cores[core].dghost.invalidate(line);
        if let Some(victim) = self.cores[core].l1d.install(line, state) {
            if victim.state == LineState::Modified {
                self.l2.install(victim.line, LineState::Modified);
            }
        }
    }

    /// Coherent read acquisition: downgrades remote writable copies.
    fn acquire_shared(&mut self, core: usize, line: u64) {
        let mut shared = false;
        for r in 0..self.cores.len() {
            if r == core {
                continue;
            }
            match self.cores[r].l1d.state(line) {
                Some(LineState::Modified) => {
                    self.cores[r].l1d.set_state(line, LineState::Shared);
                    self.l2.install(line, LineState::Modified);
                    shared = true;
                }
                Some(_) => {
                    self.cores[r].l1d.set_state(line, LineState::Shared);
                    shared = true;
                }
                None => {}
            }
        }
        let state = if shared { LineState::Shared } else { LineState::Exclusive };
        if state.writable() {
            self.invalidate_remote_ghosts(core, line);
        }
        if self.cores[core].l1d.contains(line) {
            self.cores[core].l1d.touch(line);
        } else {
            self.install_l1d(core, line, state);
        }
    }

    fn invalidate_remote_ghosts(&mut self, core: usize, line: u64) {
        for r in 0..self.cores.len() {
            if r != core {
                self.cores[r].dghost.invalidate(line);
            }
        }
    }

    /// Lands prefetches, asynchronous reloads and orphaned instruction fills
    /// due this cycle.
    pub fn begin_cycle(&mut self, now: u64) {
        let due: Vec<Scheduled> = {
            let (due, rest): (Vec<_>, Vec<_>) = self.scheduled.drain(..).partition(|s| s.at <= now);
            self.scheduled = rest;
            due
        };
        for s in due {
            match s.target {
                FillTarget::L2 => self.l2_fill_clean(s.line),
                FillTarget::L1(core) => {
                    if s.from_memory {
                        self.l2_fill_clean(s.line);
                    }
                    if !self.cores[core].l1d.contains(s.line) {
                        self.acquire_shared(core, s.line);
                    }
                }
            }
        }
        let (due, rest): (Vec<_>, Vec<_>) = self.ifills.drain(..).partition(|f| f.at <= now);
        self.ifills = rest;
        for f in due {
            self.land_ifill(f);
        }
    }

    // ----- data side -----

    /// Presents a load to the L1D (and its ghost) at cycle `now`.
    pub fn load_access(
        &mut self,
        core: usize,
        inst: u64,
        ts: Timestamp,
        addr: u64,
        nonspec: bool,
        now: u64,
    ) -> LoadAccess {
        let line = self.line_of(addr);
        let lat = self.l1_latency(core);
        let minion = self.minion;
        let cm = &mut self.cores[core];
        if cm.l1d.contains(line) {
            if !minion {
                cm.l1d.touch(line);
            }
            return LoadAccess::Hit { ready_at: now + lat, origin: Level::L1, noncoherent: false };
        }
        if minion {
            if let GhostLookup::Hit { origin, noncoherent, .. } = cm.dghost.lookup(line, ts) {
                return LoadAccess::Hit { ready_at: now + lat, origin, noncoherent };
            }
        }
        let target = Target { inst, ts };
        let fresh = L1Miss { phase: Phase::AwaitL2 { at: now + lat }, nonspec };
        match cm.l1_mshrs.allocate(line, target, || fresh) {
            Allocation::Granted(_) => LoadAccess::Pending { retry: Vec::new() },
            Allocation::Merged(slot) => {
                if nonspec {
                    if let Some(e) = cm.l1_mshrs.get_mut(slot) {
                        e.payload.nonspec = true;
                    }
                }
                LoadAccess::Pending { retry: Vec::new() }
            }
            Allocation::Timeleaped(slot) => {
                let e = cm.l1_mshrs.get_mut(slot).expect("timeleaped slot");
                let held = match e.payload.phase {
                    Phase::Filling { l2_slot, .. } => l2_slot,
                    _ => None,
                };
                e.payload.phase = Phase::AwaitL2 { at: now + lat };
                e.payload.nonspec |= nonspec;
                if let Some(s) = held {
                    cm.l2_mshrs.release(s);
                }
                LoadAccess::Pending { retry: Vec::new() }
            }
            Allocation::Leapfrogged { victim, .. } => {
                if let Phase::Filling { l2_slot: Some(s), .. } = victim.payload.phase {
                    cm.l2_mshrs.release(s);
                }
                LoadAccess::Pending { retry: victim.targets.iter().map(|t| t.inst).collect() }
            }
            Allocation::Retry => LoadAccess::Retry,
        }
    }

    /// Completes fills due this cycle, in timestamp order.
    pub fn complete_loads(&mut self, core: usize, now: u64) -> Vec<LoadDone> {
        let mut due: Vec<(usize, Timestamp)> = self.cores[core]
            .l1_mshrs
            .entries()
            .filter(|(_, e)| matches!(e.payload.phase, Phase::Filling { ready_at, .. } if ready_at <= now))
            .map(|(i, e)| (i, e.ts))
            .collect();
        due.sort_by(cmp_ts(self.window));
        let mut done = Vec::new();
        for (slot, _) in due {
            let entry = self.cores[core].l1_mshrs.release(slot).expect("due entry");
            let Phase::Filling { origin, noncoherent, l2_slot, .. } = entry.payload.phase else { unreachable!() };
            if let Some(s) = l2_slot {
                self.cores[core].l2_mshrs.release(s);
            }
            let line = entry.line;
            let mut noncoherent = noncoherent;
            if self.minion && !entry.payload.nonspec {
                if !self.cores[core].l1d.contains(line) {
                    noncoherent |= self.remote_writable(core, line).is_some();
                    let owner = entry.targets.first().map_or(0, |t| t.inst);
                    self.cores[core].dghost.fill(Fill { line, ts: entry.ts, owner, origin, noncoherent });
                }
            } else {
                if origin == Level::Memory {
                    self.l2_fill_clean(line);
                }
                self.acquire_shared(core, line);
                noncoherent = false;
            }
            done.extend(entry.targets.iter().map(|t| LoadDone { inst: t.inst, origin, noncoherent }));
        }
        done
    }

    /// Moves L1 misses on to the L2, oldest first. `head` is the
    /// instruction at the ROB head, which is non-speculative.
    pub fn advance_misses(&mut self, core: usize, now: u64, head: Option<u64>) {
        let mut ready: Vec<(usize, Timestamp)> = self.cores[core]
            .l1_mshrs
            .entries()
            .filter(|(_, e)| match e.payload.phase {
                Phase::AwaitL2 { at } => at <= now,
                Phase::Deferred => true,
                Phase::Filling { .. } => false,
            })
            .map(|(i, e)| (i, e.ts))
            .collect();
        ready.sort_by(cmp_ts(self.window));
        let l2_lat = self.l2.latency();
        for (slot, ts) in ready {
            let (line, nonspec) = {
                let e = self.cores[core].l1_mshrs.get(slot).expect("ready entry");
                (e.line, e.payload.nonspec || e.targets.iter().any(|t| Some(t.inst) == head))
            };
            let phase = if self.coherence && self.remote_writable(core, line).is_some() {
                let speculative_copy = self.minion && !nonspec;
                if speculative_copy && self.policy == CoherencePolicy::Forward {
                    Phase::Filling { ready_at: now + l2_lat, origin: Level::L2, noncoherent: true, l2_slot: None }
                } else if speculative_copy {
                    Phase::Deferred
                } else {
                    // downgrade happens now; the data arrives through the L2
                    for r in 0..self.cores.len() {
                        if r != core && self.cores[r].l1d.state(line).is_some_and(LineState::writable) {
                            if self.cores[r].l1d.state(line) == Some(LineState::Modified) {
                                self.l2.install(line, LineState::Modified);
                            }
                            self.cores[r].l1d.set_state(line, LineState::Shared);
                        }
                    }
                    Phase::Filling { ready_at: now + l2_lat, origin: Level::L2, noncoherent: false, l2_slot: None }
                }
            } else if self.l2.contains(line) {
                if !self.minion || nonspec {
                    self.l2.touch(line);
                }
                Phase::Filling { ready_at: now + l2_lat, origin: Level::L2, noncoherent: false, l2_slot: None }
            } else {
                let cm = &mut self.cores[core];
                match cm.l2_mshrs.allocate(line, Target { inst: slot as u64, ts }, || L2Miss { l1_slot: slot }) {
                    Allocation::Granted(s) | Allocation::Merged(s) | Allocation::Timeleaped(s) => Phase::Filling {
                        ready_at: now + l2_lat + self.memory_latency,
                        origin: Level::Memory,
                        noncoherent: false,
                        l2_slot: Some(s),
                    },
                    Allocation::Leapfrogged { slot: s, victim } => {
                        if let Some(v) = cm.l1_mshrs.get_mut(victim.payload.l1_slot) {
                            v.payload.phase = Phase::AwaitL2 { at: now + 1 };
                        }
                        Phase::Filling {
                            ready_at: now + l2_lat + self.memory_latency,
                            origin: Level::Memory,
                            noncoherent: false,
                            l2_slot: Some(s),
                        }
                    }
                    Allocation::Retry => Phase::AwaitL2 { at: now + 1 },
                }
            };
            let cm = &mut self.cores[core];
            if let Some(e) = cm.l1_mshrs.get_mut(slot) {
                e.payload.nonspec = nonspec;
                e.payload.phase = phase;
            }
        }
    }

    /// Squash of everything younger than `ts` on `core`'s data side.
    pub fn squash_data(&mut self, core: usize, ts: Timestamp) {
        let minion = self.minion;
        let cm = &mut self.cores[core];
        for (_, e) in cm.l1_mshrs.squash_after(ts, minion) {
            if let Phase::Filling { l2_slot: Some(s), .. } = e.payload.phase {
                cm.l2_mshrs.release(s);
            }
        }
        if minion {
            cm.dghost.flush_after(ts);
        }
    }

    /// Drops one instruction's interest in any outstanding miss.
    pub fn forget_load(&mut self, core: usize, inst: u64) {
        self.cores[core].l1_mshrs.remove_target(inst);
    }

    /// Commit-time bookkeeping for a load that read the hierarchy.
    pub fn commit_load(&mut self, core: usize, pc: u64, addr: u64, ts: Timestamp, origin: Level, now: u64) {
        let line = self.line_of(addr);
        if self.minion {
            if self.cores[core].l1d.contains(line) {
                self.cores[core].l1d.touch(line);
            } else if let Some(g) = self.cores[core].dghost.commit_extract(line, ts) {
                if g.origin == Level::Memory {
                    self.l2_fill_clean(line);
                } else if g.origin == Level::L2 {
                    self.l2.touch(line);
                }
                self.acquire_shared(core, line);
            } else if self.async_reload {
                let (lat, from) = self.miss_latency_below_l1(line);
                self.counters.async_reloads += 1;
                self.scheduled.push(Scheduled {
                    at: now + lat,
                    line,
                    target: FillTarget::L1(core),
                    from_memory: from == Level::Memory,
                });
            }
        }
        self.train_prefetchers(core, pc, addr, origin, now);
    }

    fn train_prefetchers(&mut self, core: usize, pc: u64, addr: u64, origin: Level, now: u64) {
        if let Some(p) = self.cores[core].l1_prefetch.as_mut() {
            if let Some(next) = p.train(pc, addr) {
                let line = self.line_of(self.canonical(next));
                if !self.cores[core].l1d.contains(line) {
                    let (lat, from) = self.miss_latency_below_l1(line);
                    self.counters.prefetches_issued += 1;
                    self.scheduled.push(Scheduled {
                        at: now + lat,
                        line,
                        target: FillTarget::L1(core),
                        from_memory: from == Level::Memory,
                    });
                }
            }
        }
        if origin >= Level::L2 {
            if let Some(p) = self.l2_prefetch.as_mut() {
                if let Some(next) = p.train(pc, addr) {
                    let line = self.line_of(self.canonical(next));
                    if !self.l2.contains(line) {
                        self.counters.prefetches_issued += 1;
                        self.scheduled.push(Scheduled {
                            at: now + self.memory_latency,
                            line,
                            target: FillTarget::L2,
                            from_memory: true,
                        });
                    }
                }
            }
        }
    }

    /// Cycles a committing store must wait before it may write.
    pub fn store_latency(&self, core: usize, addr: u64) -> u64 {
        let line = self.line_of(addr);
        match self.cores[core].l1d.state(line) {
            Some(s) if s.writable() => 0,
            Some(_) => self.l2.latency(),
            None => self.l1_latency(core) + self.miss_latency_below_l1(line).0,
        }
    }

    /// Performs a committed store: takes the line Modified, invalidating
    /// every other copy, then writes memory.
    pub fn commit_store(&mut self, core: usize, addr: u64, value: u64) {
        let line = self.line_of(addr);
        if !self.l2.contains(line) && !self.cores[core].l1d.contains(line) {
            self.l2_fill_clean(line);
        }
        for r in 0..self.cores.len() {
            if r != core {
                if self.cores[r].l1d.invalidate(line) == Some(LineState::Modified) {
                    self.l2.install(line, LineState::Modified);
                }
                self.cores[r].dghost.invalidate(line);
            }
        }
        if self.cores[core].l1d.contains(line) {
            self.cores[core].l1d.set_state(line, LineState::Modified);
            self.cores[core].l1d.touch(line);
            self.cores[core].dghost.invalidate(line);
        } else {
            self.install_l1d(core, line, LineState::Modified);
        }
        self.write_word(addr, value);
    }

    pub fn replay_latency(&self, core: usize) -> u64 {
        self.l1_latency(core) + self.l2.latency()
    }

    /// Non-speculative re-read of a load that consumed a noncoherent copy.
    pub fn replay_load(&mut self, core: usize, addr: u64) -> u64 {
        self.counters.replays += 1;
        let line = self.line_of(addr);
        self.acquire_shared(core, line);
        self.read_word(addr)
    }

    // ----- instruction side -----

    pub fn ifetch(&mut self, core: usize, line: u64, ts: Timestamp, now: u64) -> IFetch {
        let iminion = self.iminion;
        let cm = &mut self.cores[core];
        if cm.l1i.contains(line) {
            if !iminion {
                cm.l1i.touch(line);
            }
            return IFetch::Hit;
        }
        if iminion && matches!(cm.ighost.lookup(line, ts), GhostLookup::Hit { .. }) {
            return IFetch::Hit;
        }
        let l1i_lat = cm.l1i.latency();
        let (lat, origin) = self.miss_latency_below_l1(line);
        let ready_at = now + l1i_lat + lat;
        self.ifills.push(PendingIFill { core, line, ts, at: ready_at, origin });
        IFetch::Miss { ready_at }
    }

    fn land_ifill(&mut self, f: PendingIFill) {
        if self.iminion {
            if !self.cores[f.core].l1i.contains(f.line) {
                self.cores[f.core].ighost.fill(Fill {
                    line: f.line,
                    ts: f.ts,
                    owner: 0,
                    origin: f.origin,
                    noncoherent: false,
                });
            }
        } else {
            if f.origin == Level::Memory {
                self.l2_fill_clean(f.line);
            }
            self.cores[f.core].l1i.install(f.line, LineState::Shared);
        }
    }

    /// Squash on the fetch side. With an instruction ghost, in-flight
    /// fetches for the squashed path are dropped; without one they still land.
    pub fn squash_fetch(&mut self, core: usize, ts: Timestamp) {
        if self.iminion {
            self.ifills.retain(|f| f.core != core);
            self.cores[core].ighost.flush_after(ts);
        }
    }

    pub fn commit_fetch(&mut self, core: usize, line: u64, ts: Timestamp) {
        if !self.iminion {
            return;
        }
        if self.cores[core].l1i.contains(line) {
            self.cores[core].l1i.touch(line);
        } else if let Some(g) = self.cores[core].ighost.commit_extract(line, ts) {
            if g.origin == Level::Memory {
                self.l2_fill_clean(line);
            }
            self.cores[core].l1i.install(line, LineState::Shared);
        }
    }

    // ----- checks and reporting -----

    /// Single-writer and stale-ghost invariants across cores.
    pub fn check_directory(&mut self, cycle: u64) -> Result<(), CoherenceViolation> {
        self.counters.directory_checks += 1;
        for (c, cm) in self.cores.iter().enumerate() {
            for (_, line, state, _) in cm.l1d.snapshot() {
                if !state.writable() {
                    continue;
                }
                for (r, other) in self.cores.iter().enumerate() {
                    if r == c {
                        continue;
                    }
                    if other.l1d.contains(line) {
                        return Err(CoherenceViolation::MultipleOwners { cycle, line, owner: c, other: r });
                    }
                    if other.dghost.probe(line).is_some_and(|g| !g.noncoherent) {
                        return Err(CoherenceViolation::StaleGhost { cycle, line, core: r, owner: c });
                    }
                }
            }
        }
        Ok(())
    }

    /// Exclusivity between each ghost and its L1.
    pub fn check_exclusivity(&self) -> bool {
        self.cores.iter().all(|cm| {
            cm.dghost.valid_lines().all(|g| !cm.l1d.contains(g.line))
                && cm.ighost.valid_lines().all(|g| !cm.l1i.contains(g.line))
        })
    }

    pub fn nonspec_state(&self) -> NonSpecState {
        NonSpecState {
            l1d: self.cores.iter().map(|c| c.l1d.snapshot()).collect(),
            l1i: self.cores.iter().map(|c| c.l1i.snapshot()).collect(),
            l2: self.l2.snapshot(),
            prefetchers: self
                .cores
                .iter()
                .filter_map(|c| c.l1_prefetch.as_ref().map(StridePrefetcher::snapshot))
                .chain(self.l2_prefetch.as_ref().map(StridePrefetcher::snapshot))
                .collect(),
        }
    }

    pub fn ghost_occupancy(&self, core: usize) -> usize {
        self.cores[core].dghost.occupancy()
    }

    pub fn l1d_contains(&self, core: usize, addr: u64) -> bool {
        self.cores[core].l1d.contains(self.line_of(addr))
    }

    pub fn l1d_state(&self, core: usize, addr: u64) -> Option<LineState> {
        self.cores[core].l1d.state(self.line_of(addr))
    }

    pub fn l1i_contains(&self, core: usize, line: u64) -> bool {
        self.cores[core].l1i.contains(line)
    }

    /// Counters including those kept by the ghosts and MSHR files.
    pub fn totals(&self) -> MemCounters {
        let mut t = self.counters;
        for cm in &self.cores {
            for g in [&cm.dghost, &cm.ighost] {
                t.timeguard_blocks += g.counters.timeguard_blocks;
                t.fills_rejected += g.counters.fills_rejected;
                t.flushes += g.counters.flush_count;
                t.lines_extracted += g.counters.lines_extracted;
                t.lines_flushed += g.counters.lines_flushed;
            }
            for c in [cm.l1_mshrs.counters, cm.l2_mshrs.counters] {
                t.leapfrogs += c.leapfrogs;
                t.timeleaps += c.timeleaps;
                t.retries += c.retries;
            }
        }
        t
    }
}

/// Window for data-side timestamps (ROB order).
pub fn rob_window(cfg: &RunConfig) -> TimestampWindow {
    let w = TimestampWindow::for_capacity(cfg.core.rob_size as u32);
    if cfg.features.unbounded_timestamps {
        w.unbounded()
    } else {
        w
    }
}

/// Window for fetch-order timestamps (fetch queue plus ROB).
pub fn fetch_window(cfg: &RunConfig) -> TimestampWindow {
    let w = TimestampWindow::for_capacity((cfg.core.rob_size + cfg.core.fetch_queue) as u32);
    if cfg.features.unbounded_timestamps {
        w.unbounded()
    } else {
        w
    }
}
