//! One out-of-order core: fetch, rename, issue, memory, writeback and
//! commit over a reorder buffer, advanced one cycle at a time.
//!
//! Stage order within a cycle is commit, writeback (branch resolution),
//! memory, issue, rename, fetch. An instruction issued at cycle `i` with
//! latency `l` completes at `i + l`; dependents may issue in that cycle and
//! the instruction may commit from `i + l + 1`.

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::cache::Level;
use crate::config::RunConfig;
use crate::isa::{CoreProgram, Insn, Kind, Operand, Reg, INSN_BYTES, NUM_REGS};
use crate::memsys::{fetch_window, rob_window, IFetch, LoadAccess, MemSystem};
use crate::order::{Timestamp, TimestampAllocator};
use crate::predictor::Predictor;
use crate::timeline::TimelineEntry;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreStats {
    pub committed: u64,
    pub squashes: u64,
    pub mispredicts: u64,
    pub replay_squashes: u64,
    pub nops_inserted: u64,
    /// Squashed loads that had already accessed memory.
    pub squashed_loads: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Src {
    Ready(u64),
    /// Produced by the ROB entry with this sequence number (register kept
    /// for when the producer has already committed).
    Wait(u64, Reg),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MemState {
    None,
    Queued,
    Waiting,
    Done,
}

#[derive(Clone, Debug)]
struct Entry {
    seq: u64,
    pc: usize,
    insn: Insn,
    ts: Timestamp,
    fetch_ts: Timestamp,
    fetch_cycle: u64,
    rename_cycle: u64,
    issue: Option<u64>,
    complete_at: Option<u64>,
    srcs: [Option<Src>; 2],
    result: Option<u64>,
    predicted_next: usize,
    actual_next: Option<usize>,
    addr: Option<u64>,
    store_value: u64,
    mem: MemState,
    origin: Option<Level>,
    noncoherent: bool,
    nop: bool,
    caused_squash: bool,
    store_ready_at: Option<u64>,
    replay_ready_at: Option<u64>,
}

#[derive(Clone, Copy, Debug)]
struct Fetched {
    pc: usize,
    insn: Insn,
    predicted_next: usize,
    cycle: u64,
    ts: Timestamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Block {
    Serialize,
    Halt,
}

#[derive(Clone, Debug)]
struct FetchUnit {
    pc: usize,
    resume_at: u64,
    blocked: Option<Block>,
    line: Option<u64>,
    waiting: Option<(u64, u64)>,
}

#[derive(Clone, Copy, Debug)]
struct Params {
    width: usize,
    rob_size: usize,
    fetch_queue: usize,
    mem_ports: usize,
    alu_units: usize,
    mul_units: usize,
    alu_latency: u64,
    mul_latency: u64,
    div_latency: u64,
    squash_penalty: u64,
    ordered_div: bool,
    code_base: u64,
    line_bytes: u64,
}

/// Commit indices (per core) whose instruction squashed younger work.
pub type Triggers = HashSet<u64>;

#[derive(Clone, Debug)]
pub struct Core {
    id: usize,
    program: Vec<Insn>,
    p: Params,
    regs: [u64; NUM_REGS],
    map: [Option<u64>; NUM_REGS],
    rob: VecDeque<Entry>,
    next_seq: u64,
    ts_alloc: TimestampAllocator,
    fetch_alloc: TimestampAllocator,
    fetch: FetchUnit,
    fq: VecDeque<Fetched>,
    predictor: Predictor,
    div_units: Vec<(u64, u64)>,
    halted: bool,
    ablate: Option<Triggers>,
    nop_trigger: Option<u64>,
    triggers: Vec<u64>,
    pub stats: CoreStats,
}

impl Core {
    pub fn new(id: usize, program: &CoreProgram, cfg: &RunConfig, ablate: Option<Triggers>) -> Self {
        let c = &cfg.core;
        let p = Params {
            width: c.width,
            rob_size: c.rob_size,
            fetch_queue: c.fetch_queue,
            mem_ports: c.mem_ports,
            alu_units: c.alu_units,
            mul_units: c.mul_units,
            alu_latency: c.alu_latency,
            mul_latency: c.mul_latency,
            div_latency: c.div_latency,
            squash_penalty: c.squash_penalty,
            ordered_div: cfg.ordered_nonpipelined(),
            code_base: cfg.mem_bytes * (1 + id as u64),
            line_bytes: cfg.line_bytes as u64,
        };
        Self {
            id,
            program: program.insns.clone(),
            p,
            regs: [0; NUM_REGS],
            map: [None; NUM_REGS],
            rob: VecDeque::with_capacity(c.rob_size),
            next_seq: 0,
            ts_alloc: TimestampAllocator::new(rob_window(cfg)),
            fetch_alloc: TimestampAllocator::new(fetch_window(cfg)),
            fetch: FetchUnit { pc: 0, resume_at: 0, blocked: None, line: None, waiting: None },
            fq: VecDeque::with_capacity(c.fetch_queue),
            predictor: Predictor::new(c.predictor_entries, c.btb_entries),
            div_units: vec![(0, u64::MAX); c.div_units],
            halted: program.is_empty(),
            ablate,
            nop_trigger: None,
            triggers: Vec::new(),
            stats: CoreStats::default(),
        }
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    pub fn regs(&self) -> &[u64; NUM_REGS] {
        &self.regs
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    /// Commit indices of committed instructions that caused a squash.
    pub fn triggers(&self) -> &[u64] {
        &self.triggers
    }

    fn code_line(&self, pc: usize) -> u64 {
        self.p.code_base.wrapping_add((pc as u64).wrapping_mul(INSN_BYTES)) / self.p.line_bytes
    }

    fn insn_at(&self, pc: usize) -> Insn {
        self.program.get(pc).copied().unwrap_or_else(Insn::halt)
    }

    fn index_of(&self, seq: u64) -> Option<usize> {
        let first = self.rob.front()?.seq;
        if seq < first {
            return None;
        }
        self.rob.binary_search_by_key(&seq, |e| e.seq).ok()
    }

    fn operand(&self, src: Option<Src>, now: u64) -> Option<u64> {
        match src {
            None => Some(0),
            Some(Src::Ready(v)) => Some(v),
            Some(Src::Wait(seq, reg)) => match self.index_of(seq) {
                Some(i) => {
                    let e = &self.rob[i];
                    e.complete_at.filter(|&c| c <= now).map(|_| e.result.unwrap_or(0))
                }
                None => Some(self.regs[reg.index()]),
            },
        }
    }

    /// Advances this core by one cycle.
    pub fn step(&mut self, now: u64, mem: &mut MemSystem, out: &mut Vec<TimelineEntry>) {
        if self.halted {
            return;
        }
        self.commit(now, mem, out);
        if self.halted {
            return;
        }
        self.writeback(now, mem);
        self.memory(now, mem);
        self.issue(now, mem);
        self.rename(now);
        self.fetch(now, mem);
    }

    // ----- commit -----

    fn commit(&mut self, now: u64, mem: &mut MemSystem, out: &mut Vec<TimelineEntry>) {
        for _ in 0..self.p.width {
            let Some(head) = self.rob.front() else { break };
            if head.complete_at.is_none_or(|c| c >= now) {
                break;
            }
            let kind = head.insn.kind;
            if head.nop {
                // only reachable when an ablated run diverges; commit as-is
            } else if kind == Kind::Store {
                let addr = head.addr.expect("issued store has an address");
                match head.store_ready_at {
                    None => {
                        let lat = mem.store_latency(self.id, addr);
                        if lat > 0 {
                            self.rob[0].store_ready_at = Some(now + lat);
                            break;
                        }
                    }
                    Some(at) if now < at => break,
                    Some(_) => {}
                }
                let value = self.rob[0].store_value;
                mem.commit_store(self.id, addr, value);
            } else if kind == Kind::Load && self.rob[0].noncoherent {
                match head.replay_ready_at {
                    None => {
                        self.rob[0].replay_ready_at = Some(now + mem.replay_latency(self.id));
                        break;
                    }
                    Some(at) if now < at => break,
                    Some(_) => {}
                }
                let addr = head.addr.expect("load has an address");
                let fresh = mem.replay_load(self.id, addr);
                let e = &mut self.rob[0];
                e.noncoherent = false;
                if e.result != Some(fresh) {
                    e.result = Some(fresh);
                    e.caused_squash = true;
                    let next = e.pc + 1;
                    self.stats.replay_squashes += 1;
                    self.squash_after(0, next, now, mem);
                }
            } else if kind == Kind::Load {
                let e = &self.rob[0];
                if let Some(origin) = e.origin {
                    let pc_addr = self.p.code_base + e.pc as u64 * INSN_BYTES;
                    mem.commit_load(self.id, pc_addr, e.addr.expect("load address"), e.ts, origin, now);
                }
            }
            let e = self.rob.pop_front().expect("head exists");
            if !e.nop {
                match e.insn.kind {
                    Kind::Branch(_) => self.predictor.train_branch(e.pc, e.actual_next != Some(e.pc + 1)),
                    Kind::JmpReg => {
                        if let Some(t) = e.actual_next {
                            self.predictor.train_target(e.pc, t);
                        }
                    }
                    _ => {}
                }
            }
            mem.commit_fetch(self.id, self.code_line(e.pc), e.fetch_ts);
            if let Some(r) = e.insn.writes() {
                self.regs[r.index()] = e.result.unwrap_or(0);
                if self.map[r.index()] == Some(e.seq) {
                    self.map[r.index()] = None;
                }
            }
            self.ts_alloc.release_oldest();
            self.fetch_alloc.release_oldest();
            let id = self.stats.committed;
            if e.caused_squash {
                self.triggers.push(id);
            }
            out.push(TimelineEntry {
                core: self.id,
                id,
                pc: e.pc,
                opcode: e.insn.opcode(),
                fetch: e.fetch_cycle,
                rename: e.rename_cycle,
                issue: e.issue,
                complete: e.complete_at.expect("committed entry completed"),
                commit: now,
                result: e.insn.writes().map(|_| e.result.unwrap_or(0)),
            });
            self.stats.committed += 1;
            match e.insn.kind {
                Kind::Halt => {
                    self.halted = true;
                    return;
                }
                Kind::Rdcycle | Kind::Fence if self.fetch.blocked == Some(Block::Serialize) => {
                    self.fetch.blocked = None;
                }
                _ => {}
            }
            if e.caused_squash && e.insn.kind == Kind::Load {
                // younger work was just discarded; nothing else to retire
                break;
            }
        }
    }

    // ----- squash -----

    /// Discards every entry after ROB index `keep` and refetches at `pc`.
    fn squash_after(&mut self, keep: usize, pc: usize, now: u64, mem: &mut MemSystem) {
        let (ts, fts, _seq) = {
            let k = &self.rob[keep];
            (k.ts, k.fetch_ts, k.seq)
        };
        let removed: Vec<Entry> = self.rob.drain(keep + 1..).collect();
        let squashed: HashSet<u64> = removed.iter().map(|e| e.seq).collect();
        self.stats.squashed_loads +=
            removed.iter().filter(|e| e.insn.kind == Kind::Load && e.mem != MemState::None).count() as u64;
        if self.p.ordered_div {
            for unit in &mut self.div_units {
                if squashed.contains(&unit.1) {
                    *unit = (0, u64::MAX);
                }
            }
        }
        if let Some(t) = self.nop_trigger {
            if squashed.contains(&t) {
                self.nop_trigger = None;
            }
        }
        self.ts_alloc.rewind_after(ts, removed.len() as u32);
        self.fetch_alloc.rewind_after(fts, (removed.len() + self.fq.len()) as u32);
        self.fq.clear();
        mem.squash_data(self.id, ts);
        mem.squash_fetch(self.id, fts);
        self.map = [None; NUM_REGS];
        for e in &self.rob {
            if let Some(r) = e.insn.writes() {
                self.map[r.index()] = Some(e.seq);
            }
        }
        self.fetch = FetchUnit { pc, resume_at: now + self.p.squash_penalty, blocked: None, line: None, waiting: None };
        self.stats.squashes += 1;
    }

    // ----- writeback -----

    fn writeback(&mut self, now: u64, mem: &mut MemSystem) {
        let mut i = 0;
        while i < self.rob.len() {
            let e = &self.rob[i];
            let resolves = !e.nop
                && e.complete_at == Some(now)
                && matches!(e.insn.kind, Kind::Branch(_) | Kind::JmpReg | Kind::Jmp);
            if resolves {
                let seq = e.seq;
                let actual = e.actual_next.expect("resolved control flow has a target");
                let mispredicted = actual != e.predicted_next;
                if self.nop_trigger == Some(seq) {
                    self.nop_trigger = None;
                }
                if mispredicted {
                    self.rob[i].caused_squash = true;
                    self.stats.mispredicts += 1;
                    self.squash_after(i, actual, now, mem);
                    break;
                }
            }
            i += 1;
        }
    }

    // ----- memory -----

    fn memory(&mut self, now: u64, mem: &mut MemSystem) {
        for d in mem.complete_loads(self.id, now) {
            if let Some(i) = self.index_of(d.inst) {
                let addr = self.rob[i].addr.expect("load address");
                let value = mem.read_word(addr);
                let e = &mut self.rob[i];
                if e.mem == MemState::Waiting {
                    e.mem = MemState::Done;
                    e.complete_at = Some(now);
                    e.result = Some(value);
                    e.origin = Some(d.origin);
                    e.noncoherent = d.noncoherent;
                }
            }
        }
        let head = self.rob.front().map(|e| e.seq);
        mem.advance_misses(self.id, now, head);

        let mut ports = self.p.mem_ports;
        let mut i = 0;
        while i < self.rob.len() && ports > 0 {
            let e = &self.rob[i];
            if e.mem != MemState::Queued || e.issue.is_none_or(|c| c >= now) {
                i += 1;
                continue;
            }
            ports -= 1;
            let (seq, ts, addr) = (e.seq, e.ts, e.addr.expect("queued load has an address"));
            match mem.load_access(self.id, seq, ts, addr, i == 0, now) {
                LoadAccess::Hit { ready_at, origin, noncoherent } => {
                    let value = mem.read_word(addr);
                    let e = &mut self.rob[i];
                    e.mem = MemState::Done;
                    e.complete_at = Some(ready_at);
                    e.result = Some(value);
                    e.origin = Some(origin);
                    e.noncoherent = noncoherent;
                }
                LoadAccess::Pending { retry } => {
                    self.rob[i].mem = MemState::Waiting;
                    for r in retry {
                        if let Some(j) = self.index_of(r) {
                            if self.rob[j].mem == MemState::Waiting {
                                self.rob[j].mem = MemState::Queued;
                            }
                        }
                    }
                }
                LoadAccess::Retry => {}
            }
            i += 1;
        }
    }

    // ----- issue -----

    fn issue(&mut self, now: u64, mem: &MemSystem) {
        let mut budget = self.p.width;
        let mut alu = self.p.alu_units;
        let mut mul = self.p.mul_units;
        let mut older_div_waiting = false;
        let mut older_store_waiting = false;
        let end = self.program.len();
        for i in 0..self.rob.len() {
            if budget == 0 {
                break;
            }
            let e = &self.rob[i];
            if e.nop || e.issue.is_some() || e.insn.kind == Kind::Halt {
                continue;
            }
            let kind = e.insn.kind;
            let a = self.operand(e.srcs[0], now);
            let b = self.operand(e.srcs[1], now);
            let ready = a.is_some() && b.is_some();
            let is_div = matches!(kind, Kind::Div | Kind::Rem);
            let can = ready
                && match kind {
                    Kind::Rdcycle | Kind::Fence => i == 0,
                    Kind::Div | Kind::Rem => {
                        !(self.p.ordered_div && older_div_waiting) && self.div_units.iter().any(|u| u.0 <= now)
                    }
                    Kind::Mul => mul > 0,
                    Kind::Load => !older_store_waiting,
                    Kind::Store => true,
                    _ => alu > 0,
                };
            if !can {
                older_div_waiting |= is_div;
                older_store_waiting |= kind == Kind::Store;
                continue;
            }
            let (a, b) = (a.unwrap_or(0), b.unwrap_or(0));
            budget -= 1;
            let imm = e.insn.imm();
            let seq = e.seq;
            let pc = e.pc;
            let target = e.insn.target;
            let mut forwarded = None;
            if kind == Kind::Load {
                let addr = mem.canonical(a.wrapping_add(imm as u64));
                forwarded = self
                    .rob
                    .iter()
                    .take(i)
                    .rev()
                    .find(|s| s.insn.kind == Kind::Store && !s.nop && s.addr == Some(addr))
                    .map(|s| s.store_value);
                self.rob[i].addr = Some(addr);
            }
            let p = self.p;
            let e = &mut self.rob[i];
            e.issue = Some(now);
            match kind {
                Kind::Alu(f) => {
                    alu -= 1;
                    let rhs = match e.insn.src2 {
                        Some(Operand::Imm(v)) => v as u64,
                        _ => b,
                    };
                    e.result = Some(f.eval(a, rhs));
                    e.complete_at = Some(now + p.alu_latency);
                }
                Kind::Mul => {
                    mul -= 1;
                    let rhs = if let Some(Operand::Imm(v)) = e.insn.src2 { v as u64 } else { b };
                    e.result = Some(a.wrapping_mul(rhs));
                    e.complete_at = Some(now + p.mul_latency);
                }
                Kind::Div | Kind::Rem => {
                    let rhs = if let Some(Operand::Imm(v)) = e.insn.src2 { v as u64 } else { b };
                    e.result = Some(match (kind, rhs) {
                        (Kind::Div, 0) => u64::MAX,
                        (Kind::Div, d) => a / d,
                        (_, 0) => a,
                        (_, d) => a % d,
                    });
                    e.complete_at = Some(now + p.div_latency);
                    let unit = self.div_units.iter_mut().find(|u| u.0 <= now).expect("checked free unit");
                    *unit = (now + p.div_latency, seq);
                }
                Kind::Load => match forwarded {
                    Some(v) => {
                        e.result = Some(v);
                        e.complete_at = Some(now + 1);
                        e.mem = MemState::Done;
                    }
                    None => e.mem = MemState::Queued,
                },
                Kind::Store => {
                    e.addr = Some(mem.canonical(a.wrapping_add(imm as u64)));
                    e.store_value = b;
                    e.complete_at = Some(now + 1);
                }
                Kind::Branch(c) => {
                    alu -= 1;
                    let taken = c.taken(a, b);
                    e.actual_next = Some(if taken { target.expect("branch target") } else { pc + 1 });
                    e.complete_at = Some(now + p.alu_latency);
                }
                Kind::Jmp => {
                    alu -= 1;
                    e.actual_next = target;
                    e.complete_at = Some(now + p.alu_latency);
                }
                Kind::JmpReg => {
                    alu -= 1;
                    // targets past the end fetch the implicit trailing halt
                    e.actual_next = Some(usize::try_from(a).ok().filter(|&t| t <= end).unwrap_or(end));
                    e.complete_at = Some(now + p.alu_latency);
                }
                Kind::Rdcycle => {
                    e.result = Some(now);
                    e.complete_at = Some(now + 1);
                }
                Kind::Fence => e.complete_at = Some(now + 1),
                Kind::Halt => unreachable!("halt never issues"),
            }
        }
    }

    // ----- rename -----

    fn rename(&mut self, now: u64) {
        for _ in 0..self.p.width {
            if self.rob.len() >= self.p.rob_size {
                break;
            }
            let Some(f) = self.fq.front() else { break };
            if f.cycle >= now {
                break;
            }
            let f = self.fq.pop_front().expect("front exists");
            let ts = self.ts_alloc.allocate().expect("ROB occupancy bounds live timestamps");
            let seq = self.next_seq;
            self.next_seq += 1;

            let nop = self.nop_trigger.is_some();
            if !nop {
                if let Some(plan) = &self.ablate {
                    let path_index = self.stats.committed + self.rob.len() as u64;
                    if plan.contains(&path_index) {
                        self.nop_trigger = Some(seq);
                    }
                }
            } else {
                self.stats.nops_inserted += 1;
            }

            let src = |r: Option<Reg>| -> Option<Src> {
                let r = r?;
                if r == Reg::ZERO {
                    return Some(Src::Ready(0));
                }
                Some(match self.map[r.index()] {
                    Some(p) => Src::Wait(p, r),
                    None => Src::Ready(self.regs[r.index()]),
                })
            };
            let reads = f.insn.reads();
            let srcs = [src(reads[0]), src(reads[1])];
            if let Some(r) = f.insn.writes() {
                self.map[r.index()] = Some(seq);
            }
            let complete_at = (nop || f.insn.kind == Kind::Halt).then_some(now);
            self.rob.push_back(Entry {
                seq,
                pc: f.pc,
                insn: f.insn,
                ts,
                fetch_ts: f.ts,
                fetch_cycle: f.cycle,
                rename_cycle: now,
                issue: None,
                complete_at,
                srcs,
                result: None,
                predicted_next: f.predicted_next,
                actual_next: None,
                addr: None,
                store_value: 0,
                mem: MemState::None,
                origin: None,
                noncoherent: false,
                nop,
                caused_squash: false,
                store_ready_at: None,
                replay_ready_at: None,
            });
        }
    }

    // ----- fetch -----

    fn predict(&self, pc: usize, insn: &Insn) -> usize {
        match insn.kind {
            Kind::Branch(_) if self.predictor.predict_taken(pc) => insn.target.expect("branch target"),
            Kind::Jmp => insn.target.expect("jump target"),
            Kind::JmpReg => self.predictor.predict_target(pc).unwrap_or(pc + 1),
            _ => pc + 1,
        }
    }

    fn fetch(&mut self, now: u64, mem: &mut MemSystem) {
        if self.fetch.blocked.is_some() || now < self.fetch.resume_at {
            return;
        }
        if let Some((line, at)) = self.fetch.waiting {
            if now < at {
                return;
            }
            self.fetch.line = Some(line);
            self.fetch.waiting = None;
        }
        let mut delivered = 0;
        while delivered < self.p.width && self.fq.len() < self.p.fetch_queue {
            let pc = self.fetch.pc;
            let line = self.code_line(pc);
            if self.fetch.line != Some(line) {
                if delivered > 0 {
                    break;
                }
                let ts = self.fetch_alloc.peek_timestamp();
                match mem.ifetch(self.id, line, ts, now) {
                    IFetch::Hit => self.fetch.line = Some(line),
                    IFetch::Miss { ready_at } => {
                        self.fetch.waiting = Some((line, ready_at));
                        break;
                    }
                }
            }
            let insn = self.insn_at(pc);
            let ts = self.fetch_alloc.allocate().expect("fetch queue and ROB bound live fetch timestamps");
            let predicted_next = self.predict(pc, &insn);
            self.fq.push_back(Fetched { pc, insn, predicted_next, cycle: now, ts });
            delivered += 1;
            self.fetch.pc = predicted_next;
            match insn.kind {
                Kind::Rdcycle | Kind::Fence => {
                    self.fetch.blocked = Some(Block::Serialize);
                    break;
                }
                Kind::Halt => {
                    self.fetch.blocked = Some(Block::Halt);
                    break;
                }
                _ => {}
            }
            if predicted_next != pc + 1 {
                break;
            }
        }
    }
}
