//! Attack gadgets: each is a program template over a secret value, with a
//! transient transmitter and a committed receiver, plus a decoder that turns
//! the committed timeline back into a guess.
//!
//! The secret is only ever reached on a mispredicted path, so the committed
//! instruction stream is the same for every secret.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::isa::{load_program, AsmError, Opcode, Program};
use crate::timeline::CommittedTimeline;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GadgetKind {
    SpectreV1,
    SpectreRewind,
    SpeculativeInterference,
    SpectrePrime,
    Icache,
}

impl GadgetKind {
    pub const ALL: [GadgetKind; 5] = [
        GadgetKind::SpectreV1,
        GadgetKind::SpectreRewind,
        GadgetKind::SpeculativeInterference,
        GadgetKind::SpectrePrime,
        GadgetKind::Icache,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GadgetKind::SpectreV1 => "spectre_v1",
            GadgetKind::SpectreRewind => "spectre_rewind",
            GadgetKind::SpeculativeInterference => "speculative_interference",
            GadgetKind::SpectrePrime => "spectre_prime",
            GadgetKind::Icache => "icache",
        }
    }
}

/// Control variants used to check that a leak comes from the transient
/// transmitter and nothing else.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    /// No warm-up iterations, so the bounds check is never mispredicted.
    Untrained,
    /// Nothing between the bounds check and its target.
    EmptyTransient,
    /// The transient path does the same work whatever the secret.
    SecretIndependent,
    /// The interfering access is older than the victim load and commits.
    OlderInProgramOrder,
    /// The victim touches one attacker line on the committed path.
    CommittedVictimAccess,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::Untrained => "untrained",
            Variant::EmptyTransient => "empty_transient",
            Variant::SecretIndependent => "secret_independent",
            Variant::OlderInProgramOrder => "older_in_program_order",
            Variant::CommittedVictimAccess => "committed_victim_access",
        }
    }
}

pub const ARRAY1: u64 = 0x10_0000;
pub const SECRET_LINE: u64 = 0x10_1000;
/// Word holding the secret; its line neighbour at `SECRET_LINE` is public.
pub const SECRET_ADDR: u64 = SECRET_LINE + 8;
pub const SIZES: u64 = 0x20_0000;
pub const PROBE: u64 = 0x30_0000;
pub const REGION: u64 = 0x80_0000;
const ARRAY1_LEN: u64 = 8;
/// Probe slot the victim load in the interference gadget reads.
pub const INTERFERENCE_SLOT: u64 = 5;
/// Secret written into the emitted `.gasm` files.
pub const EMIT_SECRET: u64 = 5;
/// Attacker line the victim commits to in [`Variant::CommittedVictimAccess`].
pub const COMMITTED_SLOT: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Gadget {
    pub kind: GadgetKind,
    pub variant: Variant,
    pub secret_bits: u32,
    /// In-bounds warm-up iterations before the attack iteration.
    pub training: usize,
}

pub fn gadget_spectre_v1() -> Gadget {
    Gadget::new(GadgetKind::SpectreV1)
}

pub fn gadget_spectre_rewind() -> Gadget {
    Gadget::new(GadgetKind::SpectreRewind)
}

pub fn gadget_speculative_interference() -> Gadget {
    Gadget::new(GadgetKind::SpeculativeInterference)
}

pub fn gadget_spectre_prime() -> Gadget {
    Gadget::new(GadgetKind::SpectrePrime)
}

pub fn gadget_icache() -> Gadget {
    Gadget::new(GadgetKind::Icache)
}

/// The five standard gadgets.
pub fn all() -> Vec<Gadget> {
    GadgetKind::ALL.iter().map(|&k| Gadget::new(k)).collect()
}

pub fn by_name(name: &str) -> Option<Gadget> {
    GadgetKind::ALL.iter().find(|k| k.name() == name).map(|&k| Gadget::new(k))
}

/// Assembly under construction, with instruction counting for alignment
/// and marked program counters for the decoders.
#[derive(Default)]
struct Asm {
    text: String,
    count: usize,
    marks: HashMap<String, usize>,
}

impl Asm {
    fn op(&mut self, s: impl AsRef<str>) {
        writeln!(self.text, "    {}", s.as_ref()).unwrap();
        self.count += 1;
    }

    fn label(&mut self, l: impl AsRef<str>) {
        writeln!(self.text, "{}:", l.as_ref()).unwrap();
    }

    fn mark(&mut self, name: &str) {
        self.marks.insert(name.to_string(), self.count);
    }

    fn word(&mut self, addr: u64, v: u64) {
        writeln!(self.text, ".word {addr:#x} {v}").unwrap();
    }

    fn comment(&mut self, c: &str) {
        writeln!(self.text, "# {c}").unwrap();
    }

    fn core(&mut self, c: usize) {
        writeln!(self.text, ".core {c}").unwrap();
        self.count = 0;
    }

    fn align(&mut self, n: usize, filler: &str) {
        while !self.count.is_multiple_of(n) {
            self.op(filler);
        }
    }

    fn delay(&mut self, tag: &str, divs: u64) {
        self.op(format!("li r15, {divs}"));
        self.op("li r14, 1");
        self.label(format!("delay_{tag}"));
        self.op("div r14, r14, 1");
        self.op("sub r15, r15, 1");
        self.op(format!("bne r15, r0, delay_{tag}"));
    }
}

/// Hooks a gadget plugs into the shared bounds-check loop.
struct Loop<'a> {
    setup: &'a dyn Fn(&mut Asm),
    /// Before the slow size load; `r5` is the iteration.
    pre: &'a dyn Fn(&mut Asm),
    /// After the slow size load (`r2`); returns the register the bounds
    /// check compares against.
    older: &'a dyn Fn(&mut Asm) -> &'static str,
    /// After `r4 = array1[x]` on the predicted in-bounds path.
    transient: Option<&'a dyn Fn(&mut Asm)>,
}

impl Gadget {
    pub fn new(kind: GadgetKind) -> Self {
        Gadget { kind, variant: Variant::Standard, secret_bits: 4, training: 8 }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_secret_bits(mut self, bits: u32) -> Self {
        self.secret_bits = bits;
        self
    }

    /// Whether the variant changes anything for this gadget kind.
    pub fn supports(&self, variant: Variant) -> bool {
        match variant {
            Variant::OlderInProgramOrder => self.kind == GadgetKind::SpeculativeInterference,
            Variant::CommittedVictimAccess => self.kind == GadgetKind::SpectrePrime,
            _ => true,
        }
    }

    pub fn name(&self) -> String {
        match self.variant {
            Variant::Standard => self.kind.name().to_string(),
            v => format!("{}:{}", self.kind.name(), v.name()),
        }
    }

    pub fn needs_coherence(&self) -> bool {
        self.kind == GadgetKind::SpectrePrime
    }

    pub fn domain(&self) -> u64 {
        1 << self.secret_bits
    }

    pub fn secrets(&self) -> Vec<u64> {
        (0..self.domain()).collect()
    }

    pub fn secret_addr(&self) -> u64 {
        SECRET_ADDR
    }

    /// Order in which the receiver sweeps probe slots.
    pub fn sweep_order(&self) -> Vec<u64> {
        let d = self.domain();
        (0..d).map(|i| (i * 7 + 3) % d).collect()
    }

    fn training_iters(&self) -> usize {
        if self.variant == Variant::Untrained {
            0
        } else {
            self.training.min(ARRAY1_LEN as usize)
        }
    }

    pub fn render(&self, secret: u64) -> String {
        self.build(secret).text
    }

    pub fn program(&self, secret: u64, mem_bytes: u64) -> Result<Program, AsmError> {
        load_program(&self.render(secret), mem_bytes)
    }

    /// What a perfect decoder outputs for `secret` under a leaking mode.
    pub fn expected(&self, secret: u64) -> Option<u64> {
        match (self.kind, self.variant) {
            (_, Variant::Untrained | Variant::EmptyTransient | Variant::SecretIndependent) => None,
            (GadgetKind::SpectreRewind, _) => Some(secret & 1),
            (GadgetKind::SpectrePrime, Variant::CommittedVictimAccess) => Some(COMMITTED_SLOT),
            (GadgetKind::SpeculativeInterference, Variant::Standard) => {
                (secret == INTERFERENCE_SLOT).then_some(INTERFERENCE_SLOT)
            }
            (GadgetKind::SpeculativeInterference, _) => Some(INTERFERENCE_SLOT),
            _ => Some(secret),
        }
    }

    /// Program counter of a named point in the gadget (`slow_load`,
    /// `chain_end`, `victim_load`), where the gadget has one.
    pub fn mark(&self, name: &str) -> Option<usize> {
        self.build(0).marks.get(name).copied()
    }

    /// Per-iteration time from the slow load completing to the end of the
    /// committed divide chain (rewind gadget only).
    pub fn chain_durations(&self, t: &CommittedTimeline) -> Vec<i64> {
        let (Some(slow), Some(end)) = (self.mark("slow_load"), self.mark("chain_end")) else { return Vec::new() };
        if self.kind != GadgetKind::SpectreRewind {
            return Vec::new();
        }
        let slow = pcs_complete(t, slow);
        let end = pcs_complete(t, end);
        slow.iter().zip(&end).map(|(s, e)| *e as i64 - *s as i64).collect()
    }

    /// Guesses the secret from a committed timeline.
    pub fn decode(&self, t: &CommittedTimeline) -> Option<u64> {
        let d = self.domain() as usize;
        match self.kind {
            GadgetKind::SpectreV1 | GadgetKind::Icache => {
                argmin(&sweep_deltas(&t.rdcycles(0), d)).map(|k| self.sweep_order()[k])
            }
            GadgetKind::SpectrePrime => {
                let deltas = sweep_deltas(&t.rdcycles(1), d);
                let neg: Vec<i64> = deltas.iter().map(|v| -v).collect();
                argmin(&neg).map(|k| self.sweep_order()[k])
            }
            GadgetKind::SpectreRewind => {
                let durations = self.chain_durations(t);
                let (last, training) = durations.split_last()?;
                let base = training.iter().min()?;
                Some(u64::from(last > base))
            }
            GadgetKind::SpeculativeInterference => {
                let pc = self.build(0).marks["victim_load"];
                let lat: Vec<i64> = t
                    .core(0)
                    .filter(|e| e.pc == pc && e.opcode == Opcode::Load)
                    .map(|e| e.complete as i64 - e.issue.unwrap_or(e.complete) as i64)
                    .collect();
                let (last, training) = lat.split_last()?;
                let base = training.iter().min()?;
                (*last + 10 < *base).then_some(INTERFERENCE_SLOT)
            }
        }
    }

    fn build(&self, secret: u64) -> Asm {
        let mut a = Asm::default();
        a.comment(&format!("gadget {} (secret word at {SECRET_ADDR:#x})", self.name()));
        match self.kind {
            GadgetKind::SpectreV1 => self.spectre_v1(&mut a, secret),
            GadgetKind::SpectreRewind => self.spectre_rewind(&mut a, secret),
            GadgetKind::SpeculativeInterference => self.interference(&mut a, secret),
            GadgetKind::SpectrePrime => self.prime(&mut a, secret),
            GadgetKind::Icache => self.icache(&mut a, secret),
        }
        a
    }

    fn data(&self, a: &mut Asm, secret: u64) {
        let d = self.domain();
        for i in 0..ARRAY1_LEN {
            a.word(ARRAY1 + 8 * i, d);
        }
        a.word(SECRET_LINE, 0);
        a.word(SECRET_ADDR, secret & (d - 1));
        a.word(SECRET_ADDR + 8, d);
        for i in 0..=self.training_iters() as u64 + 1 {
            a.word(SIZES + i * i * 64, ARRAY1_LEN);
        }
    }

    fn bounds_loop(&self, a: &mut Asm, h: Loop<'_>) {
        let t = self.training_iters() as u64;
        let x_attack = (SECRET_ADDR - ARRAY1) / 8;
        a.op(format!("li r10, {ARRAY1:#x}"));
        a.op(format!("li r12, {SIZES:#x}"));
        a.op(format!("li r13, {}", x_attack - t));
        a.op(format!("li r6, {}", t + 1));
        a.op("li r5, 0");
        a.op(format!("li r3, {SECRET_LINE:#x}"));
        a.op("ld r4, r3, 0");
        (h.setup)(a);
        a.label("loop");
        a.op("mul r7, r5, r5");
        a.op("shl r7, r7, 6");
        a.op("add r7, r7, r12");
        (h.pre)(a);
        a.mark("slow_load");
        a.op("ld r2, r7, 0");
        let bound = (h.older)(a);
        a.op(format!("slt r8, r5, {t}"));
        a.op("sub r8, r8, 1");
        a.op("and r8, r8, r13");
        a.op("add r1, r5, r8");
        a.op(format!("bge r1, {bound}, skip"));
        if let Some(transient) = h.transient {
            a.op("shl r3, r1, 3");
            a.op("add r3, r3, r10");
            a.op("ld r4, r3, 0");
            transient(a);
        }
        a.label("skip");
        a.op("add r5, r5, 1");
        a.op("blt r5, r6, loop");
        a.op("fence");
    }

    /// Secret-indexed load of one line of the array at `base`, or of a
    /// fixed line for [`Variant::SecretIndependent`].
    fn probe_transient(&self, base: &'static str, dst: &'static str) -> impl Fn(&mut Asm) {
        let mask = 2 * self.domain() - 1;
        let independent = self.variant == Variant::SecretIndependent;
        move |a: &mut Asm| {
            if independent {
                a.op("and r4, r4, 0");
                a.op(format!("add r4, r4, {}", INTERFERENCE_SLOT * 64));
            } else {
                a.op(format!("and r4, r4, {mask}"));
                a.op("shl r4, r4, 6");
            }
            a.op(format!("add r4, r4, {base}"));
            a.op(format!("ld {dst}, r4, 0"));
        }
    }

    fn transient_enabled(&self) -> bool {
        self.variant != Variant::EmptyTransient
    }

    fn spectre_v1(&self, a: &mut Asm, secret: u64) {
        self.data(a, secret);
        let transient = self.probe_transient("r11", "r9");
        self.bounds_loop(
            a,
            Loop {
                setup: &|a| a.op(format!("li r11, {PROBE:#x}")),
                pre: &|_| {},
                older: &|_| "r2",
                transient: self.transient_enabled().then_some(&transient as &dyn Fn(&mut Asm)),
            },
        );
        for slot in self.sweep_order() {
            // keep each timed triple inside one fetch line
            a.align(4, "nop");
            a.op("rdcycle r13");
            a.op(format!("ld r9, r11, {}", slot * 64));
            a.op("rdcycle r14");
        }
        a.op("halt");
    }

    fn spectre_rewind(&self, a: &mut Asm, secret: u64) {
        self.data(a, secret);
        let variant = self.variant;
        let transient = move |a: &mut Asm| {
            if variant == Variant::SecretIndependent {
                a.op("div r15, r1, 1");
            } else {
                a.op("and r4, r4, 1");
                a.op("beq r4, r0, skip");
                a.op("div r15, r4, 1");
            }
            for _ in 0..7 {
                a.op("div r15, r15, 1");
            }
        };
        self.bounds_loop(
            a,
            Loop {
                setup: &|_| {},
                pre: &|a| a.op("rdcycle r9"),
                older: &|a| {
                    a.op("div r14, r2, 1");
                    a.op("div r14, r14, 1");
                    a.mark("chain_end");
                    a.op("div r14, r14, 1");
                    "r2"
                },
                transient: self.transient_enabled().then_some(&transient as &dyn Fn(&mut Asm)),
            },
        );
        a.op("rdcycle r9");
        a.op("halt");
    }

    fn interference(&self, a: &mut Asm, secret: u64) {
        let d = self.domain();
        let t = self.training_iters();
        // each iteration gets a fresh region of 2d lines
        let region_shift = (2 * d * 64).trailing_zeros();
        self.data(a, secret);
        let older_first = self.variant == Variant::OlderInProgramOrder;
        let transient = self.probe_transient("r14", "r4");
        let enabled = self.transient_enabled() && !older_first;
        self.bounds_loop(
            a,
            Loop {
                setup: &|a| a.op(format!("li r11, {REGION:#x}")),
                pre: &|a| {
                    a.op("mul r14, r5, r5");
                    a.op(format!("shl r14, r14, {region_shift}"));
                    a.op("add r14, r14, r11");
                    if older_first {
                        // the neighbouring line while training, the victim's on the last pass
                        a.op(format!("slt r15, r5, {t}"));
                        a.op("shl r15, r15, 6");
                        a.op("add r15, r15, r14");
                        a.op(format!("ld r15, r15, {}", INTERFERENCE_SLOT * 64));
                    }
                },
                older: &|a| {
                    a.op("and r3, r2, 0");
                    a.op("add r3, r3, r14");
                    a.mark("victim_load");
                    a.op(format!("ld r9, r3, {}", INTERFERENCE_SLOT * 64));
                    a.op("mul r15, r2, 1");
                    a.op("mul r15, r15, 1");
                    a.op("mul r15, r15, 1");
                    "r15"
                },
                transient: enabled.then_some(&transient as &dyn Fn(&mut Asm)),
            },
        );
        a.op("rdcycle r9");
        a.op("halt");
    }

    fn prime(&self, a: &mut Asm, secret: u64) {
        let d = self.domain();
        let victim_delay = 8 * d;
        self.data(a, secret);
        let transient = self.probe_transient("r11", "r9");
        let committed = self.variant == Variant::CommittedVictimAccess;
        a.comment("victim");
        a.core(0);
        self.bounds_loop(
            a,
            Loop {
                setup: &|a| {
                    a.op(format!("li r11, {PROBE:#x}"));
                    a.delay("victim", victim_delay);
                    if committed {
                        a.op(format!("ld r9, r11, {}", COMMITTED_SLOT * 64));
                    }
                },
                pre: &|_| {},
                older: &|_| "r2",
                transient: self.transient_enabled().then_some(&transient as &dyn Fn(&mut Asm)),
            },
        );
        a.op("halt");

        a.comment("attacker");
        a.core(1);
        a.op(format!("li r11, {PROBE:#x}"));
        a.op("li r5, 1");
        for slot in 0..d {
            a.op(format!("st r5, r11, {}", slot * 64));
        }
        a.delay("attacker", victim_delay + 200);
        a.op("fence");
        for slot in self.sweep_order() {
            a.align(4, "nop");
            a.op("rdcycle r13");
            a.op(format!("st r5, r11, {}", slot * 64));
            a.op("rdcycle r14");
        }
        a.op("halt");
    }

    fn icache(&self, a: &mut Asm, secret: u64) {
        let d = self.domain();
        let mask = 2 * d - 1;
        // one 16-instruction line per pad
        const PAD: usize = 16;
        self.data(a, secret);
        let independent = self.variant == Variant::SecretIndependent;
        let transient = move |a: &mut Asm| {
            if independent {
                a.op("and r4, r4, 0");
                a.op(format!("add r4, r4, {}", 7 * PAD));
            } else {
                a.op(format!("and r4, r4, {mask}"));
                a.op("shl r4, r4, 4");
            }
            a.op("add r4, r4, r11");
            a.op("jr r4");
        };
        self.bounds_loop(
            a,
            Loop {
                setup: &|a| {
                    a.op("li r11, pads");
                    a.op("li r9, skip");
                },
                pre: &|_| {},
                older: &|_| "r2",
                transient: self.transient_enabled().then_some(&transient as &dyn Fn(&mut Asm)),
            },
        );
        let order = self.sweep_order();
        a.op("jmp probe_0");
        for (k, slot) in order.iter().enumerate() {
            a.align(PAD, "halt");
            a.label(format!("probe_{k}"));
            a.op(format!("li r9, ret_{k}"));
            a.op("rdcycle r13");
            a.op(format!("jmp pad_{slot}"));
            a.label(format!("ret_{k}"));
            a.op("rdcycle r14");
            if k + 1 < order.len() {
                a.op(format!("jmp probe_{}", k + 1));
            } else {
                a.op("halt");
            }
        }
        a.align(PAD, "halt");
        a.label("pads");
        for slot in 0..=d {
            a.label(format!("pad_{slot}"));
            a.op("jr r9");
            a.align(PAD, "halt");
        }
    }
}

/// Per-slot receiver timings: differences of the trailing `rdcycle` pairs.
fn sweep_deltas(rdcycles: &[u64], slots: usize) -> Vec<i64> {
    if rdcycles.len() < 2 * slots {
        return Vec::new();
    }
    rdcycles[rdcycles.len() - 2 * slots..].chunks(2).map(|p| p[1] as i64 - p[0] as i64).collect()
}

/// Index of a strictly unique minimum that stands clear of the runner-up.
fn argmin(v: &[i64]) -> Option<usize> {
    let (k, &min) = v.iter().enumerate().min_by_key(|(_, x)| **x)?;
    let runner_up = v.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, x)| *x).min()?;
    (min + 10 <= runner_up).then_some(k)
}

fn pcs_complete(t: &CommittedTimeline, pc: usize) -> Vec<u64> {
    t.core(0).filter(|e| e.pc == pc).map(|e| e.complete).collect()
}
