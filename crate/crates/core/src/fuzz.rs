//! Seeded random program generator for the ablation property.
//!
//! Programs are a short outer loop around a body of forward-only branches,
//! loads and stores over a small address space (chosen to collide in the
//! ghost and L1 sets), ALU ops and divide chains. Everything terminates.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Generator bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FuzzParams {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Keep only programs that squash a load after it accessed memory.
    pub mispredicted_loads_only: bool,
}

impl Default for FuzzParams {
    fn default() -> Self {
        Self { count: 1000, min_len: 12, max_len: 40, seed: 1, mispredicted_loads_only: false }
    }
}

const GENERAL: [&str; 8] = ["r1", "r2", "r3", "r4", "r5", "r6", "r7", "r8"];
const BASES: [&str; 2] = ["r10", "r11"];
const BASE_ADDRS: [u64; 2] = [0x10000, 0x20000];

/// Word offsets from a base: a few lines per base, some 1 KiB apart so they
/// share a ghost set, one 32 KiB apart so it shares an L1 set.
const OFFSETS: [i64; 8] = [0, 8, 64, 128, 1024, 2048, 3072, 32768];

/// Seed of the `index`th program of a corpus.
pub fn program_seed(corpus_seed: u64, index: usize) -> u64 {
    corpus_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64)
}

/// Generates one program as assembly text.
pub fn generate(seed: u64, min_len: usize, max_len: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.gen_range(min_len..=max_len.max(min_len));
    let mut out = String::new();
    let mut label = 0usize;

    for (i, base) in BASE_ADDRS.iter().enumerate() {
        for off in OFFSETS {
            let v: u64 = rng.gen_range(0..16);
            writeln!(out, ".word {:#x} {}", base + off as u64, v).unwrap();
        }
        writeln!(out, "    li {}, {:#x}", BASES[i], base).unwrap();
    }
    for r in GENERAL {
        writeln!(out, "    li {r}, {}", rng.gen_range(0..8)).unwrap();
    }
    let iterations = rng.gen_range(1..=3);
    writeln!(out, "    li r15, {iterations}").unwrap();
    writeln!(out, "top:").unwrap();

    // pending labels: (instruction index at which to place, name)
    let mut pending: Vec<(usize, String)> = Vec::new();
    for i in 0..len {
        pending.sort();
        while let Some((at, _)) = pending.first() {
            if *at > i {
                break;
            }
            let (_, name) = pending.remove(0);
            writeln!(out, "{name}:").unwrap();
        }
        let g = |rng: &mut ChaCha8Rng| *GENERAL.choose(rng).expect("nonempty");
        let b = |rng: &mut ChaCha8Rng| *BASES.choose(rng).expect("nonempty");
        let off = |rng: &mut ChaCha8Rng| *OFFSETS.choose(rng).expect("nonempty");
        match rng.gen_range(0..100) {
            0..=19 => {
                let (d, base, o) = (g(&mut rng), b(&mut rng), off(&mut rng));
                writeln!(out, "    ld {d}, {base}, {o}").unwrap();
            }
            20..=29 => {
                // data-dependent address: one of eight lines 1 KiB apart
                let (s, d, base) = (g(&mut rng), g(&mut rng), b(&mut rng));
                writeln!(out, "    and r9, {s}, 7").unwrap();
                writeln!(out, "    shl r9, r9, 10").unwrap();
                writeln!(out, "    add r9, r9, {base}").unwrap();
                writeln!(out, "    ld {d}, r9, 0").unwrap();
            }
            30..=37 => {
                let (v, base, o) = (g(&mut rng), b(&mut rng), off(&mut rng));
                writeln!(out, "    st {v}, {base}, {o}").unwrap();
            }
            38..=55 => {
                let (x, y) = (g(&mut rng), g(&mut rng));
                let cond = ["beq", "bne", "blt", "bge"].choose(&mut rng).expect("nonempty");
                let skip = rng.gen_range(1..=6);
                let name = format!("L{label}");
                label += 1;
                writeln!(out, "    {cond} {x}, {y}, {name}").unwrap();
                pending.push(((i + 1 + skip).min(len), name));
            }
            56..=63 => {
                let (d, s) = (g(&mut rng), g(&mut rng));
                let op = if rng.gen_bool(0.5) { "div" } else { "rem" };
                writeln!(out, "    {op} {d}, {s}, {}", rng.gen_range(1..5)).unwrap();
            }
            64..=68 => {
                let (d, s, t) = (g(&mut rng), g(&mut rng), g(&mut rng));
                writeln!(out, "    mul {d}, {s}, {t}").unwrap();
            }
            69..=70 => {
                writeln!(out, "    rdcycle {}", g(&mut rng)).unwrap();
            }
            71 => writeln!(out, "    fence").unwrap(),
            _ => {
                let (d, s, t) = (g(&mut rng), g(&mut rng), g(&mut rng));
                let op = ["add", "sub", "and", "or", "xor", "slt"].choose(&mut rng).expect("nonempty");
                if rng.gen_bool(0.5) {
                    writeln!(out, "    {op} {d}, {s}, {t}").unwrap();
                } else {
                    writeln!(out, "    {op} {d}, {s}, {}", rng.gen_range(0..8)).unwrap();
                }
            }
        }
    }
    pending.sort();
    for (_, name) in pending {
        writeln!(out, "{name}:").unwrap();
    }
    writeln!(out, "    sub r15, r15, 1").unwrap();
    writeln!(out, "    bne r15, r0, top").unwrap();
    writeln!(out, "    halt").unwrap();
    out
}
