//! Drivers over the simulator: single runs, per-secret differential runs,
//! transient ablation, and the fuzz corpus.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::attacks::Gadget;
use crate::config::{ProtectionMode, RunConfig};
use crate::fuzz::{self, FuzzParams};
use crate::isa::{load_program, AsmError, Program};
use crate::memsys::MemCounters;
use crate::pipeline::{CoreStats, Triggers};
use crate::sim::{simulate, Outcome, SimError};
use crate::timeline::Divergence;

/// Version of every report document emitted here.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("assembly error: {0}")]
    Asm(#[from] AsmError),
    #[error("gadget {gadget} needs coherence mode")]
    NeedsCoherence { gadget: String },
    #[error("gadget {gadget}: committed instruction stream differs between secrets {a} and {b}")]
    StructuralMismatch { gadget: String, a: u64, b: u64 },
    #[error("gadget {gadget} has a secret domain smaller than 2")]
    TrivialDomain { gadget: String },
}

impl HarnessError {
    pub fn is_timeout(&self) -> bool {
        matches!(self, HarnessError::Sim(SimError::Timeout(_)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Safe,
    Leaks,
    Pass,
    Fail,
}

impl Verdict {
    pub fn ok(self) -> bool {
        matches!(self, Verdict::Safe | Verdict::Pass)
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Safe => "SAFE",
            Verdict::Leaks => "LEAKS",
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub schema: u32,
    pub mode: ProtectionMode,
    pub digest: String,
    pub cycles: u64,
    pub committed: u64,
    pub ipc: f64,
    pub counters: MemCounters,
    pub cores: Vec<CoreStats>,
}

impl Report {
    pub fn from_outcome(o: &Outcome, cfg: &RunConfig) -> Self {
        let committed = o.timeline.len() as u64;
        Report {
            schema: SCHEMA_VERSION,
            mode: cfg.mode,
            digest: o.timeline.digest(),
            cycles: o.cycles,
            committed,
            ipc: if o.cycles == 0 { 0.0 } else { committed as f64 / o.cycles as f64 },
            counters: o.counters,
            cores: o.cores.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        to_text(self)
    }

    /// Counter names and values, one CSV row each.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["counter", "value"])?;
        let c = &self.counters;
        let rows: [(&str, u64); 13] = [
            ("cycles", self.cycles),
            ("committed", self.committed),
            ("timeguard_blocks", c.timeguard_blocks),
            ("fills_rejected", c.fills_rejected),
            ("flushes", c.flushes),
            ("lines_extracted", c.lines_extracted),
            ("leapfrogs", c.leapfrogs),
            ("timeleaps", c.timeleaps),
            ("retries", c.retries),
            ("replays", c.replays),
            ("prefetches_issued", c.prefetches_issued),
            ("async_reloads", c.async_reloads),
            ("squashes", self.cores.iter().map(|s| s.squashes).sum()),
        ];
        for (k, v) in rows {
            out.write_record([k, &v.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Pretty JSON, the structured text form of every report.
pub fn to_text<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize")
}

pub fn run(program: &Program, cfg: &RunConfig) -> Result<Report, SimError> {
    let o = simulate(program, cfg, None)?;
    Ok(Report::from_outcome(&o, cfg))
}

// ----- differential -----

#[derive(Clone, Debug, Serialize)]
pub struct SecretRun {
    pub secret: u64,
    pub digest: String,
    pub guess: Option<u64>,
    pub cycles: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FirstDifference {
    pub secret_a: u64,
    pub secret_b: u64,
    pub divergence: Divergence,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiffReport {
    pub schema: u32,
    pub gadget: String,
    pub mode: ProtectionMode,
    pub verdict: Verdict,
    pub runs: Vec<SecretRun>,
    /// Runs where the decoder said what a perfect receiver would.
    pub decoded: usize,
    pub first_difference: Option<FirstDifference>,
    pub counters: MemCounters,
}

/// Full outcomes of a differential run, for callers that inspect timelines.
pub struct DiffRun {
    pub report: DiffReport,
    pub outcomes: Vec<(u64, Outcome)>,
}

pub fn run_differential(gadget: &Gadget, cfg: &RunConfig) -> Result<DiffReport, HarnessError> {
    differential(gadget, cfg).map(|d| d.report)
}

pub fn differential(gadget: &Gadget, cfg: &RunConfig) -> Result<DiffRun, HarnessError> {
    if gadget.needs_coherence() && !cfg.features.coherence_mode {
        return Err(HarnessError::NeedsCoherence { gadget: gadget.name() });
    }
    let secrets = gadget.secrets();
    if secrets.len() < 2 {
        return Err(HarnessError::TrivialDomain { gadget: gadget.name() });
    }
    let outcomes: Vec<(u64, Outcome)> = secrets
        .par_iter()
        .map(|&s| -> Result<(u64, Outcome), HarnessError> {
            let p = gadget.program(s, cfg.mem_bytes)?;
            Ok((s, simulate(&p, cfg, None)?))
        })
        .collect::<Result<_, _>>()?;

    let (s0, base) = &outcomes[0];
    let shape = base.timeline.structure();
    for (s, o) in &outcomes[1..] {
        if o.timeline.structure() != shape {
            return Err(HarnessError::StructuralMismatch { gadget: gadget.name(), a: *s0, b: *s });
        }
    }
    let first_difference = outcomes[1..].iter().find_map(|(s, o)| {
        base.timeline.first_difference(&o.timeline).map(|d| FirstDifference {
            secret_a: *s0,
            secret_b: *s,
            divergence: d,
        })
    });
    let runs: Vec<SecretRun> = outcomes
        .iter()
        .map(|(s, o)| SecretRun {
            secret: *s,
            digest: o.timeline.digest(),
            guess: gadget.decode(&o.timeline),
            cycles: o.cycles,
        })
        .collect();
    let decoded = runs.iter().filter(|r| r.guess == gadget.expected(r.secret)).count();
    let counters = outcomes.iter().fold(MemCounters::default(), |acc, (_, o)| acc + o.counters);
    let report = DiffReport {
        schema: SCHEMA_VERSION,
        gadget: gadget.name(),
        mode: cfg.mode,
        verdict: if first_difference.is_some() { Verdict::Leaks } else { Verdict::Safe },
        runs,
        decoded,
        first_difference,
        counters,
    };
    Ok(DiffRun { report, outcomes })
}

// ----- ablation -----

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub schema: u32,
    pub mode: ProtectionMode,
    pub verdict: Verdict,
    pub divergence: Option<Divergence>,
    pub triggers: usize,
    pub nops_inserted: u64,
    pub squashed_loads: u64,
    /// Caches and predictor tables at halt match between the two runs.
    pub pure: bool,
    pub digest: String,
    pub ablated_digest: String,
}

pub struct AblationRun {
    pub report: AblationReport,
    pub normal: Outcome,
    pub ablated: Outcome,
}

pub fn run_ablation(program: &Program, cfg: &RunConfig) -> Result<AblationReport, SimError> {
    ablation(program, cfg).map(|a| a.report)
}

pub fn ablation(program: &Program, cfg: &RunConfig) -> Result<AblationRun, SimError> {
    let normal = simulate(program, cfg, None)?;
    let plan: Vec<Triggers> = normal.triggers.iter().map(|t| t.iter().copied().collect()).collect();
    let ablated = simulate(program, cfg, Some(&plan))?;
    let divergence = normal.timeline.first_difference(&ablated.timeline);
    let pure = normal.nonspec == ablated.nonspec && normal.predictors == ablated.predictors;
    let report = AblationReport {
        schema: SCHEMA_VERSION,
        mode: cfg.mode,
        verdict: if divergence.is_none() { Verdict::Pass } else { Verdict::Fail },
        divergence,
        triggers: plan.iter().map(|t| t.len()).sum(),
        nops_inserted: ablated.cores.iter().map(|c| c.nops_inserted).sum(),
        squashed_loads: normal.cores.iter().map(|c| c.squashed_loads).sum(),
        pure,
        digest: normal.timeline.digest(),
        ablated_digest: ablated.timeline.digest(),
    };
    Ok(AblationRun { report, normal, ablated })
}

// ----- fuzz -----

#[derive(Clone, Debug, Serialize)]
pub struct FuzzCase {
    pub index: usize,
    pub seed: u64,
    pub verdict: Verdict,
    pub pure: bool,
    pub squashed_loads: u64,
    pub error: Option<String>,
    pub divergence: Option<Divergence>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Counterexample {
    pub seed: u64,
    pub source: String,
    pub divergence: Option<Divergence>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FuzzReport {
    pub schema: u32,
    pub mode: ProtectionMode,
    pub seed: u64,
    pub total: usize,
    pub passed: usize,
    pub impure: usize,
    /// Programs that squashed at least one load after it accessed memory.
    pub with_mispredicted_loads: usize,
    /// Failures among those programs.
    pub failed_with_mispredicted_loads: usize,
    pub failures: Vec<FuzzCase>,
    pub counterexample: Option<Counterexample>,
}

impl FuzzReport {
    pub fn verdict(&self) -> Verdict {
        if self.passed == self.total && self.impure == 0 {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

fn fuzz_case(index: usize, seed: u64, params: &FuzzParams, cfg: &RunConfig) -> FuzzCase {
    let src = fuzz::generate(seed, params.min_len, params.max_len);
    let result = load_program(&src, cfg.mem_bytes)
        .map_err(|e| e.to_string())
        .and_then(|p| run_ablation(&p, cfg).map_err(|e| e.to_string()));
    match result {
        Ok(r) => FuzzCase {
            index,
            seed,
            verdict: r.verdict,
            pure: r.pure,
            squashed_loads: r.squashed_loads,
            error: None,
            divergence: r.divergence,
        },
        Err(e) => FuzzCase {
            index,
            seed,
            verdict: Verdict::Fail,
            pure: false,
            squashed_loads: 0,
            error: Some(e),
            divergence: None,
        },
    }
}

pub fn fuzz_programs(params: &FuzzParams, cfg: &RunConfig) -> FuzzReport {
    let cases = if params.mispredicted_loads_only {
        let mut kept = Vec::new();
        let mut next = 0;
        // bounded so a configuration that never mispredicts still terminates
        while kept.len() < params.count && next < params.count.saturating_mul(20) {
            let batch = (params.count - kept.len()).max(16);
            let found: Vec<FuzzCase> = (next..next + batch)
                .into_par_iter()
                .map(|i| fuzz_case(i, fuzz::program_seed(params.seed, i), params, cfg))
                .collect();
            kept.extend(found.into_iter().filter(|c| c.squashed_loads > 0));
            next += batch;
        }
        kept.truncate(params.count);
        kept
    } else {
        (0..params.count)
            .into_par_iter()
            .map(|i| fuzz_case(i, fuzz::program_seed(params.seed, i), params, cfg))
            .collect()
    };
    let total = cases.len();
    let passed = cases.iter().filter(|c| c.verdict == Verdict::Pass).count();
    let impure = cases.iter().filter(|c| c.error.is_none() && !c.pure).count();
    let with_mispredicted_loads = cases.iter().filter(|c| c.squashed_loads > 0).count();
    let failures: Vec<FuzzCase> = cases.into_iter().filter(|c| c.verdict == Verdict::Fail || !c.pure).collect();
    let failed_with_mispredicted_loads =
        failures.iter().filter(|c| c.verdict == Verdict::Fail && c.squashed_loads > 0).count();
    let counterexample = failures.iter().find(|c| c.error.is_none()).map(|c| {
        let src = fuzz::generate(c.seed, params.min_len, params.max_len);
        let source = minimize(&src, cfg);
        let divergence = load_program(&source, cfg.mem_bytes)
            .ok()
            .and_then(|p| run_ablation(&p, cfg).ok())
            .and_then(|r| r.divergence);
        Counterexample { seed: c.seed, source, divergence }
    });
    FuzzReport {
        schema: SCHEMA_VERSION,
        mode: cfg.mode,
        seed: params.seed,
        total,
        passed,
        impure,
        with_mispredicted_loads,
        failed_with_mispredicted_loads,
        failures,
        counterexample,
    }
}

fn still_fails(src: &str, cfg: &RunConfig) -> bool {
    let Ok(p) = load_program(src, cfg.mem_bytes) else { return false };
    matches!(run_ablation(&p, cfg), Ok(r) if r.verdict == Verdict::Fail || !r.pure)
}

/// Greedy line-deletion shrink of a failing program.
pub fn minimize(src: &str, cfg: &RunConfig) -> String {
    let cfg = RunConfig { max_cycles: cfg.max_cycles.min(200_000), ..cfg.clone() };
    let mut lines: Vec<&str> = src.lines().collect();
    let mut changed = true;
    while changed {
        changed = false;
        let mut i = 0;
        while i < lines.len() {
            if lines[i].trim() == "halt" {
                i += 1;
                continue;
            }
            let mut trial = lines.clone();
            trial.remove(i);
            if still_fails(&trial.join("\n"), &cfg) {
                lines = trial;
                changed = true;
            } else {
                i += 1;
            }
        }
    }
    lines.join("\n") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_is_deterministic_and_versioned() {
        let cfg = RunConfig::default();
        let p = load_program(".word 0x80 4\nli r1, 0x80\nld r2, r1, 0\nadd r3, r2, r2\nhalt\n", cfg.mem_bytes).unwrap();
        let a = run(&p, &cfg).unwrap().to_text();
        let b = run(&p, &cfg).unwrap().to_text();
        assert_eq!(a, b);
        assert!(a.contains("\"schema\": 1"));
        let mut csv = Vec::new();
        run(&p, &cfg).unwrap().write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("counter,value\ncycles,"));
    }

    #[test]
    fn ablation_without_mispredictions_is_trivially_equal() {
        let cfg = RunConfig::default();
        let p = load_program("li r1, 3\nmul r2, r1, r1\nhalt\n", cfg.mem_bytes).unwrap();
        let r = run_ablation(&p, &cfg).unwrap();
        assert_eq!((r.verdict, r.triggers, r.nops_inserted), (Verdict::Pass, 0, 0));
        assert!(r.pure);
    }

    #[test]
    fn empty_fuzz_is_vacuous_pass() {
        let r = fuzz_programs(&FuzzParams { count: 0, ..FuzzParams::default() }, &RunConfig::default());
        assert_eq!(r.verdict(), Verdict::Pass);
        assert_eq!(r.total, 0);
    }
}
