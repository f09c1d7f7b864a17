//! The global cycle loop: steps every core (in core order) against the
//! shared memory system until all cores halt.

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::isa::Program;
use crate::memsys::{CoherenceViolation, MemCounters, MemSystem, NonSpecState};
use crate::pipeline::{Core, CoreStats, Triggers};
use crate::predictor::Predictor;
use crate::timeline::CommittedTimeline;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation exceeded {0} cycles without halting")]
    Timeout(u64),
    #[error(transparent)]
    Coherence(#[from] CoherenceViolation),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("program has {have} core sections but the configuration runs {want} cores")]
    CoreCount { have: usize, want: usize },
}

/// Everything observable about a finished run.
#[derive(Clone, Debug, Serialize)]
pub struct Outcome {
    pub timeline: CommittedTimeline,
    pub cycles: u64,
    pub counters: MemCounters,
    pub cores: Vec<CoreStats>,
    /// Per-core commit indices of instructions that squashed younger work.
    pub triggers: Vec<Vec<u64>>,
    pub nonspec: NonSpecState,
    pub predictors: Vec<Predictor>,
    pub registers: Vec<Vec<u64>>,
}

/// Runs `program` to completion. With `ablate`, instructions renamed after a
/// listed trigger (by per-core commit index) become no-ops until it squashes.
pub fn simulate(program: &Program, cfg: &RunConfig, ablate: Option<&[Triggers]>) -> Result<Outcome, SimError> {
    cfg.validate()?;
    let want = cfg.num_cores();
    if program.cores.len() > want {
        return Err(SimError::CoreCount { have: program.cores.len(), want });
    }
    let mut mem = MemSystem::new(cfg, program.data.iter().map(|(a, v)| (*a, *v)));
    let empty = Default::default();
    let mut cores: Vec<Core> = (0..want)
        .map(|i| {
            let code = program.cores.get(i).unwrap_or(&empty);
            let plan = ablate.map(|a| a.get(i).cloned().unwrap_or_default());
            Core::new(i, code, cfg, plan)
        })
        .collect();
    let mut entries = Vec::new();
    let mut cycle = 0;
    while !cores.iter().all(Core::halted) {
        if cycle >= cfg.max_cycles {
            return Err(SimError::Timeout(cfg.max_cycles));
        }
        mem.begin_cycle(cycle);
        for core in &mut cores {
            core.step(cycle, &mut mem, &mut entries);
        }
        if cfg.features.coherence_mode {
            mem.check_directory(cycle)?;
        }
        debug_assert!(mem.check_exclusivity(), "ghost and L1 share a line at cycle {cycle}");
        cycle += 1;
    }
    Ok(Outcome {
        timeline: CommittedTimeline { entries },
        cycles: cycle,
        counters: mem.totals(),
        cores: cores.iter().map(|c| c.stats).collect(),
        triggers: cores.iter().map(|c| c.triggers().to_vec()).collect(),
        nonspec: mem.nonspec_state(),
        predictors: cores.iter().map(|c| c.predictor().clone()).collect(),
        registers: cores.iter().map(|c| c.regs().to_vec()).collect(),
    })
}
