use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ghostminion::attacks::{self, Gadget, Variant};
use ghostminion::config::{ProtectionMode, RunConfig};
use ghostminion::fuzz::FuzzParams;
use ghostminion::harness::{self, HarnessError, Verdict};
use ghostminion::isa::load_program;
use ghostminion::sim::SimError;

/// Like `println!`, but a closed stdout (e.g. piping into `head`) is not a panic.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

const EXIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_TIMEOUT: u8 = 3;

#[derive(Parser)]
#[command(name = "ghostsim", version, about = "Speculative-execution timing simulator and leak tester")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ProtectionMode>,
    #[arg(long)]
    max_cycles: Option<u64>,
    /// Two-core directory coherence mode.
    #[arg(long)]
    coherence: bool,
    /// Write counters (or per-run rows) as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one program and print its report.
    Run {
        program: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run a gadget once per secret and compare the committed timelines.
    Diff {
        gadget: String,
        #[arg(long, value_enum, default_value = "standard")]
        variant: Variant,
        #[arg(long, default_value_t = 4)]
        secret_bits: u32,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run a program with its mispredicted paths turned into no-ops.
    Ablate {
        program: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Ablation over randomly generated programs.
    Fuzz {
        #[arg(default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        min_len: usize,
        #[arg(long, default_value_t = 40)]
        max_len: usize,
        /// Only count programs that squash a load after it accessed memory.
        #[arg(long)]
        mispredicted_loads_only: bool,
        #[command(flatten)]
        common: Common,
    },
    /// The gadget corpus.
    Gadgets {
        #[command(subcommand)]
        action: GadgetAction,
    },
}

#[derive(Subcommand)]
enum GadgetAction {
    List,
    /// Write each gadget as a `.gasm` file.
    Emit {
        #[arg(long, default_value = "gadgets")]
        dir: PathBuf,
        #[arg(long, default_value_t = attacks::EMIT_SECRET)]
        secret: u64,
    },
}

enum Failure {
    Usage(String),
    Timeout(String),
    Other(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Sim(SimError::Timeout(_)) => Failure::Timeout(e.to_string()),
            HarnessError::Sim(SimError::Config(_) | SimError::CoreCount { .. })
            | HarnessError::Asm(_)
            | HarnessError::NeedsCoherence { .. }
            | HarnessError::StructuralMismatch { .. }
            | HarnessError::TrivialDomain { .. } => Failure::Usage(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        HarnessError::from(e).into()
    }
}

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(m) = c.mode {
        cfg.mode = m;
    }
    if let Some(n) = c.max_cycles {
        cfg.max_cycles = n;
    }
    if c.coherence {
        cfg.features.coherence_mode = true;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn read_program(path: &Path, cfg: &RunConfig) -> Result<ghostminion::isa::Program, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    load_program(&text, cfg.mem_bytes).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn csv_file(path: &Path) -> Result<fs::File, Failure> {
    fs::File::create(path).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))
}

fn write_rows<S: serde::Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<(), Failure> {
    let mut w = csv::Writer::from_writer(csv_file(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| Failure::Other(e.to_string()))?;
    }
    w.flush().map_err(|e| Failure::Other(e.to_string()))
}

fn verdict_code(v: Verdict) -> u8 {
    if v.ok() {
        0
    } else {
        EXIT_FAIL
    }
}

fn execute(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Run { program, common } => {
            let cfg = load_config(&common)?;
            let p = read_program(&program, &cfg)?;
            let report = harness::run(&p, &cfg)?;
            out!("{}", report.to_text());
            if let Some(path) = &common.csv {
                report.write_csv(csv_file(path)?).map_err(|e| Failure::Other(e.to_string()))?;
            }
            Ok(0)
        }
        Command::Diff { gadget, variant, secret_bits, common } => {
            let cfg = load_config(&common)?;
            if !(1..=8).contains(&secret_bits) {
                return Err(Failure::Usage("--secret-bits must be 1..=8".into()));
            }
            let g: Gadget = attacks::by_name(&gadget)
                .ok_or_else(|| Failure::Usage(format!("unknown gadget `{gadget}` (see `gadgets list`)")))?;
            if !g.supports(variant) {
                return Err(Failure::Usage(format!("{gadget} has no {} variant", variant.name())));
            }
            let g = g.with_variant(variant).with_secret_bits(secret_bits);
            let report = harness::run_differential(&g, &cfg)?;
            out!("{}", harness::to_text(&report));
            if let Some(path) = &common.csv {
                write_rows(path, &report.runs)?;
            }
            Ok(verdict_code(report.verdict))
        }
        Command::Ablate { program, common } => {
            let cfg = load_config(&common)?;
            let p = read_program(&program, &cfg)?;
            let report = harness::run_ablation(&p, &cfg)?;
            out!("{}", harness::to_text(&report));
            if let Some(path) = &common.csv {
                let r = &report;
                write_rows(
                    path,
                    [
                        ("verdict", r.verdict.to_string()),
                        ("triggers", r.triggers.to_string()),
                        ("nops_inserted", r.nops_inserted.to_string()),
                        ("squashed_loads", r.squashed_loads.to_string()),
                        ("pure", r.pure.to_string()),
                        ("digest", r.digest.clone()),
                        ("ablated_digest", r.ablated_digest.clone()),
                    ],
                )?;
            }
            Ok(verdict_code(report.verdict))
        }
        Command::Fuzz { count, seed, min_len, max_len, mispredicted_loads_only, common } => {
            let cfg = load_config(&common)?;
            if min_len == 0 || min_len > max_len {
                return Err(Failure::Usage("need 0 < --min-len <= --max-len".into()));
            }
            let params = FuzzParams { count, min_len, max_len, seed, mispredicted_loads_only };
            let report = harness::fuzz_programs(&params, &cfg);
            out!("{}", harness::to_text(&report));
            if let Some(path) = &common.csv {
                write_rows(
                    path,
                    report.failures.iter().map(|c| (c.index, c.seed, c.verdict, c.pure, c.squashed_loads)),
                )?;
            }
            Ok(verdict_code(report.verdict()))
        }
        Command::Gadgets { action: GadgetAction::List } => {
            for g in attacks::all() {
                let coherence = if g.needs_coherence() { " (needs --coherence)" } else { "" };
                out!("{}{coherence}", g.name());
            }
            Ok(0)
        }
        Command::Gadgets { action: GadgetAction::Emit { dir, secret } } => {
            fs::create_dir_all(&dir).map_err(|e| Failure::Other(format!("{}: {e}", dir.display())))?;
            for g in attacks::all() {
                let path = dir.join(format!("{}.gasm", g.name()));
                fs::write(&path, g.render(secret)).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))?;
                out!("{}", path.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Timeout(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_TIMEOUT)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_FAIL)
        }
    }
}
