use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sparta_core::addrspace::PageSize;
use sparta_core::analysis::cpi;
use sparta_core::config::{SystemConfig, TlbSpec};
use sparta_core::engine::trace::{self, TraceError};
use sparta_core::engine::{run_config, EngineError};
use sparta_core::latency::{CacheKind, Mode};
use sparta_core::recipes::{run_recipe, Recipe, SweepOptions};
use sparta_core::size::ByteSize;
use sparta_core::workloads::{self, WorkloadKind, WorkloadSpec};

#[derive(Parser)]
#[command(name = "sparta", version, about = "Partitioned memory-side address translation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic index-traversal trace.
    Gen(GenArgs),
    /// Replay a trace or workload and print statistics as JSON.
    Run(RunArgs),
    /// Run a named parameter sweep and print CSV.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_parser = parse_kind)]
    kind: WorkloadKind,
    #[arg(long, default_value = "1GiB", value_parser = parse_size)]
    footprint: ByteSize,
    /// Searches across all threads; accepts suffixes like 1M.
    #[arg(long, value_parser = parse_count)]
    ops: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: u32,
    #[arg(long)]
    private_pages: Option<u32>,
    /// Records taken from each thread in turn.
    #[arg(long, default_value_t = 1)]
    chunk: usize,
    /// Write the one-record-per-line text format instead of binary.
    #[arg(long)]
    text: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Overrides applied on top of a config file.
#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    partitions: Option<u32>,
    #[arg(long, value_parser = parse_page)]
    page_size: Option<PageSize>,
    #[arg(long)]
    tlb_entries: Option<u32>,
    #[arg(long)]
    accel_tlb_entries: Option<u32>,
    #[arg(long, value_parser = parse_cache)]
    cache: Option<CacheKind>,
    #[arg(long)]
    threads: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self) -> Result<SystemConfig, anyhow::Error> {
        let mut cfg = match &self.config {
            Some(p) => SystemConfig::load(p)?,
            None => SystemConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(p) = self.partitions {
            cfg.partitions = p;
        }
        if let Some(p) = self.page_size {
            cfg.page_size = p;
        }
        if let Some(e) = self.tlb_entries {
            cfg.tlb = TlbSpec { entries: e, ..cfg.tlb };
        }
        if let Some(e) = self.accel_tlb_entries {
            cfg.accel_tlb = TlbSpec { entries: e, ..cfg.accel_tlb };
        }
        if let Some(c) = self.cache {
            cfg.cache.kind = c;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            if let Some(w) = &mut cfg.workload {
                w.seed = s;
            }
        }
        if let (Some(t), Some(w)) = (self.threads, &mut cfg.workload) {
            w.threads = t;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Trace file to replay instead of the config's source.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// One of tlb-sweep, contention, penalty, multiprog, perf, cache-sens.
    recipe: String,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, value_parser = parse_size)]
    footprint: Option<ByteSize>,
    /// Target references per trace; accepts suffixes like 2M.
    #[arg(long, value_parser = parse_count)]
    records: Option<u64>,
    /// Restrict to these workloads (repeatable).
    #[arg(long = "workload", value_parser = parse_kind)]
    workloads: Vec<WorkloadKind>,
    /// Concurrent runs; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<WorkloadKind, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn parse_page(s: &str) -> Result<PageSize, String> {
    s.parse()
}

fn parse_cache(s: &str) -> Result<CacheKind, String> {
    match s {
        "none" => Ok(CacheKind::None),
        "virtual" => Ok(CacheKind::Virtual),
        "physical" => Ok(CacheKind::Physical),
        _ => Err(format!("unknown cache {s:?} (expected none, virtual or physical)")),
    }
}

fn parse_size(s: &str) -> Result<ByteSize, String> {
    s.parse()
}

fn parse_count(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let (num, mult) = match t.chars().last() {
        Some('k' | 'K') => (&t[..t.len() - 1], 1_000),
        Some('m' | 'M') => (&t[..t.len() - 1], 1_000_000),
        Some('g' | 'G') => (&t[..t.len() - 1], 1_000_000_000),
        _ => (t, 1),
    };
    num.replace('_', "").parse::<u64>().map(|n| n * mult).map_err(|e| format!("bad count {s:?}: {e}"))
}

/// Failures split by exit code.
enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())).map_err(Failure::Run),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).context("writing stdout")?;
            Ok(())
        }
    }
}

fn cmd_gen(a: GenArgs) -> Result<(), Failure> {
    if a.chunk == 0 {
        return Err(usage(anyhow!("--chunk must be at least 1")));
    }
    let mut spec = WorkloadSpec::new(a.kind, a.footprint.0, a.ops, a.seed).with_threads(a.threads);
    if let Some(p) = a.private_pages {
        spec = spec.with_private_pages(p);
    }
    spec.validate().map_err(usage)?;
    let records = workloads::generate(&spec, a.chunk).map_err(usage)?;
    if a.text {
        let file = std::fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
        trace::write_text(std::io::BufWriter::new(file), &records)
            .with_context(|| format!("writing {}", a.out.display()))?;
    } else {
        trace::write_file(&a.out, &records).map_err(|e| Failure::Run(e.into()))?;
    }
    println!("records={} distinct_pages={}", records.len(), workloads::distinct_pages(&records, PageSize::Small));
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let mut cfg = a.overrides.apply().map_err(usage)?;
    if let Some(t) = a.trace {
        cfg.trace = Some(t);
        cfg.workload = None;
    }
    cfg.validate().map_err(usage)?;
    if let Some(t) = &cfg.trace {
        if !t.exists() {
            return Err(usage(anyhow!("trace file not found: {}", t.display())));
        }
    }
    let stats = run_config(&cfg).map_err(|e| match e {
        EngineError::Config(_) | EngineError::NoSource => usage(e),
        EngineError::Trace(TraceError::Io { .. }) => usage(e),
        other => Failure::Run(other.into()),
    })?;
    let perf = cpi(&stats, &cfg.cpi, &cfg.latency, &cfg.topology).ok();
    let report = json!({
        "config": cfg,
        "stats": stats,
        "derived": {
            "translation_miss_ratio": stats.translation_miss_ratio(),
            "cache_miss_ratio": stats.cache_miss_ratio(),
            "mean_latency_ns": stats.mean_latency_ns(),
            "exposed_share": stats.exposed_share(),
            "mean_walk_refs": stats.mean_walk_refs(),
            "cpi": perf,
        },
    });
    let mut text = serde_json::to_string_pretty(&report).context("serializing report")?;
    text.push('\n');
    emit(a.out.as_deref(), &text)
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Failure> {
    let recipe: Recipe = a.recipe.parse().map_err(usage)?;
    let base = a.overrides.apply().map_err(usage)?;
    base.validate().map_err(usage)?;
    let mut opts = SweepOptions { base, jobs: a.jobs, ..Default::default() };
    if let Some(f) = a.footprint {
        opts.footprint = f;
    }
    if let Some(r) = a.records {
        opts.records = r;
    }
    if !a.workloads.is_empty() {
        opts.workloads = a.workloads;
    }
    if let Some(t) = a.overrides.threads {
        opts.threads = t;
    }
    if let Some(s) = a.overrides.seed {
        opts.seed = s;
    }
    let csv = run_recipe(recipe, &opts).map_err(|e| Failure::Run(e.into()))?;
    emit(a.out.as_deref(), &csv)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
