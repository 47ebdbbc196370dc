//! Named parameter sweeps. Each emits CSV rows whose first column tags the
//! experiment the sweep mirrors.

use std::fmt;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::addrspace::PageSize;
use crate::analysis::{cpi, speedup, CpiResult, ResultRow};
use crate::config::{SystemConfig, TlbSpec};
use crate::engine::trace::{interleave, TraceRecord};
use crate::engine::{EngineError, RunStats, Simulator};
use crate::latency::{normalized_miss_penalty, CacheKind, Mode, Topology};
use crate::size::ByteSize;
use crate::workloads::{self, WorkloadError, WorkloadKind, WorkloadSpec};

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("unknown recipe {0:?} (known: tlb-sweep, contention, penalty, multiprog, perf, cache-sens)")]
    Unknown(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipe {
    TlbSweep,
    Contention,
    Penalty,
    Multiprog,
    Perf,
    CacheSens,
}

impl Recipe {
    pub const ALL: [Recipe; 6] =
        [Recipe::TlbSweep, Recipe::Contention, Recipe::Penalty, Recipe::Multiprog, Recipe::Perf, Recipe::CacheSens];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::TlbSweep => "tlb-sweep",
            Recipe::Contention => "contention",
            Recipe::Penalty => "penalty",
            Recipe::Multiprog => "multiprog",
            Recipe::Perf => "perf",
            Recipe::CacheSens => "cache-sens",
        }
    }

    /// Tag written to the `figure` column.
    pub fn figure(self) -> &'static str {
        match self {
            Recipe::TlbSweep => "tlb-sensitivity",
            Recipe::Contention => "thread-contention",
            Recipe::Penalty => "tlb-miss-penalty",
            Recipe::Multiprog => "multiprogramming",
            Recipe::Perf => "performance",
            Recipe::CacheSens => "accel-tlb-capacity",
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Recipe {
    type Err = RecipeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Recipe::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| RecipeError::Unknown(s.to_string()))
    }
}

/// Sweep inputs. `base` supplies everything a recipe does not sweep.
#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub base: SystemConfig,
    pub workloads: Vec<WorkloadKind>,
    pub footprint: ByteSize,
    /// Target references per trace.
    pub records: u64,
    pub threads: u32,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            base: SystemConfig::default(),
            workloads: WorkloadKind::INDEXES.to_vec(),
            footprint: ByteSize(1 << 30),
            records: 2_000_000,
            threads: 1,
            seed: 1,
            jobs: 0,
        }
    }
}

impl SweepOptions {
    pub fn workload(&self, kind: WorkloadKind, threads: u32) -> Result<WorkloadSpec, WorkloadError> {
        let spec =
            WorkloadSpec { kind, footprint_bytes: self.footprint, seed: self.seed, threads, ..Default::default() };
        let ops = workloads::ops_for_records(&spec, self.records)?;
        Ok(WorkloadSpec { ops, ..spec })
    }

    pub fn trace(&self, kind: WorkloadKind, threads: u32) -> Result<Vec<TraceRecord>, WorkloadError> {
        workloads::generate(&self.workload(kind, threads)?, self.base.interleave_chunk)
    }

    fn pool(&self) -> Result<rayon::ThreadPool, RecipeError> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.jobs).build()?)
    }
}

/// Runs every config over `trace` on the pool; results keep input order.
pub fn run_all(
    pool: &rayon::ThreadPool,
    configs: &[SystemConfig],
    trace: &[TraceRecord],
) -> Result<Vec<RunStats>, EngineError> {
    pool.install(|| configs.par_iter().map(|c| Simulator::new(c)?.run_slice(trace)).collect())
}

/// `base` with the translation organisation replaced.
pub fn variant(base: &SystemConfig, mode: Mode, partitions: u32, page: PageSize, tlb: TlbSpec) -> SystemConfig {
    SystemConfig { mode, partitions, page_size: page, tlb, workload: None, trace: None, ..base.clone() }
}

fn four_way(entries: u32) -> TlbSpec {
    TlbSpec::new(entries, 4.min(entries))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TlbSweepRow {
    pub figure: &'static str,
    pub workload: String,
    pub mode: &'static str,
    pub partitions: u32,
    pub page_size: &'static str,
    /// Entries of each TLB (each partition's under SPARTA).
    pub tlb_entries: u32,
    pub miss_ratio: Option<f64>,
}

pub const SWEEP_ENTRIES: [u32; 10] = [4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048];

pub fn tlb_sweep(opts: &SweepOptions) -> Result<Vec<TlbSweepRow>, RecipeError> {
    let pool = opts.pool()?;
    let mut rows = Vec::new();
    let orgs = [(Mode::Conventional, 1), (Mode::Sparta, 4), (Mode::Sparta, 128)];
    for &kind in &opts.workloads {
        let trace = opts.trace(kind, opts.threads)?;
        let mut configs = Vec::new();
        for &(mode, p) in &orgs {
            for page in [PageSize::Small, PageSize::Huge] {
                for e in SWEEP_ENTRIES {
                    configs.push(variant(&opts.base, mode, p, page, four_way(e)));
                }
            }
        }
        for (c, s) in configs.iter().zip(run_all(&pool, &configs, &trace)?) {
            rows.push(TlbSweepRow {
                figure: Recipe::TlbSweep.figure(),
                workload: kind.to_string(),
                mode: c.mode.label(),
                partitions: c.effective_partitions(),
                page_size: c.page_size.label(),
                tlb_entries: c.tlb.entries,
                miss_ratio: s.translation_miss_ratio(),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContentionRow {
    pub figure: &'static str,
    pub workload: String,
    pub threads: u32,
    pub partitions: u32,
    pub miss_ratio: Option<f64>,
}

pub const CONTENTION_THREADS: [u32; 5] = [1, 2, 4, 8, 16];
pub const CONTENTION_PARTITIONS: [u32; 8] = [1, 2, 4, 8, 16, 32, 64, 128];

pub fn contention(opts: &SweepOptions) -> Result<Vec<ContentionRow>, RecipeError> {
    let pool = opts.pool()?;
    let mut rows = Vec::new();
    for &kind in &opts.workloads {
        for threads in CONTENTION_THREADS {
            let trace = opts.trace(kind, threads)?;
            let configs: Vec<_> = CONTENTION_PARTITIONS
                .iter()
                .map(|&p| variant(&opts.base, Mode::Sparta, p, opts.base.page_size, TlbSpec::new(128, 4)))
                .collect();
            for (c, s) in configs.iter().zip(run_all(&pool, &configs, &trace)?) {
                rows.push(ContentionRow {
                    figure: Recipe::Contention.figure(),
                    workload: kind.to_string(),
                    threads,
                    partitions: c.partitions,
                    miss_ratio: s.translation_miss_ratio(),
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PenaltyCsvRow {
    pub figure: &'static str,
    pub sockets: u32,
    pub channels_per_socket: u32,
    pub conv_penalty_ns: f64,
    pub sparta_penalty_ns: f64,
    /// SPARTA miss penalty over the conventional one.
    pub normalized: f64,
}

/// Analytic: 2-socket and 8-socket machines, one-reference walks.
pub fn penalty(opts: &SweepOptions) -> Vec<PenaltyCsvRow> {
    let topos = [Topology { sockets: 2, channels_per_socket: 4 }, Topology { sockets: 8, channels_per_socket: 4 }];
    normalized_miss_penalty(&topos, &opts.base.latency, 1.0)
        .into_iter()
        .zip(topos)
        .map(|(r, t)| PenaltyCsvRow {
            figure: Recipe::Penalty.figure(),
            sockets: r.sockets,
            channels_per_socket: t.channels_per_socket,
            conv_penalty_ns: r.conv_penalty,
            sparta_penalty_ns: r.sparta_penalty,
            normalized: r.ratio,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultiprogRow {
    pub figure: &'static str,
    pub stage: &'static str,
    pub threads: u32,
    pub partitions: u32,
    /// Miss ratio seen by the external-BST threads.
    pub observed_miss_ratio: Option<f64>,
    pub overall_miss_ratio: Option<f64>,
}

/// The schedule: external BST with 1, 2 and 4 threads, then 4 hash-table
/// threads added, then 4 internal-BST and 4 skip-list threads.
pub const MULTIPROG_STAGES: [(&str, &[(WorkloadKind, u32)]); 5] = [
    ("bst_external-1", &[(WorkloadKind::BstExternal, 1)]),
    ("bst_external-2", &[(WorkloadKind::BstExternal, 2)]),
    ("bst_external-4", &[(WorkloadKind::BstExternal, 4)]),
    ("plus-hash_table", &[(WorkloadKind::BstExternal, 4), (WorkloadKind::HashTable, 4)]),
    (
        "plus-bst_internal-skip_list",
        &[
            (WorkloadKind::BstExternal, 4),
            (WorkloadKind::HashTable, 4),
            (WorkloadKind::BstInternal, 4),
            (WorkloadKind::SkipList, 4),
        ],
    ),
];

pub fn multiprog(opts: &SweepOptions) -> Result<Vec<MultiprogRow>, RecipeError> {
    let pool = opts.pool()?;
    let app_footprint = ByteSize(opts.footprint.0 / 4);
    // Every thread performs the same number of searches in every stage.
    let probe = WorkloadSpec {
        kind: WorkloadKind::BstExternal,
        footprint_bytes: app_footprint,
        seed: opts.seed,
        ..Default::default()
    };
    let per_thread_ops = workloads::ops_for_records(&probe, opts.records / 4)?;
    let mut rows = Vec::new();
    for (stage, apps) in MULTIPROG_STAGES {
        let specs: Vec<WorkloadSpec> = apps
            .iter()
            .enumerate()
            .map(|(i, &(kind, threads))| WorkloadSpec {
                kind,
                footprint_bytes: app_footprint,
                ops: per_thread_ops * threads as u64,
                threads,
                seed: opts.seed.wrapping_add(i as u64),
                ..Default::default()
            })
            .collect();
        let per_thread =
            if specs.len() == 1 { workloads::generate_threads(&specs[0])? } else { workloads::gen_multiprog(&specs)? };
        let observed = apps[0].1 as usize;
        let trace = interleave(per_thread, opts.base.interleave_chunk);
        let configs: Vec<_> = CONTENTION_PARTITIONS
            .iter()
            .map(|&p| variant(&opts.base, Mode::Sparta, p, opts.base.page_size, TlbSpec::new(128, 4)))
            .collect();
        let threads: u32 = apps.iter().map(|a| a.1).sum();
        for (c, s) in configs.iter().zip(run_all(&pool, &configs, &trace)?) {
            let (mut hits, mut misses) = (0, 0);
            for t in s.threads.iter().take(observed) {
                hits += t.mem_tlb_hits;
                misses += t.mem_tlb_misses;
            }
            rows.push(MultiprogRow {
                figure: Recipe::Multiprog.figure(),
                stage,
                threads,
                partitions: c.partitions,
                observed_miss_ratio: (hits + misses > 0).then(|| misses as f64 / (hits + misses) as f64),
                overall_miss_ratio: s.translation_miss_ratio(),
            });
        }
    }
    Ok(rows)
}

fn result_row(
    recipe: Recipe,
    workload: &str,
    c: &SystemConfig,
    s: &RunStats,
    perf: Option<&CpiResult>,
    base: Option<&CpiResult>,
) -> ResultRow {
    ResultRow {
        figure: recipe.figure().to_string(),
        workload: workload.to_string(),
        mode: c.mode.label().to_string(),
        partitions: c.effective_partitions(),
        page_size: c.page_size.label().to_string(),
        tlb_entries: c.tlb.entries,
        accel_tlb_entries: if c.mode == Mode::Conventional { c.tlb.entries } else { c.accel_tlb.entries },
        cache: format!("{:?}", c.cache.kind).to_lowercase(),
        threads: s.threads.len() as u32,
        accesses: s.total.accesses,
        miss_ratio: s.translation_miss_ratio(),
        cache_miss_ratio: s.cache_miss_ratio(),
        exposed_share: s.exposed_share(),
        ns_per_insn: perf.map(|p| p.ns_per_insn),
        speedup: perf.zip(base).map(|(p, b)| speedup(b, p)),
    }
}

/// Configurations of the performance comparison, baseline first. Every TLB
/// takes the base config's geometry.
pub fn perf_configs(base: &SystemConfig, partitions: &[u32]) -> Vec<(String, SystemConfig)> {
    let tlb = base.tlb;
    let mut out = vec![
        ("conv-4k".to_string(), variant(base, Mode::Conventional, 1, PageSize::Small, tlb)),
        ("conv-2m".to_string(), variant(base, Mode::Conventional, 1, PageSize::Huge, tlb)),
    ];
    for &p in partitions {
        for page in [PageSize::Small, PageSize::Huge] {
            out.push((format!("sparta-{p}-{}", page.label()), variant(base, Mode::Sparta, p, page, tlb)));
        }
    }
    let p = partitions.iter().copied().max().unwrap_or(1);
    out.push(("ideal".to_string(), variant(base, Mode::Ideal, p, PageSize::Small, tlb)));
    out
}

pub const PERF_PARTITIONS: [u32; 4] = [4, 8, 32, 128];

/// Desk-scale machine of the performance study: 8 sockets of 4 channels.
pub fn perf_base(base: &SystemConfig) -> SystemConfig {
    SystemConfig { topology: Topology { sockets: 8, channels_per_socket: 4 }, ..base.clone() }
}

pub fn perf(opts: &SweepOptions) -> Result<Vec<ResultRow>, RecipeError> {
    let pool = opts.pool()?;
    let base = perf_base(&opts.base);
    let named = perf_configs(&base, &PERF_PARTITIONS);
    let configs: Vec<_> = named.iter().map(|(_, c)| c.clone()).collect();
    let mut kinds = opts.workloads.clone();
    if !kinds.contains(&WorkloadKind::Multiprog) {
        kinds.push(WorkloadKind::Multiprog);
    }
    let mut rows = Vec::new();
    for kind in kinds {
        let threads = if kind == WorkloadKind::Multiprog { opts.threads.max(4) } else { opts.threads };
        let trace = opts.trace(kind, threads)?;
        let stats = run_all(&pool, &configs, &trace)?;
        let perfs: Vec<CpiResult> = stats
            .iter()
            .zip(&configs)
            .map(|(s, c)| cpi(s, &c.cpi, &c.latency, &c.topology).expect("non-empty trace"))
            .collect();
        for ((c, s), p) in configs.iter().zip(&stats).zip(&perfs) {
            rows.push(result_row(Recipe::Perf, kind.label(), c, s, Some(p), Some(&perfs[0])));
        }
    }
    Ok(rows)
}

pub const ACCEL_TLB_ENTRIES: [u32; 8] = [1, 2, 4, 8, 16, 32, 64, 128];
pub const CACHE_SENS_PARTITIONS: u32 = 8;

/// Baseline (conventional TLB of the base geometry, physical cache), SPARTA with a
/// physical cache for each accelerator TLB size, then SPARTA with a virtual
/// cache and no accelerator translation.
pub fn cache_sens_configs(base: &SystemConfig, partitions: u32) -> Vec<SystemConfig> {
    let tlb = base.tlb;
    let mut physical = base.clone();
    physical.cache.kind = CacheKind::Physical;
    let mut out = vec![variant(&physical, Mode::Conventional, 1, base.page_size, tlb)];
    for e in ACCEL_TLB_ENTRIES {
        let mut c = variant(&physical, Mode::Sparta, partitions, base.page_size, tlb);
        c.accel_tlb = TlbSpec::fully_associative(e);
        out.push(c);
    }
    let mut c = variant(&physical, Mode::Sparta, partitions, base.page_size, tlb);
    c.cache.kind = CacheKind::Virtual;
    c.accel_tlb = TlbSpec::new(0, 0);
    out.push(c);
    out
}

pub fn cache_sens(opts: &SweepOptions) -> Result<Vec<ResultRow>, RecipeError> {
    let pool = opts.pool()?;
    let base = perf_base(&opts.base);
    let configs = cache_sens_configs(&base, CACHE_SENS_PARTITIONS);
    let mut rows = Vec::new();
    for &kind in &opts.workloads {
        let trace = opts.trace(kind, opts.threads)?;
        let stats = run_all(&pool, &configs, &trace)?;
        let perfs: Vec<CpiResult> = stats
            .iter()
            .zip(&configs)
            .map(|(s, c)| cpi(s, &c.cpi, &c.latency, &c.topology).expect("non-empty trace"))
            .collect();
        for ((c, s), p) in configs.iter().zip(&stats).zip(&perfs) {
            rows.push(result_row(Recipe::CacheSens, kind.label(), c, s, Some(p), Some(&perfs[0])));
        }
    }
    Ok(rows)
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, RecipeError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Runs a recipe and renders its CSV.
pub fn run_recipe(recipe: Recipe, opts: &SweepOptions) -> Result<String, RecipeError> {
    match recipe {
        Recipe::TlbSweep => to_csv(&tlb_sweep(opts)?),
        Recipe::Contention => to_csv(&contention(opts)?),
        Recipe::Penalty => to_csv(&penalty(opts)),
        Recipe::Multiprog => to_csv(&multiprog(opts)?),
        Recipe::Perf => to_csv(&perf(opts)?),
        Recipe::CacheSens => to_csv(&cache_sens(opts)?),
    }
}
