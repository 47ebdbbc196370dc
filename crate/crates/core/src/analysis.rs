//! CPI performance model and 3C miss classification.

use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addrspace::PageSize;
use crate::engine::trace::TraceRecord;
use crate::engine::RunStats;
use crate::latency::{LatencyParams, Topology};
use crate::lru::SetAssocLru;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("CPI is undefined for a run without accesses")]
    NoAccesses,
    #[error("3C classification needs a non-empty trace")]
    EmptyTrace,
    #[error("invalid structure: {0}")]
    Geometry(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpiParams {
    /// Cycles per non-memory instruction.
    pub base_cpi: f64,
    pub cycle_time_ns: f64,
    /// Memory operations per instruction; measured from the trace when unset.
    pub mem_op_fraction: Option<f64>,
}

impl Default for CpiParams {
    fn default() -> Self {
        Self { base_cpi: 1.0, cycle_time_ns: 0.5, mem_op_fraction: None }
    }
}

impl CpiParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_cpi >= 1.0 && self.base_cpi.is_finite()) {
            return Err(format!("base_cpi must be at least 1, got {}", self.base_cpi));
        }
        if !(self.cycle_time_ns > 0.0 && self.cycle_time_ns.is_finite()) {
            return Err(format!("cycle_time_ns must be positive, got {}", self.cycle_time_ns));
        }
        if let Some(f) = self.mem_op_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(format!("mem_op_fraction must lie in (0, 1], got {f}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CpiResult {
    pub mem_op_fraction: f64,
    /// Mean access latency with network legs charged at the topology mean.
    pub mean_access_ns: f64,
    pub mean_exposed_ns: f64,
    pub ns_per_insn: f64,
    pub cpi: f64,
}

impl CpiResult {
    /// Translation's contribution to ns per instruction.
    pub fn translation_ns_per_insn(&self) -> f64 {
        self.mem_op_fraction * self.mean_exposed_ns
    }
}

pub fn cpi(
    stats: &RunStats,
    params: &CpiParams,
    lat: &LatencyParams,
    topo: &Topology,
) -> Result<CpiResult, AnalysisError> {
    let t = &stats.total;
    if t.accesses == 0 {
        return Err(AnalysisError::NoAccesses);
    }
    let n = t.accesses as f64;
    let f = params.mem_op_fraction.unwrap_or(n / (n + t.insns as f64));
    let mean_access_ns = t.cost.total.eval_mean(lat, topo) / n;
    let mean_exposed_ns = t.cost.exposed.eval_mean(lat, topo) / n;
    let ns_per_insn = params.base_cpi * params.cycle_time_ns * (1.0 - f) + f * mean_access_ns;
    Ok(CpiResult {
        mem_op_fraction: f,
        mean_access_ns,
        mean_exposed_ns,
        ns_per_insn,
        cpi: ns_per_insn / params.cycle_time_ns,
    })
}

/// Baseline time per instruction over the candidate's.
pub fn speedup(baseline: &CpiResult, candidate: &CpiResult) -> f64 {
    baseline.ns_per_insn / candidate.ns_per_insn
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ThreeCBreakdown {
    pub accesses: u64,
    pub compulsory: u64,
    pub capacity: u64,
    pub conflict: u64,
}

impl ThreeCBreakdown {
    pub fn misses(&self) -> u64 {
        self.compulsory + self.capacity + self.conflict
    }
}

/// Classifies the misses of an LRU structure of `entries` items in sets of
/// `ways` over a stream of `(set_key, key)` pairs; the set is
/// `set_key % sets`. A miss is compulsory on first touch, capacity if a
/// fully associative LRU structure of equal size also misses, and conflict
/// otherwise.
pub fn classify_keys(
    keys: impl IntoIterator<Item = (u64, u64)>,
    entries: usize,
    ways: usize,
) -> Result<ThreeCBreakdown, AnalysisError> {
    if entries == 0 || ways == 0 || !entries.is_multiple_of(ways) {
        return Err(AnalysisError::Geometry(format!("{entries} entries in sets of {ways}")));
    }
    let sets = entries / ways;
    let mut actual: SetAssocLru<u64, ()> = SetAssocLru::new(sets, ways);
    let mut oracle: SetAssocLru<u64, ()> = SetAssocLru::new(1, entries);
    let mut seen = FxHashSet::default();
    let mut out = ThreeCBreakdown::default();
    for (set_key, key) in keys {
        out.accesses += 1;
        let first = seen.insert(key);
        let fa_hit = oracle.get(&key).is_some();
        if !fa_hit {
            oracle.insert(0, key, ());
        }
        if actual.get(&key).is_some() {
            continue;
        }
        actual.insert((set_key % sets as u64) as usize, key, ());
        if first {
            out.compulsory += 1;
        } else if !fa_hit {
            out.capacity += 1;
        } else {
            out.conflict += 1;
        }
    }
    Ok(out)
}

/// 3C breakdown of a TLB of `entries` x `ways` over the pages of `trace`.
pub fn classify_3c(
    trace: &[TraceRecord],
    entries: usize,
    ways: usize,
    page: PageSize,
) -> Result<ThreeCBreakdown, AnalysisError> {
    if trace.is_empty() {
        return Err(AnalysisError::EmptyTrace);
    }
    let keys = trace.iter().map(|r| {
        let vpn = r.vaddr.get() >> page.shift();
        (vpn, ((r.asid.get() as u64) << 36) | vpn)
    });
    classify_keys(keys, entries, ways)
}

/// One CSV row per simulated configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub figure: String,
    pub workload: String,
    pub mode: String,
    pub partitions: u32,
    pub page_size: String,
    pub tlb_entries: u32,
    pub accel_tlb_entries: u32,
    pub cache: String,
    pub threads: u32,
    pub accesses: u64,
    pub miss_ratio: Option<f64>,
    pub cache_miss_ratio: Option<f64>,
    pub exposed_share: Option<f64>,
    pub ns_per_insn: Option<f64>,
    pub speedup: Option<f64>,
}
