//! Trace-driven simulation core.
//!
//! Each trace thread runs on its own accelerator. Conventional mode gives
//! every accelerator a private TLB over a single global page table whose
//! walks cost one memory reference. SPARTA routes each request to the
//! partition owning its page, where a shared memory-side TLB and the
//! partition's inverted page table translate it next to the data.

pub mod cache;
pub mod trace;

use serde::Serialize;
use thiserror::Error;

use crate::addrspace::{Asid, PageGeometry, PageSize, Pfn, Vpn};
use crate::config::{ConfigError, SystemConfig, TlbSpec};
use crate::latency::{AccessCost, CacheKind, EventCounts, Mode};
use crate::osmm::{FaultKind, FaultStats, MemoryManager, MmError};
use crate::pte::PteFlags;
use crate::tlb::{TlbEntry, TlbHierarchy, TlbStats};
use crate::workloads::{self, WorkloadError};

use cache::Cache;
use trace::{TraceError, TraceReader, TraceRecord};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("record {index}: {source}")]
    Memory { index: u64, source: MmError },
    #[error("config names neither a workload nor a trace")]
    NoSource,
}

/// Counters of one accelerator, or their sum.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ThreadStats {
    pub accesses: u64,
    pub writes: u64,
    pub insns: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub accel_tlb_hits: u64,
    pub accel_tlb_misses: u64,
    pub mem_tlb_hits: u64,
    pub mem_tlb_misses: u64,
    pub ipt_walks: u64,
    pub ipt_probes: u64,
    pub ipt_mem_refs: u64,
    pub minor_faults: u64,
    pub major_faults: u64,
    pub cow_faults: u64,
    /// Sums over accesses, in ns, legs charged by their actual endpoints.
    pub latency_ns: f64,
    pub exposed_ns: f64,
    pub cost: AccessCost,
}

impl ThreadStats {
    pub fn merge(&mut self, o: &ThreadStats) {
        self.accesses += o.accesses;
        self.writes += o.writes;
        self.insns += o.insns;
        self.cache_hits += o.cache_hits;
        self.cache_misses += o.cache_misses;
        self.accel_tlb_hits += o.accel_tlb_hits;
        self.accel_tlb_misses += o.accel_tlb_misses;
        self.mem_tlb_hits += o.mem_tlb_hits;
        self.mem_tlb_misses += o.mem_tlb_misses;
        self.ipt_walks += o.ipt_walks;
        self.ipt_probes += o.ipt_probes;
        self.ipt_mem_refs += o.ipt_mem_refs;
        self.minor_faults += o.minor_faults;
        self.major_faults += o.major_faults;
        self.cow_faults += o.cow_faults;
        self.latency_ns += o.latency_ns;
        self.exposed_ns += o.exposed_ns;
        self.cost += o.cost;
    }

    pub fn page_faults(&self) -> u64 {
        self.minor_faults + self.major_faults
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunStats {
    pub mode: Mode,
    pub page_size: PageSize,
    pub partitions: u32,
    /// Records replayed, warmup included.
    pub records: u64,
    /// Records replayed before the counters were reset.
    pub warmup_records: u64,
    pub threads: Vec<ThreadStats>,
    pub total: ThreadStats,
    /// Memory-side TLB of each partition (empty in conventional mode).
    pub mem_tlb: Vec<TlbStats>,
    /// Memory manager totals over the whole run, warmup included.
    pub faults: FaultStats,
}

impl RunStats {
    /// Miss ratio of the structure that translates for the mode: accelerator
    /// TLBs under conventional translation, memory-side TLBs otherwise.
    pub fn translation_miss_ratio(&self) -> Option<f64> {
        let t = &self.total;
        let (hits, misses) = match self.mode {
            Mode::Conventional => (t.accel_tlb_hits, t.accel_tlb_misses),
            Mode::Sparta | Mode::Ideal => (t.mem_tlb_hits, t.mem_tlb_misses),
        };
        ratio(misses, hits + misses)
    }

    pub fn translation_misses(&self) -> u64 {
        match self.mode {
            Mode::Conventional => self.total.accel_tlb_misses,
            Mode::Sparta | Mode::Ideal => self.total.mem_tlb_misses,
        }
    }

    pub fn cache_miss_ratio(&self) -> Option<f64> {
        ratio(self.total.cache_misses, self.total.cache_hits + self.total.cache_misses)
    }

    pub fn mean_latency_ns(&self) -> Option<f64> {
        (self.total.accesses > 0).then(|| self.total.latency_ns / self.total.accesses as f64)
    }

    /// Exposed translation as a share of total latency.
    pub fn exposed_share(&self) -> Option<f64> {
        (self.total.latency_ns > 0.0).then(|| self.total.exposed_ns / self.total.latency_ns)
    }

    pub fn mean_walk_refs(&self) -> Option<f64> {
        (self.total.ipt_walks > 0).then(|| self.total.ipt_mem_refs as f64 / self.total.ipt_walks as f64)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Debug)]
struct Accel {
    tlb: Option<TlbHierarchy>,
    cache: Option<Cache>,
}

fn hierarchy(spec: &TlbSpec, page: PageSize, stride: u64) -> TlbHierarchy {
    let mut levels = spec.levels(page, stride).expect("validated TLB spec").into_iter();
    let l1 = levels.next().expect("one level");
    match levels.next() {
        Some(l2) => TlbHierarchy::two_level(l1, l2),
        None => TlbHierarchy::single(l1),
    }
    .expect("validated TLB spec")
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub struct Simulator {
    cfg: SystemConfig,
    geom: PageGeometry,
    mm: MemoryManager,
    accels: Vec<Accel>,
    mem_tlbs: Vec<TlbHierarchy>,
    stats: Vec<ThreadStats>,
    records: u64,
    warmup_records: u64,
}

impl Simulator {
    pub fn new(cfg: &SystemConfig) -> Result<Self, EngineError> {
        cfg.validate()?;
        let geom = cfg.geometry()?;
        let ipt = cfg.sparta_like().then_some(cfg.ipt);
        let mm = MemoryManager::new(geom, ipt, cfg.seed).map_err(|source| EngineError::Memory { index: 0, source })?;
        let p = geom.partition_count();
        let mem_tlbs = if cfg.sparta_like() {
            (0..p).map(|_| hierarchy(&cfg.tlb, cfg.page_size, p as u64)).collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            cfg: cfg.clone(),
            geom,
            mm,
            accels: Vec::new(),
            mem_tlbs,
            stats: Vec::new(),
            records: 0,
            warmup_records: 0,
        })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.cfg
    }

    pub fn memory(&self) -> &MemoryManager {
        &self.mm
    }

    /// Harness access for setting up shared regions before a run.
    pub fn memory_mut(&mut self) -> &mut MemoryManager {
        &mut self.mm
    }

    pub fn mem_tlbs(&self) -> &[TlbHierarchy] {
        &self.mem_tlbs
    }

    pub fn accel_tlb(&self, thread: u16) -> Option<&TlbHierarchy> {
        self.accels.get(thread as usize).and_then(|a| a.tlb.as_ref())
    }

    fn accel_tlb_spec(&self) -> Option<TlbSpec> {
        match self.cfg.mode {
            Mode::Conventional => Some(self.cfg.tlb),
            _ if self.cfg.accel_tlb.entries > 0 => Some(self.cfg.accel_tlb),
            _ => None,
        }
    }

    fn ensure_thread(&mut self, t: usize) {
        while self.accels.len() <= t {
            let tlb = self.accel_tlb_spec().map(|s| hierarchy(&s, self.cfg.page_size, 1));
            let cache =
                (self.cfg.cache.kind != CacheKind::None).then(|| Cache::new(self.cfg.cache).expect("validated cache"));
            self.accels.push(Accel { tlb, cache });
            self.stats.push(ThreadStats::default());
        }
    }

    /// Zeroes every counter while keeping TLB, cache and memory contents.
    pub fn reset_stats(&mut self) {
        for s in &mut self.stats {
            *s = ThreadStats::default();
        }
        for t in &mut self.mem_tlbs {
            t.reset_stats();
        }
        for a in &mut self.accels {
            if let Some(t) = &mut a.tlb {
                t.reset_stats();
            }
        }
        self.warmup_records = self.records;
    }

    /// Replays `records`, resetting the counters after the configured warmup
    /// fraction of `len` records when the length is known.
    pub fn run<I>(&mut self, records: I, len: Option<u64>) -> Result<RunStats, EngineError>
    where
        I: IntoIterator<Item = Result<TraceRecord, TraceError>>,
    {
        let warmup = len.map(|n| (n as f64 * self.cfg.warmup_fraction).floor() as u64).filter(|&w| w > 0);
        for (i, r) in records.into_iter().enumerate() {
            if Some(i as u64) == warmup {
                self.reset_stats();
            }
            self.step(&r?)?;
        }
        Ok(self.finish())
    }

    pub fn run_slice(&mut self, records: &[TraceRecord]) -> Result<RunStats, EngineError> {
        self.run(records.iter().copied().map(Ok), Some(records.len() as u64))
    }

    /// Current counters.
    pub fn finish(&self) -> RunStats {
        let mut total = ThreadStats::default();
        for s in &self.stats {
            total.merge(s);
        }
        RunStats {
            mode: self.cfg.mode,
            page_size: self.cfg.page_size,
            partitions: self.geom.partition_count(),
            records: self.records,
            warmup_records: self.warmup_records,
            threads: self.stats.clone(),
            total,
            mem_tlb: self.mem_tlbs.iter().map(|t| *t.stats()).collect(),
            faults: *self.mm.stats(),
        }
    }

    /// Processes one record.
    pub fn step(&mut self, r: &TraceRecord) -> Result<(), EngineError> {
        let index = self.records;
        self.records += 1;
        let t = r.thread as usize;
        self.ensure_thread(t);
        let (vpn, _) = self.geom.split(r.vaddr);
        {
            let s = &mut self.stats[t];
            s.accesses += 1;
            s.insns += r.insns_since_prev as u64;
            s.writes += u64::from(r.is_write);
        }
        if r.is_write {
            self.write_fault(t, r.asid, vpn, r).map_err(|source| EngineError::Memory { index, source })?;
        }
        let (mut cost, pfn) = match self.cfg.mode {
            Mode::Conventional => self.conventional(t, r),
            Mode::Sparta | Mode::Ideal => self.sparta(t, r),
        }
        .map_err(|source| EngineError::Memory { index, source })?;
        self.mm.mark_referenced(pfn);
        if self.cfg.mode == Mode::Ideal {
            cost.total = cost.total - cost.exposed;
            cost.exposed = EventCounts::default();
        }
        let (latency, exposed) = cost.eval(&self.cfg.latency);
        let s = &mut self.stats[t];
        s.latency_ns += latency;
        s.exposed_ns += exposed;
        s.cost += cost;
        Ok(())
    }

    fn socket(&self, t: usize) -> u32 {
        t as u32 % self.cfg.topology.sockets
    }

    fn frame_remote(&self, t: usize, pfn: Pfn) -> bool {
        self.cfg.topology.socket_of_frame(pfn, self.geom.total_frames()) != self.socket(t)
    }

    fn physical_tag(&self, cache: &Cache, pfn: Pfn, r: &TraceRecord) -> u64 {
        let off = r.vaddr.get() & (self.geom.page_size().bytes() - 1);
        cache.physical_tag((pfn << self.geom.page_size().shift()) | off)
    }

    /// Resolves a translation through the memory manager, faulting the page
    /// in and shooting down whatever it displaced.
    fn page_in(&mut self, t: usize, asid: Asid, vpn: Vpn) -> Result<Pfn, MmError> {
        let f = self.mm.demand_page(asid, vpn)?;
        match f.kind {
            FaultKind::Resident => {}
            FaultKind::Minor => self.stats[t].minor_faults += 1,
            FaultKind::Major => self.stats[t].major_faults += 1,
        }
        if let Some(ev) = f.evicted {
            self.drop_translation(ev.asid, ev.vpn);
            self.drop_virtual_lines(ev.asid, ev.vpn);
            self.drop_physical_lines(ev.pfn);
        }
        Ok(f.pfn)
    }

    fn drop_translation(&mut self, asid: Asid, vpn: Vpn) {
        if !self.mem_tlbs.is_empty() {
            let p = self.geom.partition_of_vpn(vpn) as usize;
            self.mem_tlbs[p].invalidate(vpn, asid);
        }
        for a in &mut self.accels {
            if let Some(tlb) = &mut a.tlb {
                tlb.invalidate(vpn, asid);
            }
        }
    }

    fn drop_virtual_lines(&mut self, asid: Asid, vpn: Vpn) {
        if self.cfg.cache.kind != CacheKind::Virtual {
            return;
        }
        let shift = self.geom.page_size().shift();
        for c in self.accels.iter_mut().filter_map(|a| a.cache.as_mut()) {
            let lo = c.virtual_tag(asid.get(), vpn << shift);
            let hi = c.virtual_tag(asid.get(), (vpn + 1) << shift);
            c.invalidate_range(lo..hi);
        }
    }

    fn drop_physical_lines(&mut self, pfn: Pfn) {
        if self.cfg.cache.kind != CacheKind::Physical {
            return;
        }
        let shift = self.geom.page_size().shift();
        for c in self.accels.iter_mut().filter_map(|a| a.cache.as_mut()) {
            let lo = c.physical_tag(pfn << shift);
            let hi = c.physical_tag((pfn + 1) << shift);
            c.invalidate_range(lo..hi);
        }
    }

    /// A write to a read-only shared page takes a copy-on-write fault before
    /// the access proceeds.
    fn write_fault(&mut self, t: usize, asid: Asid, vpn: Vpn, r: &TraceRecord) -> Result<(), MmError> {
        let Some(m) = self.mm.translate(asid, vpn) else { return Ok(()) };
        if m.flags.contains(PteFlags::WRITE) {
            return Ok(());
        }
        let f = self.mm.cow_fault(asid, r.vaddr)?;
        if f.pfn != m.pfn {
            self.stats[t].cow_faults += 1;
        }
        // Cached translations carry the old permissions or frame.
        self.drop_translation(asid, vpn);
        self.drop_virtual_lines(asid, vpn);
        if let Some(ev) = f.evicted {
            self.drop_translation(ev.asid, ev.vpn);
            self.drop_virtual_lines(ev.asid, ev.vpn);
            self.drop_physical_lines(ev.pfn);
        }
        Ok(())
    }

    fn entry(&self, asid: Asid, vpn: Vpn, pfn: Pfn) -> TlbEntry {
        let flags = self.mm.translate(asid, vpn).map_or(PteFlags::rw(), |m| m.flags);
        TlbEntry { vpn, asid, pfn, flags }
    }

    fn virtual_cache_hit(&mut self, t: usize, r: &TraceRecord, cost: &mut AccessCost) -> bool {
        let Some(c) = self.accels[t].cache.as_mut() else { return false };
        if self.cfg.cache.kind != CacheKind::Virtual {
            return false;
        }
        cost.total.cache += 1;
        let hit = c.access(c.virtual_tag(r.asid.get(), r.vaddr.get()));
        if hit {
            self.stats[t].cache_hits += 1;
        } else {
            self.stats[t].cache_misses += 1;
        }
        hit
    }

    fn physical_cache_hit(&mut self, t: usize, pfn: Pfn, r: &TraceRecord, cost: &mut AccessCost) -> bool {
        if self.cfg.cache.kind != CacheKind::Physical {
            return false;
        }
        let tag = {
            let c = self.accels[t].cache.as_ref().expect("cache present");
            self.physical_tag(c, pfn, r)
        };
        cost.total.cache += 1;
        let hit = self.accels[t].cache.as_mut().expect("cache present").access(tag);
        if hit {
            self.stats[t].cache_hits += 1;
        } else {
            self.stats[t].cache_misses += 1;
        }
        hit
    }

    fn conventional(&mut self, t: usize, r: &TraceRecord) -> Result<(AccessCost, Pfn), MmError> {
        let mut cost = AccessCost::default();
        let (vpn, _) = self.geom.split(r.vaddr);
        if self.virtual_cache_hit(t, r, &mut cost) {
            let pfn = self.mm.translate(r.asid, vpn).map_or_else(|| self.page_in(t, r.asid, vpn), |m| Ok(m.pfn))?;
            return Ok((cost, pfn));
        }
        cost.total.tlb_probes += 1;
        cost.exposed.tlb_probes += 1;
        let tlb = self.accels[t].tlb.as_mut().expect("conventional accelerators have a TLB");
        let pfn = match tlb.lookup(vpn, r.asid) {
            Some(pfn) => {
                self.stats[t].accel_tlb_hits += 1;
                pfn
            }
            None => {
                self.stats[t].accel_tlb_misses += 1;
                let pfn = self.page_in(t, r.asid, vpn)?;
                // Perfect MMU caches leave one reference to the leaf PTE, which
                // lives on a channel picked by hashing the page.
                let channel =
                    (splitmix(vpn ^ ((r.asid.get() as u64) << 40)) % self.cfg.topology.channels() as u64) as u32;
                let walk_remote = self.cfg.topology.socket_of_channel(channel) != self.socket(t);
                let mut walk = EventCounts { dram: 1, ..Default::default() };
                walk.add_legs(walk_remote, 2);
                cost.total += walk;
                cost.exposed += walk;
                let e = self.entry(r.asid, vpn, pfn);
                self.accels[t].tlb.as_mut().expect("tlb").fill(e);
                pfn
            }
        };
        if self.physical_cache_hit(t, pfn, r, &mut cost) {
            return Ok((cost, pfn));
        }
        cost.total.dram += 1;
        cost.total.add_legs(self.frame_remote(t, pfn), 2);
        Ok((cost, pfn))
    }

    fn sparta(&mut self, t: usize, r: &TraceRecord) -> Result<(AccessCost, Pfn), MmError> {
        let mut cost = AccessCost::default();
        let (vpn, _) = self.geom.split(r.vaddr);
        if self.virtual_cache_hit(t, r, &mut cost) {
            let pfn = self.mm.translate(r.asid, vpn).map_or_else(|| self.page_in(t, r.asid, vpn), |m| Ok(m.pfn))?;
            return Ok((cost, pfn));
        }
        let mut known = None;
        if let Some(tlb) = self.accels[t].tlb.as_mut() {
            cost.total.tlb_probes += 1;
            cost.exposed.tlb_probes += 1;
            known = tlb.lookup(vpn, r.asid);
            if known.is_some() {
                self.stats[t].accel_tlb_hits += 1;
            } else {
                self.stats[t].accel_tlb_misses += 1;
            }
        }
        let physical = self.cfg.cache.kind == CacheKind::Physical;
        if let Some(pfn) = known {
            if self.physical_cache_hit(t, pfn, r, &mut cost) {
                return Ok((cost, pfn));
            }
        } else if physical {
            // Without a translation the physical cache cannot be probed.
            self.stats[t].cache_misses += 1;
        }
        cost.total.mux += 1;
        cost.total.dram += 1;
        let pfn = match known {
            // Physical request: the accelerator already translated.
            Some(pfn) => pfn,
            None => {
                cost.total.tlb_probes += 1;
                cost.exposed.tlb_probes += 1;
                let p = self.geom.partition_of_vpn(vpn);
                let pfn = match self.mem_tlbs[p as usize].lookup(vpn, r.asid) {
                    Some(pfn) => {
                        self.stats[t].mem_tlb_hits += 1;
                        pfn
                    }
                    None => {
                        self.stats[t].mem_tlb_misses += 1;
                        let walk = self.mm.partition(p).ipt().expect("partitions carry an IPT").walk(vpn, r.asid);
                        let s = &mut self.stats[t];
                        s.ipt_walks += 1;
                        s.ipt_probes += walk.probes as u64;
                        s.ipt_mem_refs += walk.mem_refs as u64;
                        cost.total.dram += walk.mem_refs as u64;
                        cost.exposed.dram += walk.mem_refs as u64;
                        let pfn = match walk.pfn {
                            Some(pfn) => pfn,
                            None => self.page_in(t, r.asid, vpn)?,
                        };
                        assert_eq!(
                            self.geom.frame_partition(pfn).ok(),
                            Some(p),
                            "page {vpn:#x} resolved outside its partition"
                        );
                        let e = self.entry(r.asid, vpn, pfn);
                        self.mem_tlbs[p as usize].fill(e);
                        pfn
                    }
                };
                // The response carries the PTE back to the accelerator.
                if self.accels[t].tlb.is_some() {
                    let e = self.entry(r.asid, vpn, pfn);
                    self.accels[t].tlb.as_mut().expect("tlb").fill(e);
                }
                if physical {
                    let c = self.accels[t].cache.as_ref().expect("cache present");
                    let tag = self.physical_tag(c, pfn, r);
                    self.accels[t].cache.as_mut().expect("cache present").fill(tag);
                }
                pfn
            }
        };
        cost.total.add_legs(self.frame_remote(t, pfn), 2);
        Ok((cost, pfn))
    }

    /// Cross-structure consistency: memory manager invariants, and every
    /// cached translation matching a live mapping in the right partition.
    pub fn check_consistency(&self) -> Result<(), String> {
        self.mm.check_invariants()?;
        for (p, tlb) in self.mem_tlbs.iter().enumerate() {
            for e in tlb.entries() {
                if self.geom.frame_partition(e.pfn).ok() != Some(p as u32) {
                    return Err(format!("partition {p} TLB holds frame {} of another partition", e.pfn));
                }
                if self.mm.translate(e.asid, e.vpn).map(|m| m.pfn) != Some(e.pfn) {
                    return Err(format!("partition {p} TLB holds stale vpn {:#x}", e.vpn));
                }
            }
        }
        for (t, a) in self.accels.iter().enumerate() {
            for e in a.tlb.iter().flat_map(|h| h.entries()) {
                if self.mm.translate(e.asid, e.vpn).map(|m| m.pfn) != Some(e.pfn) {
                    return Err(format!("accelerator {t} TLB holds stale vpn {:#x}", e.vpn));
                }
            }
        }
        Ok(())
    }
}

/// Runs the workload or trace named by `cfg`.
pub fn run_config(cfg: &SystemConfig) -> Result<RunStats, EngineError> {
    let mut sim = Simulator::new(cfg)?;
    match (&cfg.workload, &cfg.trace) {
        (Some(w), _) => {
            let records = workloads::generate(w, cfg.interleave_chunk)?;
            sim.run_slice(&records)
        }
        (None, Some(path)) => {
            let reader = TraceReader::open(path)?;
            let len = reader.len_hint();
            sim.run(reader, len)
        }
        (None, None) => Err(EngineError::NoSource),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addrspace::VirtualAddress;
    use crate::size::ByteSize;

    fn rec(thread: u16, asid: u32, vaddr: u64) -> TraceRecord {
        TraceRecord::read(thread, Asid::new(asid).unwrap(), VirtualAddress::new(vaddr).unwrap())
    }

    fn base(mode: Mode, partitions: u32, tlb: TlbSpec) -> SystemConfig {
        SystemConfig {
            mode,
            partitions,
            memory_bytes: ByteSize(64 << 20),
            tlb,
            warmup_fraction: 0.0,
            ..Default::default()
        }
    }

    /// Each of `pages` touched `rounds` times, in page order.
    fn sweep(pages: u64, rounds: usize) -> Vec<TraceRecord> {
        (0..rounds).flat_map(|_| (0..pages).map(|v| rec(0, 1, v << 12 | 0x40))).collect()
    }

    #[test]
    fn empty_trace_gives_zero_stats() {
        let mut sim = Simulator::new(&base(Mode::Sparta, 4, TlbSpec::default())).unwrap();
        let s = sim.run_slice(&[]).unwrap();
        assert_eq!(s.total, ThreadStats::default());
        assert_eq!(s.records, 0);
        assert_eq!(s.translation_miss_ratio(), None);
    }

    #[test]
    fn reach_covering_tlb_only_misses_cold() {
        let trace = sweep(200, 5);
        let mut sim = Simulator::new(&base(Mode::Conventional, 1, TlbSpec::fully_associative(256))).unwrap();
        let s = sim.run_slice(&trace).unwrap();
        assert_eq!(s.total.accel_tlb_misses, 200);
        assert_eq!(s.total.minor_faults, 200);
    }

    #[test]
    fn sharded_reach_matches_global_reach() {
        let trace = sweep(256, 4);
        let conv = Simulator::new(&base(Mode::Conventional, 1, TlbSpec::fully_associative(256)))
            .unwrap()
            .run_slice(&trace)
            .unwrap();
        let sparta =
            Simulator::new(&base(Mode::Sparta, 4, TlbSpec::fully_associative(64))).unwrap().run_slice(&trace).unwrap();
        assert_eq!(conv.translation_misses(), 256);
        assert_eq!(sparta.translation_misses(), 256);
        assert!(sparta.mem_tlb.iter().all(|t| t.misses == 64));
    }

    #[test]
    fn one_partition_matches_conventional_miss_counts() {
        let mut rng = 12345u64;
        let trace: Vec<_> = (0..20_000)
            .map(|_| {
                rng = splitmix(rng);
                rec(0, 1, (rng % 3000) << 12)
            })
            .collect();
        let spec = TlbSpec::new(256, 4);
        let conv = Simulator::new(&base(Mode::Conventional, 1, spec)).unwrap().run_slice(&trace).unwrap();
        let sparta = Simulator::new(&base(Mode::Sparta, 1, spec)).unwrap().run_slice(&trace).unwrap();
        assert_eq!(conv.total.accel_tlb_misses, sparta.total.mem_tlb_misses);
        assert_eq!(conv.total.accel_tlb_hits, sparta.total.mem_tlb_hits);
    }

    #[test]
    fn shared_pages_are_not_replicated_in_memory_tlbs() {
        let trace = vec![rec(0, 1, 0x5000), rec(1, 1, 0x5008), rec(2, 1, 0x5010)];
        let mut sparta = Simulator::new(&base(Mode::Sparta, 4, TlbSpec::default())).unwrap();
        sparta.run_slice(&trace).unwrap();
        let held: usize = sparta.mem_tlbs().iter().map(|t| t.entries().count()).sum();
        assert_eq!(held, 1);
        let mut conv = Simulator::new(&base(Mode::Conventional, 1, TlbSpec::default())).unwrap();
        conv.run_slice(&trace).unwrap();
        for t in 0..3 {
            assert_eq!(conv.accel_tlb(t).unwrap().entries().count(), 1);
        }
    }

    #[test]
    fn cold_misses_agree_across_modes() {
        let w = crate::workloads::WorkloadSpec::new(crate::workloads::WorkloadKind::SkipList, 16 << 20, 2000, 3)
            .with_threads(2);
        let trace = crate::workloads::generate(&w, 1).unwrap();
        let faults: Vec<u64> = [Mode::Conventional, Mode::Sparta, Mode::Ideal]
            .into_iter()
            .map(|m| {
                Simulator::new(&base(m, 4, TlbSpec::default())).unwrap().run_slice(&trace).unwrap().total.minor_faults
            })
            .collect();
        assert_eq!(faults[0], crate::workloads::distinct_pages(&trace, PageSize::Small) as u64);
        assert!(faults.iter().all(|&f| f == faults[0]));
    }

    #[test]
    fn deterministic_and_exposed_bounded() {
        let w = crate::workloads::WorkloadSpec::new(crate::workloads::WorkloadKind::BstExternal, 8 << 20, 3000, 9)
            .with_threads(4);
        let trace = crate::workloads::generate(&w, 2).unwrap();
        for mode in [Mode::Conventional, Mode::Sparta, Mode::Ideal] {
            for kind in [CacheKind::None, CacheKind::Virtual, CacheKind::Physical] {
                let mut cfg = base(mode, 4, TlbSpec::new(64, 4));
                cfg.cache.kind = kind;
                if mode != Mode::Conventional && kind == CacheKind::Physical {
                    cfg.accel_tlb = TlbSpec::new(8, 0);
                }
                cfg.warmup_fraction = 0.1;
                let a = Simulator::new(&cfg).unwrap().run_slice(&trace).unwrap();
                let b = Simulator::new(&cfg).unwrap().run_slice(&trace).unwrap();
                assert_eq!(a, b);
                assert!(a.total.exposed_ns <= a.total.latency_ns);
                if mode == Mode::Ideal {
                    assert_eq!(a.total.exposed_ns, 0.0);
                }
                if kind != CacheKind::None {
                    assert_eq!(a.total.accesses, a.total.cache_hits + a.total.cache_misses, "{mode:?} {kind:?}");
                }
                let mut sum = ThreadStats::default();
                a.threads.iter().for_each(|t| sum.merge(t));
                assert_eq!(sum, a.total);
            }
        }
    }

    #[test]
    fn virtual_cache_needs_no_accelerator_translation() {
        let mut cfg = base(Mode::Sparta, 4, TlbSpec::default());
        cfg.cache.kind = CacheKind::Virtual;
        let trace = sweep(4, 3);
        let s = Simulator::new(&cfg).unwrap().run_slice(&trace).unwrap();
        assert_eq!(s.total.accel_tlb_hits + s.total.accel_tlb_misses, 0);
        // Only cache misses reach the memory-side TLB.
        assert_eq!(s.total.mem_tlb_hits + s.total.mem_tlb_misses, s.total.cache_misses);
        assert!(s.total.cache_hits > 0);
    }

    #[test]
    fn conventional_hit_skips_the_walk() {
        let trace = [rec(0, 1, 0x1000), rec(0, 1, 0x1008)];
        let mut sim = Simulator::new(&base(Mode::Conventional, 1, TlbSpec::default())).unwrap();
        sim.step(&trace[0]).unwrap();
        let before = sim.finish().total.cost.exposed;
        sim.step(&trace[1]).unwrap();
        let after = sim.finish().total.cost.exposed;
        assert_eq!(after - before, EventCounts { tlb_probes: 1, ..Default::default() });
    }

    #[test]
    fn overcommit_keeps_structures_consistent() {
        // 4 MiB of memory under a 16 MiB workload forces evictions.
        let w = crate::workloads::WorkloadSpec::new(crate::workloads::WorkloadKind::HashTable, 16 << 20, 5000, 5)
            .with_threads(2);
        let trace = crate::workloads::generate(&w, 1).unwrap();
        for (mode, kind) in [
            (Mode::Conventional, CacheKind::Physical),
            (Mode::Sparta, CacheKind::Physical),
            (Mode::Sparta, CacheKind::Virtual),
        ] {
            let mut cfg = base(mode, 4, TlbSpec::new(64, 4));
            cfg.memory_bytes = ByteSize(4 << 20);
            cfg.cache.kind = kind;
            if mode == Mode::Sparta && kind == CacheKind::Physical {
                cfg.accel_tlb = TlbSpec::new(16, 0);
            }
            let mut sim = Simulator::new(&cfg).unwrap();
            let s = sim.run_slice(&trace).unwrap();
            assert!(s.faults.evictions > 0);
            assert!(s.total.major_faults > 0);
            sim.check_consistency().unwrap();
        }
    }

    #[test]
    fn copy_on_write_through_the_pipeline() {
        let cfg = base(Mode::Sparta, 4, TlbSpec::default());
        let mut sim = Simulator::new(&cfg).unwrap();
        let a = Asid::new(1).unwrap();
        let b = Asid::new(2).unwrap();
        sim.step(&rec(0, 1, 0x8000)).unwrap();
        let pfn = sim.memory().translate(a, 8).unwrap().pfn;
        let range = sim.memory_mut().map_shared(b, &[pfn], 8, crate::osmm::SharePolicy::CopyOnWrite).unwrap();
        assert_eq!(range, 8..9);
        sim.step(&rec(1, 2, 0x8000)).unwrap();
        let mut w = rec(1, 2, 0x8010);
        w.is_write = true;
        sim.step(&w).unwrap();
        let copy = sim.memory().translate(b, 8).unwrap().pfn;
        assert_ne!(copy, pfn);
        assert_eq!(sim.finish().total.cow_faults, 1);
        sim.check_consistency().unwrap();
    }

    #[test]
    fn warmup_resets_counters() {
        let mut cfg = base(Mode::Conventional, 1, TlbSpec::fully_associative(512));
        cfg.warmup_fraction = 0.5;
        let trace = sweep(100, 4);
        let s = Simulator::new(&cfg).unwrap().run_slice(&trace).unwrap();
        assert_eq!(s.warmup_records, 200);
        assert_eq!(s.total.accesses, 200);
        assert_eq!(s.total.accel_tlb_misses, 0);
        assert_eq!(s.faults.minor_faults, 100);
    }
}
