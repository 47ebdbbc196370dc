//! Set-associative TLB with per-set LRU replacement.
//!
//! The same model serves as an accelerator-side TLB, a memory-side
//! per-partition TLB, or one level of a two-level hierarchy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addrspace::{Asid, PageSize, Pfn, Vpn};
use crate::lru::SetAssocLru;
use crate::pte::PteFlags;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TlbError {
    #[error("invalid TLB geometry: {0}")]
    Geometry(String),
    #[error("miss ratio is undefined without lookups")]
    UndefinedRatio,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TlbEntry {
    pub vpn: Vpn,
    pub asid: Asid,
    pub pfn: Pfn,
    pub flags: PteFlags,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Cached {
    pfn: Pfn,
    flags: PteFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlbConfig {
    pub entries: usize,
    pub ways: usize,
    pub page_size: PageSize,
    /// Divisor applied to the VPN before set selection. Memory-side TLBs use
    /// the partition count so the partition-selector bits are not reused as
    /// set-index bits.
    #[serde(default = "one")]
    pub index_stride: u64,
}

fn one() -> u64 {
    1
}

impl TlbConfig {
    pub fn new(entries: usize, ways: usize, page_size: PageSize) -> Result<Self, TlbError> {
        let cfg = Self { entries, ways, page_size, index_stride: 1 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fully_associative(entries: usize, page_size: PageSize) -> Result<Self, TlbError> {
        Self::new(entries, entries, page_size)
    }

    pub fn with_index_stride(mut self, stride: u64) -> Self {
        self.index_stride = stride.max(1);
        self
    }

    pub fn validate(&self) -> Result<(), TlbError> {
        if self.ways == 0 || self.entries == 0 {
            return Err(TlbError::Geometry(format!(
                "entries ({}) and ways ({}) must be positive",
                self.entries, self.ways
            )));
        }
        if !self.entries.is_multiple_of(self.ways) {
            return Err(TlbError::Geometry(format!(
                "entries ({}) must be a multiple of ways ({})",
                self.entries, self.ways
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn sets(&self) -> usize {
        self.entries / self.ways
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlbStats {
    pub lookups: u64,
    pub hits: u64,
    pub misses: u64,
    pub fills: u64,
    pub evictions: u64,
}

impl TlbStats {
    pub fn miss_ratio(&self) -> Result<f64, TlbError> {
        miss_ratio(self)
    }

    pub fn merge(&mut self, other: &TlbStats) {
        self.lookups += other.lookups;
        self.hits += other.hits;
        self.misses += other.misses;
        self.fills += other.fills;
        self.evictions += other.evictions;
    }
}

pub fn miss_ratio(stats: &TlbStats) -> Result<f64, TlbError> {
    if stats.lookups == 0 {
        return Err(TlbError::UndefinedRatio);
    }
    Ok(stats.misses as f64 / stats.lookups as f64)
}

#[inline]
fn tag(vpn: Vpn, asid: Asid) -> u64 {
    // VPNs are at most 36 bits, so the ASID sits above them.
    ((asid.get() as u64) << 36) | vpn
}

#[inline]
fn untag(key: u64) -> (Vpn, Asid) {
    (key & ((1 << 36) - 1), Asid::new((key >> 36) as u32).expect("12-bit asid"))
}

#[derive(Clone, Debug)]
pub struct Tlb {
    cfg: TlbConfig,
    store: SetAssocLru<u64, Cached>,
    stats: TlbStats,
}

impl Tlb {
    pub fn new(cfg: TlbConfig) -> Result<Self, TlbError> {
        cfg.validate()?;
        Ok(Self { cfg, store: SetAssocLru::new(cfg.sets(), cfg.ways), stats: TlbStats::default() })
    }

    pub fn config(&self) -> &TlbConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &TlbStats {
        &self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = TlbStats::default();
    }

    #[inline]
    pub fn set_index(&self, vpn: Vpn) -> usize {
        ((vpn / self.cfg.index_stride) % self.cfg.sets() as u64) as usize
    }

    /// Probes the TLB; a hit requires both VPN and ASID to match.
    #[inline]
    pub fn lookup(&mut self, vpn: Vpn, asid: Asid) -> Option<Pfn> {
        self.stats.lookups += 1;
        match self.store.get(&tag(vpn, asid)) {
            Some(c) => {
                self.stats.hits += 1;
                Some(c.pfn)
            }
            None => {
                self.stats.misses += 1;
                None
            }
        }
    }

    /// Probes without updating statistics or recency.
    pub fn peek(&self, vpn: Vpn, asid: Asid) -> Option<TlbEntry> {
        self.store.peek(&tag(vpn, asid)).map(|c| TlbEntry { vpn, asid, pfn: c.pfn, flags: c.flags })
    }

    /// Installs `entry` as most-recently-used, returning the LRU victim if
    /// its set was full. Refilling an existing translation replaces it.
    pub fn fill(&mut self, entry: TlbEntry) -> Option<TlbEntry> {
        self.stats.fills += 1;
        let set = self.set_index(entry.vpn);
        let evicted = self.store.insert(set, tag(entry.vpn, entry.asid), Cached { pfn: entry.pfn, flags: entry.flags });
        evicted.map(|(key, c)| {
            self.stats.evictions += 1;
            let (vpn, asid) = untag(key);
            TlbEntry { vpn, asid, pfn: c.pfn, flags: c.flags }
        })
    }

    pub fn invalidate(&mut self, vpn: Vpn, asid: Asid) -> bool {
        self.store.remove(&tag(vpn, asid)).is_some()
    }

    pub fn flush(&mut self) {
        self.store.clear();
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = TlbEntry> + '_ {
        self.store.iter().map(|(key, c)| {
            let (vpn, asid) = untag(key);
            TlbEntry { vpn, asid, pfn: c.pfn, flags: c.flags }
        })
    }

    /// Set contents from MRU to LRU.
    pub fn set_order(&self, set: usize) -> Vec<(Vpn, Asid)> {
        self.store.recency_order(set).into_iter().map(untag).collect()
    }
}

/// One or two TLB levels with inclusive fill.
#[derive(Clone, Debug)]
pub struct TlbHierarchy {
    levels: Vec<Tlb>,
    stats: TlbStats,
}

impl TlbHierarchy {
    pub fn single(cfg: TlbConfig) -> Result<Self, TlbError> {
        Ok(Self { levels: vec![Tlb::new(cfg)?], stats: TlbStats::default() })
    }

    pub fn two_level(l1: TlbConfig, l2: TlbConfig) -> Result<Self, TlbError> {
        if l1.page_size != l2.page_size {
            return Err(TlbError::Geometry("TLB levels must share a page size".into()));
        }
        Ok(Self { levels: vec![Tlb::new(l1)?, Tlb::new(l2)?], stats: TlbStats::default() })
    }

    pub fn levels(&self) -> &[Tlb] {
        &self.levels
    }

    /// Aggregate statistics: a lookup hits if any level holds the entry.
    pub fn stats(&self) -> &TlbStats {
        &self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = TlbStats::default();
        for l in &mut self.levels {
            l.reset_stats();
        }
    }

    pub fn lookup(&mut self, vpn: Vpn, asid: Asid) -> Option<Pfn> {
        self.stats.lookups += 1;
        let mut found = None;
        for (depth, level) in self.levels.iter_mut().enumerate() {
            if let Some(pfn) = level.lookup(vpn, asid) {
                found = Some((depth, pfn));
                break;
            }
        }
        match found {
            Some((depth, pfn)) => {
                self.stats.hits += 1;
                if depth > 0 {
                    let flags = self.levels[depth].peek(vpn, asid).map(|e| e.flags).unwrap_or_default();
                    let entry = TlbEntry { vpn, asid, pfn, flags };
                    for upper in &mut self.levels[..depth] {
                        upper.fill(entry);
                    }
                }
                Some(pfn)
            }
            None => {
                self.stats.misses += 1;
                None
            }
        }
    }

    /// Fills every level. Returns the first-level victim, if any.
    pub fn fill(&mut self, entry: TlbEntry) -> Option<TlbEntry> {
        self.stats.fills += 1;
        let mut first = None;
        for (i, level) in self.levels.iter_mut().enumerate() {
            let ev = level.fill(entry);
            if i == 0 {
                first = ev;
            }
        }
        if first.is_some() {
            self.stats.evictions += 1;
        }
        first
    }

    pub fn invalidate(&mut self, vpn: Vpn, asid: Asid) -> bool {
        let mut any = false;
        for l in &mut self.levels {
            any |= l.invalidate(vpn, asid);
        }
        any
    }

    pub fn entries(&self) -> impl Iterator<Item = TlbEntry> + '_ {
        self.levels.iter().flat_map(|l| l.entries())
    }
}
