//! Emulated OS memory manager.
//!
//! Every mapping obeys the partition constraint: the frame backing a virtual
//! page lives in the partition the page routes to. Private pages are allocated
//! from that partition's free list, shared and remapped regions are placed at
//! virtual addresses whose routing reproduces the frames' partitions, and
//! copy-on-write copies stay in the original's partition.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addrspace::{AddrError, Asid, PageGeometry, Pfn, VirtualAddress, Vpn};
use crate::ipt::{InvertedPageTable, IptConfig, IptEntry, IptError, IptHash};
use crate::pte::PteFlags;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MmError {
    #[error("page {vpn:#x} of asid {asid} is not inside a private region")]
    NotPrivate { asid: Asid, vpn: Vpn },
    #[error("region {start:#x}..{end:#x} overlaps an existing region")]
    Overlap { start: Vpn, end: Vpn },
    #[error("page {vpn:#x} of asid {asid} is not mapped")]
    NotMapped { asid: Asid, vpn: Vpn },
    #[error("frame {pfn} is not resident")]
    NotResident { pfn: Pfn },
    #[error("frame {pfn} is not free")]
    FrameBusy { pfn: Pfn },
    #[error("frame {pfn} is in partition {actual}, page needs partition {expected}")]
    WrongPartition { pfn: Pfn, expected: u32, actual: u32 },
    #[error("partition {partition} is out of memory: every frame is pinned or shared")]
    OutOfMemory { partition: u32 },
    #[error("no free virtual region at or above {hint:#x} matches the frames' partition sequence")]
    NoCongruentRegion { hint: Vpn },
    #[error("empty frame list")]
    EmptyRegion,
    #[error(transparent)]
    Addr(#[from] AddrError),
    #[error(transparent)]
    Ipt(#[from] IptError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VmaKind {
    Private,
    Shared,
    Remapped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vma {
    pub start: Vpn,
    pub end: Vpn,
    pub kind: VmaKind,
    pub perms: PteFlags,
}

impl Vma {
    pub fn pages(&self) -> u64 {
        self.end - self.start
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mapping {
    pub pfn: Pfn,
    pub flags: PteFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharePolicy {
    /// Writable by every sharer.
    #[default]
    Shared,
    /// Read-only for every sharer until a write copies the page.
    CopyOnWrite,
}

#[derive(Clone, Debug)]
pub struct AddressSpace {
    asid: Asid,
    vmas: BTreeMap<Vpn, Vma>,
    mappings: FxHashMap<Vpn, Mapping>,
    evicted: FxHashSet<Vpn>,
}

impl AddressSpace {
    fn new(asid: Asid) -> Self {
        Self { asid, vmas: BTreeMap::new(), mappings: FxHashMap::default(), evicted: FxHashSet::default() }
    }

    pub fn asid(&self) -> Asid {
        self.asid
    }

    pub fn vmas(&self) -> impl Iterator<Item = &Vma> {
        self.vmas.values()
    }

    pub fn mappings(&self) -> impl Iterator<Item = (Vpn, Mapping)> + '_ {
        self.mappings.iter().map(|(&v, &m)| (v, m))
    }

    pub fn mapping_count(&self) -> usize {
        self.mappings.len()
    }

    pub fn vma_at(&self, vpn: Vpn) -> Option<&Vma> {
        self.vmas.range(..=vpn).next_back().map(|(_, v)| v).filter(|v| vpn < v.end)
    }

    /// VMAs intersecting `start..end`, in address order.
    fn overlapping(&self, start: Vpn, end: Vpn) -> impl Iterator<Item = &Vma> {
        let head = self.vma_at(start).filter(|v| v.start < start);
        head.into_iter().chain(self.vmas.range(start..end).map(|(_, v)| v))
    }

    /// Removes `start..end` from every VMA, splitting at the edges.
    fn carve(&mut self, start: Vpn, end: Vpn) {
        let hit: Vec<Vma> = {
            let mut out: Vec<Vma> = self.vmas.range(start..end).map(|(_, v)| *v).collect();
            if let Some(v) = self.vma_at(start) {
                if v.start < start {
                    out.push(*v);
                }
            }
            out
        };
        for v in hit {
            self.vmas.remove(&v.start);
            if v.start < start {
                self.vmas.insert(v.start, Vma { end: start, ..v });
            }
            if v.end > end {
                self.vmas.insert(end, Vma { start: end, ..v });
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
struct FrameInfo {
    owners: Vec<(Asid, Vpn)>,
    pinned: bool,
    referenced: bool,
}

#[derive(Clone, Debug)]
pub struct PartitionState {
    index: u32,
    frames: Range<Pfn>,
    free: Vec<Pfn>,
    info: Vec<FrameInfo>,
    ipt: Option<InvertedPageTable>,
    clock: usize,
}

impl PartitionState {
    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn frames(&self) -> Range<Pfn> {
        self.frames.clone()
    }

    pub fn free_count(&self) -> u64 {
        self.free.len() as u64
    }

    pub fn resident_count(&self) -> u64 {
        self.info.iter().filter(|f| !f.owners.is_empty()).count() as u64
    }

    pub fn ipt(&self) -> Option<&InvertedPageTable> {
        self.ipt.as_ref()
    }

    fn slot(&self, pfn: Pfn) -> usize {
        (pfn - self.frames.start) as usize
    }

    /// Clock second-chance over private, unpinned frames.
    fn pick_victim(&mut self) -> Option<Pfn> {
        let n = self.info.len();
        for _ in 0..2 * n {
            let i = self.clock;
            self.clock = (self.clock + 1) % n;
            let f = &mut self.info[i];
            if f.owners.len() != 1 || f.pinned {
                continue;
            }
            if f.referenced {
                f.referenced = false;
                continue;
            }
            return Some(self.frames.start + i as u64);
        }
        None
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultStats {
    pub minor_faults: u64,
    pub major_faults: u64,
    pub cow_faults: u64,
    pub evictions: u64,
}

impl FaultStats {
    pub fn page_faults(&self) -> u64 {
        self.minor_faults + self.major_faults
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultKind {
    /// Page was already resident.
    Resident,
    /// First touch.
    Minor,
    /// Page had been evicted before.
    Major,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Eviction {
    pub asid: Asid,
    pub vpn: Vpn,
    pub pfn: Pfn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fault {
    pub pfn: Pfn,
    pub kind: FaultKind,
    /// Translation that had to be evicted to make room; caches must drop it.
    pub evicted: Option<Eviction>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    MinorFault,
    MajorFault,
    CowFault,
    Eviction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MmEvent {
    pub kind: EventKind,
    pub asid: Asid,
    pub vpn: Vpn,
    pub pfn: Pfn,
    pub partition: u32,
}

impl fmt::Display for MmEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            EventKind::MinorFault => "minor",
            EventKind::MajorFault => "major",
            EventKind::CowFault => "cow",
            EventKind::Eviction => "evict",
        };
        write!(f, "{kind} asid={} vpn={:#x} pfn={} partition={}", self.asid, self.vpn, self.pfn, self.partition)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IptSettings {
    pub load_factor: f64,
    pub hash: IptHash,
}

impl Default for IptSettings {
    fn default() -> Self {
        Self { load_factor: IptConfig::DEFAULT_LOAD_FACTOR, hash: IptHash::XorFold }
    }
}

#[derive(Clone, Debug)]
pub struct MemoryManager {
    geometry: PageGeometry,
    partitions: Vec<PartitionState>,
    spaces: FxHashMap<Asid, AddressSpace>,
    stats: FaultStats,
    events: Option<Vec<MmEvent>>,
}

impl MemoryManager {
    /// Free lists are shuffled with `seed`, so frame choice within a partition
    /// is arbitrary but reproducible.
    pub fn new(geometry: PageGeometry, ipt: Option<IptSettings>, seed: u64) -> Result<Self, MmError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut partitions = Vec::with_capacity(geometry.partition_count() as usize);
        for p in 0..geometry.partition_count() {
            let frames = geometry.partition_frames(p);
            let mut free: Vec<Pfn> = frames.clone().collect();
            free.shuffle(&mut rng);
            let table = match ipt {
                Some(s) => {
                    let cfg = IptConfig::for_capacity(geometry.partition_capacity(), s.load_factor, s.hash)?
                        .with_key_stride(geometry.partition_count() as u64);
                    Some(InvertedPageTable::new(cfg, frames.clone())?)
                }
                None => None,
            };
            let info = vec![FrameInfo::default(); geometry.partition_capacity() as usize];
            partitions.push(PartitionState { index: p, frames, free, info, ipt: table, clock: 0 });
        }
        Ok(Self { geometry, partitions, spaces: FxHashMap::default(), stats: FaultStats::default(), events: None })
    }

    pub fn geometry(&self) -> &PageGeometry {
        &self.geometry
    }

    pub fn stats(&self) -> &FaultStats {
        &self.stats
    }

    pub fn partitions(&self) -> &[PartitionState] {
        &self.partitions
    }

    pub fn partition(&self, p: u32) -> &PartitionState {
        &self.partitions[p as usize]
    }

    pub fn enable_event_log(&mut self) {
        self.events.get_or_insert_with(Vec::new);
    }

    pub fn events(&self) -> &[MmEvent] {
        self.events.as_deref().unwrap_or(&[])
    }

    pub fn space(&self, asid: Asid) -> Option<&AddressSpace> {
        self.spaces.get(&asid)
    }

    pub fn spaces(&self) -> impl Iterator<Item = &AddressSpace> {
        self.spaces.values()
    }

    fn space_mut(&mut self, asid: Asid) -> &mut AddressSpace {
        self.spaces.entry(asid).or_insert_with(|| AddressSpace::new(asid))
    }

    pub fn translate(&self, asid: Asid, vpn: Vpn) -> Option<Mapping> {
        self.spaces.get(&asid)?.mappings.get(&vpn).copied()
    }

    pub fn refcount(&self, pfn: Pfn) -> u32 {
        self.frame_info(pfn).map_or(0, |f| f.owners.len() as u32)
    }

    fn frame_info(&self, pfn: Pfn) -> Option<&FrameInfo> {
        let p = self.geometry.frame_partition(pfn).ok()?;
        let part = &self.partitions[p as usize];
        Some(&part.info[part.slot(pfn)])
    }

    fn frame_info_mut(&mut self, pfn: Pfn) -> &mut FrameInfo {
        let p = self.geometry.frame_partition(pfn).expect("frame inside physical memory");
        let part = &mut self.partitions[p as usize];
        let i = part.slot(pfn);
        &mut part.info[i]
    }

    pub fn mark_referenced(&mut self, pfn: Pfn) {
        self.frame_info_mut(pfn).referenced = true;
    }

    pub fn pin(&mut self, pfn: Pfn, pinned: bool) {
        self.frame_info_mut(pfn).pinned = pinned;
    }

    fn log(&mut self, kind: EventKind, asid: Asid, vpn: Vpn, pfn: Pfn) {
        if let Some(events) = self.events.as_mut() {
            let partition = self.geometry.frame_partition(pfn).unwrap_or(u32::MAX);
            events.push(MmEvent { kind, asid, vpn, pfn, partition });
        }
    }

    /// Declares a virtual region. Regions of one address space never overlap.
    pub fn add_vma(
        &mut self,
        asid: Asid,
        start: Vpn,
        pages: u64,
        kind: VmaKind,
        perms: PteFlags,
    ) -> Result<(), MmError> {
        let end = start.checked_add(pages).filter(|&e| e <= self.geometry.virtual_pages() && pages > 0);
        let end = end.ok_or(MmError::Addr(AddrError::AddressOutOfRange(start)))?;
        let space = self.space_mut(asid);
        if space.overlapping(start, end).next().is_some() {
            return Err(MmError::Overlap { start, end });
        }
        space.vmas.insert(start, Vma { start, end, kind, perms });
        Ok(())
    }

    fn install(&mut self, asid: Asid, vpn: Vpn, pfn: Pfn, flags: PteFlags) -> Result<(), MmError> {
        let expected = self.geometry.partition_of_vpn(vpn);
        let actual = self.geometry.frame_partition(pfn)?;
        assert_eq!(expected, actual, "partition constraint violated for vpn {vpn:#x} -> pfn {pfn}");
        let part = &mut self.partitions[actual as usize];
        if let Some(ipt) = part.ipt.as_mut() {
            ipt.insert(IptEntry::new(vpn, asid, pfn, flags))?;
        }
        let i = part.slot(pfn);
        part.info[i].owners.push((asid, vpn));
        part.info[i].referenced = true;
        self.space_mut(asid).mappings.insert(vpn, Mapping { pfn, flags });
        Ok(())
    }

    /// Drops one mapping; frees the frame when no owner remains.
    fn uninstall(&mut self, asid: Asid, vpn: Vpn) -> Option<Mapping> {
        let m = self.spaces.get_mut(&asid)?.mappings.remove(&vpn)?;
        let p = self.geometry.frame_partition(m.pfn).expect("mapped frame");
        let part = &mut self.partitions[p as usize];
        if let Some(ipt) = part.ipt.as_mut() {
            ipt.invalidate(vpn, asid);
        }
        let i = part.slot(m.pfn);
        let owners = &mut part.info[i].owners;
        if let Some(pos) = owners.iter().position(|&o| o == (asid, vpn)) {
            owners.swap_remove(pos);
        }
        if owners.is_empty() {
            part.info[i] = FrameInfo::default();
            part.free.push(m.pfn);
        }
        Some(m)
    }

    fn set_flags(&mut self, asid: Asid, vpn: Vpn, flags: PteFlags) {
        let space = self.spaces.get_mut(&asid).expect("space exists");
        let m = space.mappings.get_mut(&vpn).expect("mapping exists");
        m.flags = flags;
        let pfn = m.pfn;
        let p = self.geometry.frame_partition(pfn).expect("mapped frame");
        if let Some(ipt) = self.partitions[p as usize].ipt.as_mut() {
            ipt.update_flags(vpn, asid, flags);
        }
    }

    /// Takes a free frame of `partition`, evicting a victim if none is free.
    fn take_frame(&mut self, partition: u32) -> Result<(Pfn, Option<Eviction>), MmError> {
        if let Some(pfn) = self.partitions[partition as usize].free.pop() {
            return Ok((pfn, None));
        }
        let victim = self.partitions[partition as usize].pick_victim().ok_or(MmError::OutOfMemory { partition })?;
        let (asid, vpn) = self.frame_info(victim).expect("victim frame").owners[0];
        self.uninstall(asid, vpn);
        self.space_mut(asid).evicted.insert(vpn);
        self.stats.evictions += 1;
        self.log(EventKind::Eviction, asid, vpn, victim);
        let pfn = self.partitions[partition as usize].free.pop().expect("victim was freed");
        debug_assert_eq!(pfn, victim);
        Ok((pfn, Some(Eviction { asid, vpn, pfn })))
    }

    fn private_perms(&self, asid: Asid, vpn: Vpn) -> Result<PteFlags, MmError> {
        match self.spaces.get(&asid).and_then(|s| s.vma_at(vpn)) {
            Some(v) if v.kind == VmaKind::Private => Ok(v.perms),
            _ => Err(MmError::NotPrivate { asid, vpn }),
        }
    }

    /// Allocates the frame for a page of a private region from the page's own
    /// partition. Repeated calls return the existing frame.
    pub fn alloc_private(&mut self, asid: Asid, vaddr: VirtualAddress) -> Result<Pfn, MmError> {
        let (vpn, _) = self.geometry.split(vaddr);
        let perms = self.private_perms(asid, vpn)?;
        if let Some(m) = self.translate(asid, vpn) {
            return Ok(m.pfn);
        }
        Ok(self.fault_in(asid, vpn, perms)?.pfn)
    }

    /// Maps a private page to a caller-chosen frame. Any free frame of the
    /// page's partition is acceptable.
    pub fn alloc_private_at(&mut self, asid: Asid, vaddr: VirtualAddress, pfn: Pfn) -> Result<(), MmError> {
        let (vpn, _) = self.geometry.split(vaddr);
        let perms = self.private_perms(asid, vpn)?;
        if self.translate(asid, vpn).is_some() {
            return Err(MmError::Overlap { start: vpn, end: vpn + 1 });
        }
        let expected = self.geometry.partition_of_vpn(vpn);
        let actual = self.geometry.frame_partition(pfn)?;
        if expected != actual {
            return Err(MmError::WrongPartition { pfn, expected, actual });
        }
        let free = &mut self.partitions[actual as usize].free;
        let pos = free.iter().position(|&f| f == pfn).ok_or(MmError::FrameBusy { pfn })?;
        free.swap_remove(pos);
        self.install(asid, vpn, pfn, perms)?;
        self.stats.minor_faults += 1;
        self.log(EventKind::MinorFault, asid, vpn, pfn);
        Ok(())
    }

    fn fault_in(&mut self, asid: Asid, vpn: Vpn, flags: PteFlags) -> Result<Fault, MmError> {
        let partition = self.geometry.partition_of_vpn(vpn);
        let (pfn, evicted) = self.take_frame(partition)?;
        self.install(asid, vpn, pfn, flags)?;
        let major = self.space_mut(asid).evicted.remove(&vpn);
        let kind = if major {
            self.stats.major_faults += 1;
            self.log(EventKind::MajorFault, asid, vpn, pfn);
            FaultKind::Major
        } else {
            self.stats.minor_faults += 1;
            self.log(EventKind::MinorFault, asid, vpn, pfn);
            FaultKind::Minor
        };
        Ok(Fault { pfn, kind, evicted })
    }

    /// Resolves a page on access, faulting it in if needed. Pages outside any
    /// declared region are treated as anonymous read-write memory.
    pub fn demand_page(&mut self, asid: Asid, vpn: Vpn) -> Result<Fault, MmError> {
        if let Some(m) = self.translate(asid, vpn) {
            return Ok(Fault { pfn: m.pfn, kind: FaultKind::Resident, evicted: None });
        }
        if vpn >= self.geometry.virtual_pages() {
            return Err(MmError::Addr(AddrError::AddressOutOfRange(vpn)));
        }
        let flags = self.spaces.get(&asid).and_then(|s| s.vma_at(vpn)).map_or(PteFlags::rw(), |v| v.perms);
        self.fault_in(asid, vpn, flags)
    }

    fn region_is_free(&self, space: &AddressSpace, start: Vpn, len: u64, ignore: &Range<Vpn>) -> Option<Vpn> {
        // Returns the first blocking page, if any.
        let end = start + len;
        for v in space.overlapping(start, end) {
            let (lo, hi) = (v.start.max(start), v.end.min(end));
            if !(ignore.start <= lo && hi <= ignore.end) {
                return Some(lo);
            }
        }
        (start..end).find(|v| !ignore.contains(v) && space.mappings.contains_key(v))
    }

    /// First-fit upward search for a free region whose page routing matches
    /// `seq` page by page.
    fn find_congruent(&self, asid: Asid, seq: &[u32], hint: Vpn, ignore: Range<Vpn>) -> Result<Vpn, MmError> {
        let p = self.geometry.partition_count() as u64;
        let len = seq.len() as u64;
        if seq.windows(2).any(|w| (w[0] as u64 + 1) % p != w[1] as u64) {
            return Err(MmError::NoCongruentRegion { hint });
        }
        let limit = self.geometry.virtual_pages();
        let align = |v: Vpn| v + (seq[0] as u64 + p - v % p) % p;
        let empty = AddressSpace::new(asid);
        let space = self.spaces.get(&asid).unwrap_or(&empty);
        let mut start = align(hint);
        while start + len <= limit {
            match self.region_is_free(space, start, len, &ignore) {
                None => return Ok(start),
                Some(blocked) => {
                    let next = match space.vma_at(blocked) {
                        Some(v) if !ignore.contains(&blocked) => v.end,
                        _ => blocked + 1,
                    };
                    start = align(next.max(start + 1));
                }
            }
        }
        Err(MmError::NoCongruentRegion { hint })
    }

    fn frame_sequence(&self, frames: &[Pfn]) -> Result<Vec<u32>, MmError> {
        frames
            .iter()
            .map(|&pfn| {
                if self.refcount(pfn) == 0 {
                    return Err(MmError::NotResident { pfn });
                }
                Ok(self.geometry.frame_partition(pfn)?)
            })
            .collect()
    }

    /// Maps existing frames into `asid` at the lowest free region at or above
    /// `hint` whose routing matches the frames' partitions.
    pub fn map_shared(
        &mut self,
        asid: Asid,
        frames: &[Pfn],
        hint: Vpn,
        policy: SharePolicy,
    ) -> Result<Range<Vpn>, MmError> {
        if frames.is_empty() {
            return Err(MmError::EmptyRegion);
        }
        let seq = self.frame_sequence(frames)?;
        let start = self.find_congruent(asid, &seq, hint, 0..0)?;
        let end = start + frames.len() as u64;
        let flags = match policy {
            SharePolicy::Shared => PteFlags::rw() | PteFlags::SHARED,
            SharePolicy::CopyOnWrite => PteFlags::ro() | PteFlags::COW,
        };
        if policy == SharePolicy::CopyOnWrite {
            for &pfn in frames {
                let owners = self.frame_info(pfn).expect("resident").owners.clone();
                for (a, v) in owners {
                    let cur = self.translate(a, v).expect("owner mapping").flags;
                    self.set_flags(a, v, (cur - PteFlags::WRITE) | PteFlags::COW);
                }
            }
        }
        for (i, &pfn) in frames.iter().enumerate() {
            self.install(asid, start + i as u64, pfn, flags)?;
        }
        let perms = flags;
        self.space_mut(asid).vmas.insert(start, Vma { start, end, kind: VmaKind::Shared, perms });
        Ok(start..end)
    }

    /// Moves a fully mapped region to a new virtual range congruent with its
    /// frames. Frames and flags are kept.
    pub fn mremap(&mut self, asid: Asid, old: Range<Vpn>, hint: Vpn) -> Result<Range<Vpn>, MmError> {
        if old.is_empty() {
            return Err(MmError::EmptyRegion);
        }
        let mut moved = Vec::with_capacity((old.end - old.start) as usize);
        for vpn in old.clone() {
            moved.push(self.translate(asid, vpn).ok_or(MmError::NotMapped { asid, vpn })?);
        }
        let frames: Vec<Pfn> = moved.iter().map(|m| m.pfn).collect();
        let seq = self.frame_sequence(&frames)?;
        let start = self.find_congruent(asid, &seq, hint, old.clone())?;
        let end = start + frames.len() as u64;
        let perms = self.spaces[&asid].vma_at(old.start).map_or(PteFlags::rw(), |v| v.perms);
        for vpn in old.clone() {
            let m = self.spaces.get_mut(&asid).unwrap().mappings.remove(&vpn).unwrap();
            let p = self.geometry.frame_partition(m.pfn)?;
            let part = &mut self.partitions[p as usize];
            if let Some(ipt) = part.ipt.as_mut() {
                ipt.invalidate(vpn, asid);
            }
            let i = part.slot(m.pfn);
            let owners = &mut part.info[i].owners;
            let pos = owners.iter().position(|&o| o == (asid, vpn)).expect("owner recorded");
            owners.swap_remove(pos);
        }
        let space = self.space_mut(asid);
        space.carve(old.start, old.end);
        for (i, m) in moved.iter().enumerate() {
            self.install(asid, start + i as u64, m.pfn, m.flags)?;
        }
        self.space_mut(asid).vmas.insert(start, Vma { start, end, kind: VmaKind::Remapped, perms });
        Ok(start..end)
    }

    /// Handles a write to a read-only shared page. A sole owner is upgraded in
    /// place; otherwise the page is copied into a frame of the same partition.
    pub fn cow_fault(&mut self, asid: Asid, vaddr: VirtualAddress) -> Result<Fault, MmError> {
        let (vpn, _) = self.geometry.split(vaddr);
        let m = self.translate(asid, vpn).ok_or(MmError::NotMapped { asid, vpn })?;
        if m.flags.contains(PteFlags::WRITE) {
            return Ok(Fault { pfn: m.pfn, kind: FaultKind::Resident, evicted: None });
        }
        let writable = (m.flags - PteFlags::COW) | PteFlags::WRITE;
        if self.refcount(m.pfn) == 1 {
            self.set_flags(asid, vpn, writable);
            return Ok(Fault { pfn: m.pfn, kind: FaultKind::Resident, evicted: None });
        }
        let partition = self.geometry.frame_partition(m.pfn)?;
        let (copy, evicted) = self.take_frame(partition)?;
        self.uninstall(asid, vpn);
        self.install(asid, vpn, copy, writable)?;
        self.stats.cow_faults += 1;
        self.log(EventKind::CowFault, asid, vpn, copy);
        Ok(Fault { pfn: copy, kind: FaultKind::Minor, evicted })
    }

    pub fn unmap(&mut self, asid: Asid, range: Range<Vpn>) {
        for vpn in range.clone() {
            self.uninstall(asid, vpn);
        }
        if let Some(space) = self.spaces.get_mut(&asid) {
            space.carve(range.start, range.end);
            space.evicted.retain(|v| !range.contains(v));
        }
    }

    /// Full consistency check: partition constraint, frame conservation,
    /// reference counts and IPT/mapping agreement.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut owners: FxHashMap<Pfn, u32> = FxHashMap::default();
        for space in self.spaces.values() {
            for (&vpn, m) in &space.mappings {
                let fp = self.geometry.frame_partition(m.pfn).map_err(|e| e.to_string())?;
                if fp != self.geometry.partition_of_vpn(vpn) {
                    return Err(format!("asid {} vpn {vpn:#x} maps to pfn {} in partition {fp}", space.asid, m.pfn));
                }
                *owners.entry(m.pfn).or_insert(0) += 1;
                if let Some(ipt) = self.partitions[fp as usize].ipt.as_ref() {
                    if ipt.walk(vpn, space.asid).pfn != Some(m.pfn) {
                        return Err(format!("ipt disagrees for asid {} vpn {vpn:#x}", space.asid));
                    }
                }
            }
            let mut prev_end = 0;
            for v in space.vmas.values() {
                if v.start < prev_end || v.start >= v.end {
                    return Err(format!("overlapping or empty region at {:#x}", v.start));
                }
                prev_end = v.end;
            }
        }
        for part in &self.partitions {
            let resident = part.resident_count();
            if resident + part.free_count() != part.info.len() as u64 {
                return Err(format!(
                    "partition {}: {resident} resident + {} free != {}",
                    part.index,
                    part.free_count(),
                    part.info.len()
                ));
            }
            for (i, f) in part.info.iter().enumerate() {
                let pfn = part.frames.start + i as u64;
                if owners.get(&pfn).copied().unwrap_or(0) != f.owners.len() as u32 {
                    return Err(format!("frame {pfn} reference count mismatch"));
                }
            }
            if let Some(ipt) = part.ipt.as_ref() {
                let mapped: u64 = part.info.iter().map(|f| f.owners.len() as u64).sum();
                if ipt.len() as u64 != mapped {
                    return Err(format!("partition {} ipt holds {} entries, {mapped} mappings", part.index, ipt.len()));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addrspace::PageSize;
    use proptest::prelude::*;

    fn asid(a: u32) -> Asid {
        Asid::new(a).unwrap()
    }

    fn va(geo: &PageGeometry, vpn: Vpn) -> VirtualAddress {
        geo.join(vpn, 0).unwrap()
    }

    fn mm(partitions: u32, capacity: u64) -> MemoryManager {
        let geo = PageGeometry::new(PageSize::Small, partitions, capacity).unwrap();
        MemoryManager::new(geo, Some(IptSettings::default()), 1).unwrap()
    }

    #[test]
    fn private_allocation_follows_routing() {
        let mut m = mm(4, 64);
        let geo = *m.geometry();
        m.add_vma(asid(1), 0, 64, VmaKind::Private, PteFlags::rw()).unwrap();
        for (vpn, part) in [(3, 3), (4, 0), (5, 1), (6, 2), (7, 3)] {
            let pfn = m.alloc_private(asid(1), va(&geo, vpn)).unwrap();
            assert_eq!(geo.frame_partition(pfn).unwrap(), part);
        }
        let again = m.alloc_private(asid(1), va(&geo, 3)).unwrap();
        assert_eq!(Some(again), m.translate(asid(1), 3).map(|x| x.pfn));
        assert_eq!(m.stats().minor_faults, 5);
        assert!(matches!(m.alloc_private(asid(2), va(&geo, 3)), Err(MmError::NotPrivate { .. })));
        m.check_invariants().unwrap();
    }

    #[test]
    fn single_partition_takes_any_frame() {
        let mut m = mm(1, 8);
        let geo = *m.geometry();
        m.add_vma(asid(0), 100, 8, VmaKind::Private, PteFlags::rw()).unwrap();
        let mut got: Vec<Pfn> = (100..108).map(|v| m.alloc_private(asid(0), va(&geo, v)).unwrap()).collect();
        got.sort();
        assert_eq!(got, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn injected_frames_accepted_anywhere_in_partition() {
        let mut m = mm(4, 16);
        let geo = *m.geometry();
        m.add_vma(asid(0), 0, 256, VmaKind::Private, PteFlags::rw()).unwrap();
        // Every free frame of partition 2 is a legal home for vpn 2 + 4k.
        for (k, pfn) in geo.partition_frames(2).enumerate() {
            m.alloc_private_at(asid(0), va(&geo, 2 + 4 * k as u64), pfn).unwrap();
        }
        assert_eq!(m.partition(2).free_count(), 0);
        let err = m.alloc_private_at(asid(0), va(&geo, 3), geo.partition_frames(2).start).unwrap_err();
        assert!(matches!(err, MmError::WrongPartition { .. }));
        m.check_invariants().unwrap();
    }

    fn shared_frames(m: &mut MemoryManager) -> Vec<Pfn> {
        // Frames in partitions 3, 0, 1, 2, 3, owned by asid 9.
        let geo = *m.geometry();
        m.add_vma(asid(9), 1000, 8, VmaKind::Private, PteFlags::rw()).unwrap();
        [1003, 1004, 1005, 1006, 1007].iter().map(|&v| m.alloc_private(asid(9), va(&geo, v)).unwrap()).collect()
    }

    #[test]
    fn shared_region_is_adjusted_upward() {
        let mut m = mm(4, 64);
        let frames = shared_frames(&mut m);
        let region = m.map_shared(asid(1), &frames, 5, SharePolicy::Shared).unwrap();
        assert_eq!(region, 7..12);
        for (i, vpn) in region.clone().enumerate() {
            assert_eq!(m.translate(asid(1), vpn).unwrap().pfn, frames[i]);
            assert_eq!(m.refcount(frames[i]), 2);
        }
        // The same hint now skips the occupied region.
        let next = m.map_shared(asid(1), &frames, 5, SharePolicy::Shared).unwrap();
        assert_eq!(next, 15..20);
        m.check_invariants().unwrap();
    }

    #[test]
    fn shared_single_page_and_single_partition() {
        let mut m = mm(4, 64);
        let geo = *m.geometry();
        m.add_vma(asid(0), 0, 16, VmaKind::Private, PteFlags::rw()).unwrap();
        let pfn = m.alloc_private(asid(0), va(&geo, 2)).unwrap();
        let r = m.map_shared(asid(1), &[pfn], 0, SharePolicy::Shared).unwrap();
        assert_eq!(r, 2..3);

        let mut one = mm(1, 16);
        let geo = *one.geometry();
        one.add_vma(asid(0), 0, 4, VmaKind::Private, PteFlags::rw()).unwrap();
        let frames: Vec<Pfn> = (0..4).map(|v| one.alloc_private(asid(0), va(&geo, v)).unwrap()).collect();
        assert_eq!(one.map_shared(asid(1), &frames, 37, SharePolicy::Shared).unwrap(), 37..41);
    }

    #[test]
    fn shared_rejects_impossible_sequences() {
        let mut m = mm(4, 64);
        let geo = *m.geometry();
        m.add_vma(asid(0), 0, 16, VmaKind::Private, PteFlags::rw()).unwrap();
        let a = m.alloc_private(asid(0), va(&geo, 1)).unwrap();
        let b = m.alloc_private(asid(0), va(&geo, 3)).unwrap();
        assert!(matches!(
            m.map_shared(asid(1), &[a, b], 0, SharePolicy::Shared),
            Err(MmError::NoCongruentRegion { .. })
        ));
        let free = geo.partition_frames(0).start;
        let free = (free..free + 64).find(|&p| m.refcount(p) == 0).unwrap();
        assert!(matches!(m.map_shared(asid(1), &[free], 0, SharePolicy::Shared), Err(MmError::NotResident { .. })));
    }

    #[test]
    fn mremap_keeps_frames_and_congruence() {
        let mut m = mm(4, 64);
        let frames = shared_frames(&mut m);
        let r = m.mremap(asid(9), 1003..1008, 5).unwrap();
        assert_eq!(r.start % 4, 3);
        assert_eq!(r, 7..12);
        for (i, vpn) in r.enumerate() {
            assert_eq!(m.translate(asid(9), vpn).unwrap().pfn, frames[i]);
        }
        assert!(m.translate(asid(9), 1003).is_none());
        // Remapping onto its own congruence class is allowed.
        let again = m.mremap(asid(9), 7..12, 7).unwrap();
        assert_eq!(again, 7..12);
        m.check_invariants().unwrap();
    }

    #[test]
    fn cow_copies_stay_in_partition() {
        let mut m = mm(4, 64);
        let geo = *m.geometry();
        let frames = shared_frames(&mut m);
        let r = m.map_shared(asid(1), &frames, 0, SharePolicy::CopyOnWrite).unwrap();
        let before = m.partition(3).free_count();
        let copy = m.cow_fault(asid(1), va(&geo, r.start)).unwrap();
        assert_ne!(copy.pfn, frames[0]);
        assert_eq!(geo.frame_partition(copy.pfn).unwrap(), geo.frame_partition(frames[0]).unwrap());
        assert_eq!(m.partition(3).free_count(), before - 1);
        assert_eq!(m.refcount(frames[0]), 1);
        assert_eq!(m.stats().cow_faults, 1);
        // Original owner is now sole owner: upgrade in place.
        let up = m.cow_fault(asid(9), va(&geo, 1003)).unwrap();
        assert_eq!(up.pfn, frames[0]);
        assert!(m.translate(asid(9), 1003).unwrap().flags.contains(PteFlags::WRITE));
        assert_eq!(m.stats().cow_faults, 1);
        m.check_invariants().unwrap();
    }

    #[test]
    fn n_cow_faults_consume_n_frames() {
        let mut m = mm(4, 64);
        let geo = *m.geometry();
        m.add_vma(asid(0), 0, 64, VmaKind::Private, PteFlags::rw()).unwrap();
        let frames: Vec<Pfn> = (0..6).map(|k| m.alloc_private(asid(0), va(&geo, 1 + 4 * k)).unwrap()).collect();
        let mut vpns = Vec::new();
        for &f in &frames {
            vpns.push(m.map_shared(asid(1), &[f], 0, SharePolicy::CopyOnWrite).unwrap().start);
        }
        let before = m.partition(1).free_count();
        for v in vpns {
            m.cow_fault(asid(1), va(&geo, v)).unwrap();
        }
        assert_eq!(m.partition(1).free_count(), before - 6);
        assert_eq!(m.stats().evictions, 0);
        assert_eq!(m.stats().cow_faults, 6);
    }

    #[test]
    fn eviction_and_major_faults() {
        let mut m = mm(2, 4);
        m.enable_event_log();
        for vpn in 0..8 {
            assert_eq!(m.demand_page(asid(0), vpn).unwrap().kind, FaultKind::Minor);
        }
        assert_eq!(m.stats().evictions, 0);
        let f = m.demand_page(asid(0), 8).unwrap();
        let ev = f.evicted.expect("partition 0 is full");
        assert_eq!(ev.vpn % 2, 0);
        assert_eq!(ev.pfn, f.pfn);
        assert_eq!(m.demand_page(asid(0), ev.vpn).unwrap().kind, FaultKind::Major);
        assert_eq!(m.stats().major_faults, 1);
        assert!(m.events().iter().any(|e| e.kind == EventKind::Eviction));
        assert!(m.events()[0].to_string().starts_with("minor asid=0 vpn=0x0"));
        m.check_invariants().unwrap();
    }

    #[test]
    fn pinned_and_shared_frames_are_never_evicted() {
        let mut m = mm(1, 2);
        let a = m.demand_page(asid(0), 0).unwrap().pfn;
        let b = m.demand_page(asid(0), 1).unwrap().pfn;
        m.pin(a, true);
        m.map_shared(asid(1), &[b], 0, SharePolicy::Shared).unwrap();
        assert!(matches!(m.demand_page(asid(0), 2), Err(MmError::OutOfMemory { partition: 0 })));
        m.pin(a, false);
        let f = m.demand_page(asid(0), 2).unwrap();
        assert_eq!(f.evicted.unwrap().pfn, a);
    }

    #[test]
    fn working_set_that_fits_never_evicts() {
        let mut m = mm(4, 32);
        for round in 0..3 {
            for vpn in 0..128 {
                let f = m.demand_page(asid(0), vpn).unwrap();
                assert_eq!(f.kind == FaultKind::Resident, round > 0);
            }
        }
        assert_eq!(m.stats().evictions, 0);
    }

    #[test]
    fn uniform_overcommit_faults_half_the_time() {
        let mut m = MemoryManager::new(PageGeometry::new(PageSize::Small, 1, 1024).unwrap(), None, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let mut faults = 0;
        let n = 200_000;
        for i in 0..n + 20_000 {
            let f = m.demand_page(asid(0), rng.gen_range(0..2048)).unwrap();
            if f.kind != FaultKind::Resident {
                m.mark_referenced(f.pfn);
                if i >= 20_000 {
                    faults += 1;
                }
            } else {
                m.mark_referenced(f.pfn);
            }
        }
        let rate = faults as f64 / n as f64;
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn partitioning_is_neutral_for_balanced_footprints() {
        let run = |parts: u32| {
            let geo = PageGeometry::new(PageSize::Small, parts, 1024 / parts as u64).unwrap();
            let mut m = MemoryManager::new(geo, None, 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            use rand::Rng;
            for _ in 0..100_000 {
                let f = m.demand_page(asid(0), rng.gen_range(0..2048)).unwrap();
                m.mark_referenced(f.pfn);
            }
            m.stats().page_faults() as f64
        };
        let (one, four) = (run(1), run(4));
        assert!((one - four).abs() / one < 0.03, "{one} vs {four}");
    }

    #[test]
    fn vma_overlap_and_unmap() {
        let mut m = mm(4, 16);
        m.add_vma(asid(0), 10, 10, VmaKind::Private, PteFlags::rw()).unwrap();
        assert!(matches!(m.add_vma(asid(0), 15, 10, VmaKind::Private, PteFlags::rw()), Err(MmError::Overlap { .. })));
        assert!(matches!(m.add_vma(asid(0), 5, 6, VmaKind::Private, PteFlags::rw()), Err(MmError::Overlap { .. })));
        m.add_vma(asid(0), 20, 1, VmaKind::Private, PteFlags::rw()).unwrap();
        let geo = *m.geometry();
        m.alloc_private(asid(0), va(&geo, 12)).unwrap();
        m.unmap(asid(0), 11..14);
        assert!(m.translate(asid(0), 12).is_none());
        let s = m.space(asid(0)).unwrap();
        let spans: Vec<_> = s.vmas().map(|v| (v.start, v.end)).collect();
        assert_eq!(spans, vec![(10, 11), (14, 20), (20, 21)]);
        m.check_invariants().unwrap();
    }

    #[derive(Clone, Debug)]
    enum Op {
        Touch(u8, u16),
        Share(u8, u8, u16, u16, bool),
        Remap(u8, u16, u16),
        Write(u8, u16),
        Unmap(u8, u16),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            4 => (0u8..4, 0u16..512).prop_map(|(a, v)| Op::Touch(a, v)),
            1 => (0u8..4, 0u8..4, 0u16..512, 0u16..512, any::<bool>()).prop_map(|(a, b, v, h, c)| Op::Share(a, b, v, h, c)),
            1 => (0u8..4, 0u16..512, 0u16..512).prop_map(|(a, v, h)| Op::Remap(a, v, h)),
            2 => (0u8..4, 0u16..512).prop_map(|(a, v)| Op::Write(a, v)),
            1 => (0u8..4, 0u16..512).prop_map(|(a, v)| Op::Unmap(a, v)),
        ]
    }

    /// Applies one randomized operation; errors that the operation may
    /// legitimately report are ignored.
    fn apply(m: &mut MemoryManager, op: &Op) {
        let geo = *m.geometry();
        match *op {
            Op::Touch(a, v) => {
                let _ = m.demand_page(asid(a as u32), v as u64);
            }
            Op::Share(a, b, v, h, cow) => {
                let src = asid(a as u32);
                let frames: Vec<Pfn> =
                    (v as u64..v as u64 + 3).map_while(|vpn| m.translate(src, vpn).map(|x| x.pfn)).collect();
                if !frames.is_empty() {
                    let policy = if cow { SharePolicy::CopyOnWrite } else { SharePolicy::Shared };
                    let _ = m.map_shared(asid(b as u32), &frames, h as u64, policy);
                }
            }
            Op::Remap(a, v, h) => {
                let _ = m.mremap(asid(a as u32), v as u64..v as u64 + 2, h as u64);
            }
            Op::Write(a, v) => {
                let before = m.translate(asid(a as u32), v as u64);
                if let Ok(f) = m.cow_fault(asid(a as u32), va(&geo, v as u64)) {
                    let orig = before.unwrap().pfn;
                    assert_eq!(geo.frame_partition(f.pfn).unwrap(), geo.frame_partition(orig).unwrap());
                }
            }
            Op::Unmap(a, v) => m.unmap(asid(a as u32), v as u64..v as u64 + 1),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn random_operations_keep_invariants(ops in proptest::collection::vec(op(), 1..300)) {
            let mut m = mm(8, 32);
            for o in &ops {
                apply(&mut m, o);
                prop_assert_eq!(m.check_invariants(), Ok(()));
            }
        }

        #[test]
        fn shared_region_reproduces_sequence(start in 0u64..64, len in 1u64..12, hint in 0u64..200) {
            let mut m = mm(4, 64);
            let geo = *m.geometry();
            m.add_vma(asid(0), start, len, VmaKind::Private, PteFlags::rw()).unwrap();
            let frames: Vec<Pfn> = (start..start + len).map(|v| m.alloc_private(asid(0), va(&geo, v)).unwrap()).collect();
            let r = m.map_shared(asid(1), &frames, hint, SharePolicy::Shared).unwrap();
            prop_assert!(r.start >= hint && r.start < hint + 4);
            for (i, vpn) in r.enumerate() {
                prop_assert_eq!(geo.partition_of_vpn(vpn), geo.frame_partition(frames[i]).unwrap());
            }
        }
    }
}
