//! Per-partition inverted page table.
//!
//! An open-addressed hash table keyed by `(vpn, asid)` with linear probing and
//! tombstones. Slots are stored in their 16-byte wire layout:
//!
//! ```text
//! bit 127            92 91     80 79            44 43     32 31     30      0
//!     |   vpn (36)     | asid(12) |   pfn (36)     | flags(12)| valid |  pad  |
//! ```
//!
//! Four entries share a 64-byte DRAM burst, so a walk's memory cost is the
//! number of distinct lines it touches, not the number of slots it examines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addrspace::{Asid, Pfn, Vpn, ADDRESS_BITS, PFN_BITS};
use crate::pte::PteFlags;

pub const ENTRY_BYTES: usize = 16;
pub const LINE_BYTES: usize = 64;
pub const ENTRIES_PER_LINE: usize = LINE_BYTES / ENTRY_BYTES;
pub const SNAPSHOT_MAGIC: &[u8; 8] = b"SPIPT\0v1";

const VPN_MASK: u128 = (1 << 36) - 1;
const ASID_MASK: u128 = (1 << 12) - 1;
const PFN_MASK: u128 = (1 << PFN_BITS) - 1;
const FLAG_MASK: u128 = (1 << 12) - 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IptError {
    #[error("invalid inverted page table config: {0}")]
    Config(String),
    #[error("inverted page table is full ({slots} slots)")]
    Exhausted { slots: usize },
    #[error("frame {pfn} lies outside the owning partition {start}..{end}")]
    ForeignFrame { pfn: Pfn, start: Pfn, end: Pfn },
    #[error("malformed snapshot: {0}")]
    Snapshot(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IptHash {
    Modulo,
    #[default]
    XorFold,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IptConfig {
    pub slot_count: usize,
    pub load_factor_target: f64,
    pub hash: IptHash,
    /// The partition count: VPNs are divided by it before hashing, since all
    /// keys of one partition share the same residue.
    pub key_stride: u64,
}

impl IptConfig {
    pub const DEFAULT_LOAD_FACTOR: f64 = 0.25;

    /// Sizes the table for `capacity` frames at the target load factor,
    /// rounded up to a power of two.
    pub fn for_capacity(capacity: u64, load_factor: f64, hash: IptHash) -> Result<Self, IptError> {
        if !(load_factor > 0.0 && load_factor <= 1.0) {
            return Err(IptError::Config(format!("load factor {load_factor} outside (0, 1]")));
        }
        if capacity == 0 {
            return Err(IptError::Config("capacity must be positive".into()));
        }
        let raw = (capacity as f64 / load_factor).ceil() as u64;
        let slot_count = raw.next_power_of_two() as usize;
        Ok(Self { slot_count, load_factor_target: load_factor, hash, key_stride: 1 })
    }

    pub fn with_slots(slot_count: usize, hash: IptHash) -> Result<Self, IptError> {
        let cfg = Self { slot_count, load_factor_target: Self::DEFAULT_LOAD_FACTOR, hash, key_stride: 1 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_key_stride(mut self, stride: u64) -> Self {
        self.key_stride = stride.max(1);
        self
    }

    pub fn validate(&self) -> Result<(), IptError> {
        if self.slot_count == 0 {
            return Err(IptError::Config("slot_count must be positive".into()));
        }
        if self.hash == IptHash::XorFold && !self.slot_count.is_power_of_two() {
            return Err(IptError::Config(format!(
                "xor-fold hashing needs a power-of-two slot count, got {}",
                self.slot_count
            )));
        }
        if !(self.load_factor_target > 0.0 && self.load_factor_target <= 1.0) {
            return Err(IptError::Config(format!("load factor {} outside (0, 1]", self.load_factor_target)));
        }
        Ok(())
    }
}

/// Home slot of `(vpn, asid)`.
///
/// Modulo: the ASID is XORed into VPN bits 24..36 and the result reduced
/// modulo the slot count. Xor-fold: the 48-bit key `asid ++ vpn` is cut into
/// `k = log2(slots)` bit chunks (top chunk zero padded) that are XORed together.
pub fn ipt_hash(vpn: Vpn, asid: Asid, cfg: &IptConfig) -> Result<usize, IptError> {
    cfg.validate()?;
    Ok(hash_unchecked(vpn / cfg.key_stride, asid, cfg))
}

#[inline]
fn hash_unchecked(vpn: Vpn, asid: Asid, cfg: &IptConfig) -> usize {
    match cfg.hash {
        IptHash::Modulo => {
            let mixed = vpn ^ ((asid.get() as u64) << 24);
            (mixed % cfg.slot_count as u64) as usize
        }
        IptHash::XorFold => {
            let k = cfg.slot_count.trailing_zeros();
            if k == 0 {
                return 0;
            }
            let mut key = ((asid.get() as u64) << 36) | (vpn & ((1 << 36) - 1));
            let mask = (1u64 << k) - 1;
            let mut folded = 0;
            let mut consumed = 0;
            while consumed < ADDRESS_BITS {
                folded ^= key & mask;
                key >>= k;
                consumed += k;
            }
            folded as usize
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct IptEntry {
    pub vpn: Vpn,
    pub asid: Asid,
    pub pfn: Pfn,
    pub flags: PteFlags,
    pub valid: bool,
}

impl IptEntry {
    pub fn new(vpn: Vpn, asid: Asid, pfn: Pfn, flags: PteFlags) -> Self {
        Self { vpn, asid, pfn, flags, valid: true }
    }

    pub fn pack(&self) -> u128 {
        ((self.vpn as u128 & VPN_MASK) << 92)
            | ((self.asid.get() as u128 & ASID_MASK) << 80)
            | ((self.pfn as u128 & PFN_MASK) << 44)
            | (((self.flags.bits() & PteFlags::MASK) as u128) << 32)
            | ((self.valid as u128) << 31)
    }

    pub fn unpack(word: u128) -> Self {
        Self {
            vpn: ((word >> 92) & VPN_MASK) as u64,
            asid: Asid::new(((word >> 80) & ASID_MASK) as u32).expect("12-bit field"),
            pfn: ((word >> 44) & PFN_MASK) as u64,
            flags: PteFlags::from_bits_retain(((word >> 32) & FLAG_MASK) as u16),
            valid: (word >> 31) & 1 == 1,
        }
    }

    pub fn to_bytes(&self) -> [u8; ENTRY_BYTES] {
        self.pack().to_be_bytes()
    }

    pub fn from_bytes(bytes: [u8; ENTRY_BYTES]) -> Self {
        Self::unpack(u128::from_be_bytes(bytes))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WalkResult {
    pub pfn: Option<Pfn>,
    /// Slots examined.
    pub probes: u32,
    /// Distinct 64-byte lines read.
    pub mem_refs: u32,
}

const VALID_BIT: u128 = 1 << 31;
const USED_BIT: u128 = (PteFlags::USED.bits() as u128) << 32;
const KEY_MASK: u128 = !((1u128 << 80) - 1);

#[inline]
fn key_bits(vpn: Vpn, asid: Asid) -> u128 {
    ((vpn as u128 & VPN_MASK) << 92) | ((asid.get() as u128 & ASID_MASK) << 80)
}

#[derive(Clone, Debug)]
pub struct InvertedPageTable {
    cfg: IptConfig,
    frames: Range<Pfn>,
    slots: Vec<u128>,
    live: usize,
    tombstones: usize,
}

impl InvertedPageTable {
    pub fn new(cfg: IptConfig, frames: Range<Pfn>) -> Result<Self, IptError> {
        cfg.validate()?;
        Ok(Self { cfg, frames, slots: vec![0; cfg.slot_count], live: 0, tombstones: 0 })
    }

    pub fn config(&self) -> &IptConfig {
        &self.cfg
    }

    pub fn frames(&self) -> Range<Pfn> {
        self.frames.clone()
    }

    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn load_factor(&self) -> f64 {
        self.live as f64 / self.slots.len() as f64
    }

    /// Bytes of memory the table occupies.
    pub fn memory_bytes(&self) -> u64 {
        (self.slots.len() * ENTRY_BYTES) as u64
    }

    #[inline]
    pub fn hash(&self, vpn: Vpn, asid: Asid) -> usize {
        hash_unchecked(vpn / self.cfg.key_stride, asid, &self.cfg)
    }

    #[inline]
    fn next(&self, slot: usize) -> usize {
        let n = self.slots.len();
        if slot + 1 == n {
            0
        } else {
            slot + 1
        }
    }

    /// Linear probe from the home slot until a matching valid entry or a
    /// never-used slot.
    pub fn walk(&self, vpn: Vpn, asid: Asid) -> WalkResult {
        let key = key_bits(vpn, asid);
        let n = self.slots.len();
        let mut slot = self.hash(vpn, asid);
        let mut probes = 0;
        let mut refs = 0;
        let mut line = usize::MAX;
        while probes < n as u32 {
            probes += 1;
            if slot / ENTRIES_PER_LINE != line {
                line = slot / ENTRIES_PER_LINE;
                refs += 1;
            }
            let word = self.slots[slot];
            if word & USED_BIT == 0 {
                return WalkResult { pfn: None, probes, mem_refs: refs };
            }
            if word & VALID_BIT != 0 && word & KEY_MASK == key {
                let pfn = ((word >> 44) & PFN_MASK) as u64;
                return WalkResult { pfn: Some(pfn), probes, mem_refs: refs };
            }
            slot = self.next(slot);
        }
        WalkResult { pfn: None, probes, mem_refs: refs }
    }

    pub fn get(&self, vpn: Vpn, asid: Asid) -> Option<IptEntry> {
        self.find_slot(vpn, asid).map(|s| IptEntry::unpack(self.slots[s]))
    }

    fn find_slot(&self, vpn: Vpn, asid: Asid) -> Option<usize> {
        let key = key_bits(vpn, asid);
        let mut slot = self.hash(vpn, asid);
        for _ in 0..self.slots.len() {
            let word = self.slots[slot];
            if word & USED_BIT == 0 {
                return None;
            }
            if word & VALID_BIT != 0 && word & KEY_MASK == key {
                return Some(slot);
            }
            slot = self.next(slot);
        }
        None
    }

    /// Inserts or updates the mapping for `(entry.vpn, entry.asid)` and
    /// returns the slot it occupies.
    pub fn insert(&mut self, entry: IptEntry) -> Result<usize, IptError> {
        if !self.frames.contains(&entry.pfn) {
            return Err(IptError::ForeignFrame { pfn: entry.pfn, start: self.frames.start, end: self.frames.end });
        }
        let mut stored = entry;
        stored.valid = true;
        stored.flags |= PteFlags::USED;
        let word = stored.pack();
        let key = key_bits(entry.vpn, entry.asid);
        let mut slot = self.hash(entry.vpn, entry.asid);
        let mut reuse = None;
        for _ in 0..self.slots.len() {
            let cur = self.slots[slot];
            if cur & USED_BIT == 0 {
                let target = reuse.unwrap_or(slot);
                self.slots[target] = word;
                self.live += 1;
                if reuse.is_some() {
                    self.tombstones -= 1;
                }
                return Ok(target);
            }
            if cur & VALID_BIT == 0 {
                reuse.get_or_insert(slot);
            } else if cur & KEY_MASK == key {
                self.slots[slot] = word;
                return Ok(slot);
            }
            slot = self.next(slot);
        }
        match reuse {
            Some(target) => {
                self.slots[target] = word;
                self.live += 1;
                self.tombstones -= 1;
                Ok(target)
            }
            None => Err(IptError::Exhausted { slots: self.slots.len() }),
        }
    }

    /// Clears the valid bit; the slot stays a tombstone so probe chains
    /// through it remain intact.
    pub fn invalidate(&mut self, vpn: Vpn, asid: Asid) -> bool {
        match self.find_slot(vpn, asid) {
            Some(slot) => {
                self.slots[slot] &= !VALID_BIT;
                self.live -= 1;
                self.tombstones += 1;
                if self.tombstones > self.slots.len() / 4 {
                    self.rebuild();
                }
                true
            }
            None => false,
        }
    }

    pub fn tombstones(&self) -> usize {
        self.tombstones
    }

    /// Reinserts every live entry into a clean table, dropping tombstones.
    /// Triggered automatically once tombstones exceed a quarter of the slots.
    pub fn rebuild(&mut self) {
        let live: Vec<u128> = self.slots.iter().copied().filter(|w| w & VALID_BIT != 0).collect();
        self.slots.fill(0);
        self.live = 0;
        self.tombstones = 0;
        for w in live {
            self.insert(IptEntry::unpack(w)).expect("rebuild fits the same table");
        }
    }

    pub fn update_flags(&mut self, vpn: Vpn, asid: Asid, flags: PteFlags) -> bool {
        match self.find_slot(vpn, asid) {
            Some(slot) => {
                let mut e = IptEntry::unpack(self.slots[slot]);
                e.flags = flags | PteFlags::USED;
                self.slots[slot] = e.pack();
                true
            }
            None => false,
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = IptEntry> + '_ {
        self.slots.iter().filter(|&&w| w & VALID_BIT != 0).map(|&w| IptEntry::unpack(w))
    }

    /// Distribution of memory references needed to walk to each valid entry.
    pub fn probe_histogram(&self) -> BTreeMap<u32, u64> {
        self.histogram(|w| w.mem_refs)
    }

    /// Distribution of slots examined to walk to each valid entry.
    pub fn slot_probe_histogram(&self) -> BTreeMap<u32, u64> {
        self.histogram(|w| w.probes)
    }

    fn histogram(&self, metric: impl Fn(&WalkResult) -> u32) -> BTreeMap<u32, u64> {
        let mut hist = BTreeMap::new();
        for e in self.entries() {
            *hist.entry(metric(&self.walk(e.vpn, e.asid))).or_insert(0) += 1;
        }
        hist
    }

    /// Binary snapshot: magic, header, then every slot in wire layout.
    pub fn to_snapshot(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + self.slots.len() * ENTRY_BYTES);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&(self.slots.len() as u64).to_le_bytes());
        out.push(match self.cfg.hash {
            IptHash::Modulo => 0,
            IptHash::XorFold => 1,
        });
        out.extend_from_slice(&[0u8; 7]);
        out.extend_from_slice(&self.cfg.load_factor_target.to_le_bytes());
        out.extend_from_slice(&self.cfg.key_stride.to_le_bytes());
        out.extend_from_slice(&self.frames.start.to_le_bytes());
        out.extend_from_slice(&self.frames.end.to_le_bytes());
        for w in &self.slots {
            out.extend_from_slice(&w.to_be_bytes());
        }
        out
    }

    pub fn from_snapshot(bytes: &[u8]) -> Result<Self, IptError> {
        let bad = |m: &str| IptError::Snapshot(m.to_string());
        if bytes.len() < 56 || &bytes[..8] != SNAPSHOT_MAGIC {
            return Err(bad("missing magic header"));
        }
        let u64_at = |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let slot_count = u64_at(8) as usize;
        let hash = match bytes[16] {
            0 => IptHash::Modulo,
            1 => IptHash::XorFold,
            other => return Err(IptError::Snapshot(format!("unknown hash kind {other}"))),
        };
        let load_factor_target = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let key_stride = u64_at(32);
        let frames = u64_at(40)..u64_at(48);
        let body = &bytes[56..];
        if body.len() != slot_count * ENTRY_BYTES {
            return Err(bad("slot data length does not match header"));
        }
        let cfg = IptConfig { slot_count, load_factor_target, hash, key_stride };
        let mut table = Self::new(cfg, frames)?;
        for (i, chunk) in body.chunks_exact(ENTRY_BYTES).enumerate() {
            let w = u128::from_be_bytes(chunk.try_into().unwrap());
            table.slots[i] = w;
            if w & VALID_BIT != 0 {
                table.live += 1;
            } else if w & USED_BIT != 0 {
                table.tombstones += 1;
            }
        }
        Ok(table)
    }

    /// One line per used slot: `slot vpn asid pfn flags valid`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# slots={} hash={:?} stride={}", self.slots.len(), self.cfg.hash, self.cfg.key_stride);
        for (i, &w) in self.slots.iter().enumerate() {
            if w & USED_BIT == 0 {
                continue;
            }
            let e = IptEntry::unpack(w);
            let _ =
                writeln!(out, "{i} {:#x} {} {:#x} {:#05x} {}", e.vpn, e.asid, e.pfn, e.flags.bits(), u8::from(e.valid));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn asid(a: u32) -> Asid {
        Asid::new(a).unwrap()
    }

    fn table(slots: usize, hash: IptHash) -> InvertedPageTable {
        InvertedPageTable::new(IptConfig::with_slots(slots, hash).unwrap(), 0..1 << 20).unwrap()
    }

    /// Brute-force two distinct keys with the same home slot.
    fn colliding_pair(t: &InvertedPageTable) -> (Vpn, Vpn) {
        let mut seen = std::collections::HashMap::new();
        for vpn in 0.. {
            let h = t.hash(vpn, asid(0));
            if let Some(&prev) = seen.get(&h) {
                return (prev, vpn);
            }
            seen.insert(h, vpn);
        }
        unreachable!()
    }

    #[test]
    fn hash_examples() {
        for hash in [IptHash::Modulo, IptHash::XorFold] {
            let cfg = IptConfig::with_slots(1 << 10, hash).unwrap();
            assert_eq!(ipt_hash(0, asid(0), &cfg).unwrap(), 0);
        }
        let fold16 = IptConfig::with_slots(16, IptHash::XorFold).unwrap();
        assert_eq!(ipt_hash(0x33, asid(0), &fold16).unwrap(), 0);
        assert_eq!(ipt_hash(0x35, asid(0), &fold16).unwrap(), 0x6);
        let mod8 = IptConfig::with_slots(8, IptHash::Modulo).unwrap();
        assert_eq!(ipt_hash(13, asid(0), &mod8).unwrap(), 5);
    }

    #[test]
    fn hash_rejects_non_power_of_two_fold() {
        let cfg = IptConfig { slot_count: 12, load_factor_target: 0.25, hash: IptHash::XorFold, key_stride: 1 };
        assert!(matches!(ipt_hash(1, asid(0), &cfg), Err(IptError::Config(_))));
        assert!(IptConfig::with_slots(12, IptHash::Modulo).is_ok());
    }

    #[test]
    fn fold_covers_all_key_bits() {
        // k = 20 gives chunks [0,20), [20,40), [40,48); the asid lands in the top two.
        let cfg = IptConfig::with_slots(1 << 20, IptHash::XorFold).unwrap();
        let h0 = ipt_hash(5, asid(0), &cfg).unwrap();
        let h1 = ipt_hash(5, asid(1), &cfg).unwrap();
        assert_eq!(h0 ^ h1, 1 << 16);
        let h2 = ipt_hash(5, asid(16), &cfg).unwrap();
        assert_eq!(h0 ^ h2, 1);
    }

    #[test]
    fn sizing_rounds_to_power_of_two() {
        let cfg = IptConfig::for_capacity(1000, 0.25, IptHash::XorFold).unwrap();
        assert_eq!(cfg.slot_count, 4096);
        let cfg = IptConfig::for_capacity(1 << 16, 0.25, IptHash::XorFold).unwrap();
        assert_eq!(cfg.slot_count, 1 << 18);
        assert!(IptConfig::for_capacity(10, 0.0, IptHash::XorFold).is_err());
        assert!(IptConfig::for_capacity(10, 1.5, IptHash::XorFold).is_err());
    }

    #[test]
    fn space_accounting_is_one_point_six_percent() {
        // 4 KB pages at load factor 1/4: 4 x 16 B per 4096 B frame.
        let frames = 1u64 << 16;
        let t = InvertedPageTable::new(IptConfig::for_capacity(frames, 0.25, IptHash::XorFold).unwrap(), 0..frames)
            .unwrap();
        let share = t.memory_bytes() as f64 / (frames * 4096) as f64;
        assert!((share - 0.015625).abs() < 1e-12);
    }

    #[test]
    fn entry_layout_round_trips() {
        let e = IptEntry::new((1 << 36) - 1, asid(4095), (1 << 36) - 2, PteFlags::rw() | PteFlags::USED);
        assert_eq!(IptEntry::from_bytes(e.to_bytes()), e);
        let bytes = IptEntry::new(1, asid(0), 0, PteFlags::empty()).to_bytes();
        // vpn 1 occupies the lowest bit of the 36-bit field starting at bit 92.
        assert_eq!(bytes[4], 0x10);
        // The valid bit is bit 31, the top bit of byte 12.
        assert_eq!(bytes[12], 0x80);
        let mut rest = bytes.iter().enumerate().filter(|&(i, _)| i != 4 && i != 12);
        assert!(rest.all(|(_, &b)| b == 0));
        assert_eq!(bytes.len(), 16);
    }

    #[test]
    fn walk_empty_and_single() {
        let mut t = table(64, IptHash::XorFold);
        let w = t.walk(9, asid(1));
        assert_eq!(w, WalkResult { pfn: None, probes: 1, mem_refs: 1 });
        let slot = t.insert(IptEntry::new(9, asid(1), 77, PteFlags::rw())).unwrap();
        assert_eq!(slot, t.hash(9, asid(1)));
        let w = t.walk(9, asid(1));
        assert_eq!(w.pfn, Some(77));
        assert_eq!(w.probes, 1);
    }

    #[test]
    fn collision_needs_second_probe() {
        let mut t = table(64, IptHash::XorFold);
        let (a, b) = colliding_pair(&t);
        t.insert(IptEntry::new(a, asid(0), 1, PteFlags::rw())).unwrap();
        t.insert(IptEntry::new(b, asid(0), 2, PteFlags::rw())).unwrap();
        assert_eq!(t.walk(a, asid(0)).probes, 1);
        let wb = t.walk(b, asid(0));
        assert_eq!((wb.pfn, wb.probes), (Some(2), 2));
    }

    #[test]
    fn duplicate_insert_updates_in_place() {
        let mut t = table(64, IptHash::Modulo);
        let s1 = t.insert(IptEntry::new(5, asid(2), 10, PteFlags::ro())).unwrap();
        let s2 = t.insert(IptEntry::new(5, asid(2), 11, PteFlags::rw())).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t.len(), 1);
        assert_eq!(t.walk(5, asid(2)).pfn, Some(11));
    }

    #[test]
    fn tombstone_keeps_chain() {
        let mut t = table(64, IptHash::XorFold);
        assert!(!t.invalidate(3, asid(0)));
        let (a, b) = colliding_pair(&t);
        t.insert(IptEntry::new(a, asid(0), 1, PteFlags::rw())).unwrap();
        t.insert(IptEntry::new(b, asid(0), 2, PteFlags::rw())).unwrap();
        assert!(t.invalidate(a, asid(0)));
        assert_eq!(t.walk(a, asid(0)).pfn, None);
        let wb = t.walk(b, asid(0));
        assert_eq!((wb.pfn, wb.probes), (Some(2), 2));
        // The tombstone is recycled by the next insert on the chain.
        let slot = t.insert(IptEntry::new(a, asid(0), 3, PteFlags::rw())).unwrap();
        assert_eq!(slot, t.hash(a, asid(0)));
    }

    #[test]
    fn rejects_foreign_frames_and_exhaustion() {
        let mut t = InvertedPageTable::new(IptConfig::with_slots(2, IptHash::XorFold).unwrap(), 10..20).unwrap();
        assert!(matches!(t.insert(IptEntry::new(0, asid(0), 25, PteFlags::rw())), Err(IptError::ForeignFrame { .. })));
        t.insert(IptEntry::new(0, asid(0), 10, PteFlags::rw())).unwrap();
        t.insert(IptEntry::new(1, asid(0), 11, PteFlags::rw())).unwrap();
        assert!(matches!(t.insert(IptEntry::new(2, asid(0), 12, PteFlags::rw())), Err(IptError::Exhausted { .. })));
        let w = t.walk(2, asid(0));
        assert_eq!((w.pfn, w.probes), (None, 2));
    }

    #[test]
    fn histogram_examples() {
        let mut t = table(64, IptHash::XorFold);
        assert!(t.probe_histogram().is_empty());
        t.insert(IptEntry::new(1, asid(0), 1, PteFlags::rw())).unwrap();
        assert_eq!(t.probe_histogram(), BTreeMap::from([(1, 1)]));
    }

    #[test]
    fn wraparound_counts_a_new_line() {
        let mut t = table(8, IptHash::Modulo);
        t.insert(IptEntry::new(7, asid(0), 1, PteFlags::rw())).unwrap();
        t.insert(IptEntry::new(15, asid(0), 2, PteFlags::rw())).unwrap();
        let w = t.walk(15, asid(0));
        assert_eq!((w.probes, w.mem_refs), (2, 2));
        t.insert(IptEntry::new(6, asid(0), 3, PteFlags::rw())).unwrap();
        t.insert(IptEntry::new(14, asid(0), 4, PteFlags::rw())).unwrap();
        // Home slot 6, then 7 (same line) and 0 (next line, after wrapping).
        let w = t.walk(14, asid(0));
        assert_eq!((w.probes, w.mem_refs), (4, 2));
    }

    #[test]
    fn snapshot_round_trip_and_text() {
        let mut t = table(16, IptHash::XorFold);
        t.insert(IptEntry::new(3, asid(1), 5, PteFlags::rw())).unwrap();
        t.insert(IptEntry::new(4, asid(1), 6, PteFlags::ro())).unwrap();
        t.invalidate(4, asid(1));
        let snap = t.to_snapshot();
        assert_eq!(snap.len(), 56 + 16 * 16);
        let back = InvertedPageTable::from_snapshot(&snap).unwrap();
        assert_eq!(back.to_snapshot(), snap);
        assert_eq!(back.len(), 1);
        assert_eq!(back.walk(3, asid(1)).pfn, Some(5));
        let text = t.to_text();
        assert_eq!(text.lines().count(), 3);
        assert!(InvertedPageTable::from_snapshot(&snap[..40]).is_err());
    }

    #[test]
    fn churn_triggers_rebuild() {
        let mut t = table(64, IptHash::XorFold);
        for round in 0..10u64 {
            for k in 0..12 {
                t.insert(IptEntry::new(round * 100 + k, asid(0), k, PteFlags::rw())).unwrap();
            }
            for k in 0..12 {
                assert!(t.invalidate(round * 100 + k, asid(0)));
            }
            assert!(t.tombstones() <= 16);
        }
        t.insert(IptEntry::new(5, asid(0), 5, PteFlags::rw())).unwrap();
        t.rebuild();
        assert_eq!((t.len(), t.tombstones()), (1, 0));
        assert_eq!(t.walk(5, asid(0)).pfn, Some(5));
    }

    proptest! {
        #[test]
        fn insert_walk_round_trip(
            keys in proptest::collection::hash_set((0u64..1 << 20, 0u32..8), 1..200),
            fold: bool,
        ) {
            let hash = if fold { IptHash::XorFold } else { IptHash::Modulo };
            let mut t = table(256, hash);
            let keys: Vec<_> = keys.into_iter().collect();
            for (i, &(vpn, a)) in keys.iter().enumerate() {
                t.insert(IptEntry::new(vpn, asid(a), i as u64, PteFlags::rw())).unwrap();
            }
            for (i, &(vpn, a)) in keys.iter().enumerate() {
                let w = t.walk(vpn, asid(a));
                prop_assert_eq!(w.pfn, Some(i as u64));
                prop_assert!(w.probes >= 1 && w.probes as usize <= t.slot_count());
                prop_assert!(w.mem_refs >= 1 && w.mem_refs <= w.probes);
            }
        }

        #[test]
        fn tombstones_never_hide_entries(
            keys in proptest::collection::hash_set(0u64..4096, 2..120),
            drop_mask in proptest::collection::vec(any::<bool>(), 120),
        ) {
            let mut t = table(128, IptHash::XorFold);
            let keys: Vec<_> = keys.into_iter().collect();
            for &k in &keys {
                t.insert(IptEntry::new(k, asid(0), k, PteFlags::rw())).unwrap();
            }
            for (&k, &drop) in keys.iter().zip(&drop_mask) {
                if drop {
                    t.invalidate(k, asid(0));
                }
            }
            for (&k, &drop) in keys.iter().zip(&drop_mask) {
                let expect = if drop { None } else { Some(k) };
                prop_assert_eq!(t.walk(k, asid(0)).pfn, expect);
            }
        }

        #[test]
        fn fold_hash_in_range(vpn in 0u64..1 << 36, a in 0u32..4096, k in 0u32..24) {
            let cfg = IptConfig::with_slots(1 << k, IptHash::XorFold).unwrap();
            prop_assert!(ipt_hash(vpn, asid(a), &cfg).unwrap() < 1 << k);
        }
    }
}
