//! Accelerator data cache.

use serde::{Deserialize, Serialize};

use crate::latency::CacheKind;
use crate::lru::SetAssocLru;
use crate::size::ByteSize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSpec {
    pub kind: CacheKind,
    pub size: ByteSize,
    pub ways: u32,
    pub line: u64,
}

impl Default for CacheSpec {
    fn default() -> Self {
        Self { kind: CacheKind::None, size: ByteSize(16 * 1024), ways: 4, line: 64 }
    }
}

impl CacheSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.kind == CacheKind::None {
            return Ok(());
        }
        if self.ways == 0 || self.line == 0 || !self.line.is_power_of_two() {
            return Err(format!("cache needs ways > 0 and a power-of-two line, got {} / {}", self.ways, self.line));
        }
        let set_bytes = self.ways as u64 * self.line;
        if self.size.0 == 0 || !self.size.0.is_multiple_of(set_bytes) {
            return Err(format!("cache size {} is not a multiple of ways x line = {set_bytes}", self.size));
        }
        Ok(())
    }

    pub fn sets(&self) -> usize {
        (self.size.0 / (self.ways as u64 * self.line)) as usize
    }
}

/// Set-associative LRU cache over line tags. Virtual caches tag lines with the
/// ASID and virtual address, physical caches with the physical address.
#[derive(Clone, Debug)]
pub struct Cache {
    spec: CacheSpec,
    line_shift: u32,
    lines: SetAssocLru<u64, ()>,
}

impl Cache {
    pub fn new(spec: CacheSpec) -> Result<Self, String> {
        spec.validate()?;
        let line_shift = spec.line.trailing_zeros();
        Ok(Self { spec, line_shift, lines: SetAssocLru::new(spec.sets(), spec.ways as usize) })
    }

    pub fn spec(&self) -> &CacheSpec {
        &self.spec
    }

    /// Tag for a virtual cache: ASID above the 48-bit address.
    pub fn virtual_tag(&self, asid: u16, vaddr: u64) -> u64 {
        (((asid as u64) << 48) | vaddr) >> self.line_shift
    }

    pub fn physical_tag(&self, paddr: u64) -> u64 {
        paddr >> self.line_shift
    }

    #[inline]
    fn set(&self, tag: u64) -> usize {
        (tag % self.lines.sets() as u64) as usize
    }

    /// Looks the line up and allocates it on a miss.
    pub fn access(&mut self, tag: u64) -> bool {
        if self.lines.get(&tag).is_some() {
            return true;
        }
        let set = self.set(tag);
        self.lines.insert(set, tag, ());
        false
    }

    pub fn probe(&mut self, tag: u64) -> bool {
        self.lines.get(&tag).is_some()
    }

    pub fn fill(&mut self, tag: u64) {
        let set = self.set(tag);
        self.lines.insert(set, tag, ());
    }

    /// Drops every line with a tag in `tags`.
    pub fn invalidate_range(&mut self, tags: std::ops::Range<u64>) {
        if tags.end - tags.start <= self.lines.capacity() as u64 {
            for t in tags {
                self.lines.remove(&t);
            }
        } else {
            let doomed: Vec<u64> = self.lines.iter().map(|(t, _)| t).filter(|t| tags.contains(t)).collect();
            for t in doomed {
                self.lines.remove(&t);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn line_shift(&self) -> u32 {
        self.line_shift
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> CacheSpec {
        CacheSpec { kind: CacheKind::Physical, size: ByteSize(16 * 1024), ways: 4, line: 64 }
    }

    #[test]
    fn geometry_validation() {
        assert_eq!(spec().sets(), 64);
        assert!(CacheSpec { size: ByteSize(1000), ..spec() }.validate().is_err());
        assert!(CacheSpec { line: 48, ..spec() }.validate().is_err());
        assert!(CacheSpec { kind: CacheKind::None, size: ByteSize(0), ..spec() }.validate().is_ok());
    }

    #[test]
    fn hits_within_a_line_and_lru_eviction() {
        let mut c = Cache::new(spec()).unwrap();
        assert!(!c.access(c.physical_tag(0x1000)));
        assert!(c.access(c.physical_tag(0x103f)));
        assert!(!c.access(c.physical_tag(0x1040)));
        // Five lines mapping to one set of a 4-way cache.
        let stride = 64 * 64;
        for i in 0..5u64 {
            c.access(c.physical_tag(0x10_0000 + i * stride));
        }
        assert!(!c.probe(c.physical_tag(0x10_0000)));
        assert!(c.probe(c.physical_tag(0x10_0000 + 4 * stride)));
    }

    #[test]
    fn virtual_tags_separate_asids() {
        let mut c = Cache::new(CacheSpec { kind: CacheKind::Virtual, ..spec() }).unwrap();
        assert!(!c.access(c.virtual_tag(1, 0x4000)));
        assert!(!c.access(c.virtual_tag(2, 0x4000)));
        assert!(c.access(c.virtual_tag(1, 0x4010)));
    }

    #[test]
    fn invalidate_page() {
        let mut c = Cache::new(spec()).unwrap();
        for off in (0..4096).step_by(64) {
            c.access(c.physical_tag(0x8000 + off));
        }
        c.access(c.physical_tag(0x20000));
        let lo = c.physical_tag(0x8000);
        c.invalidate_range(lo..lo + 64);
        assert_eq!(c.len(), 1);
        // A range larger than the cache takes the scanning path.
        c.invalidate_range(0..1 << 30);
        assert!(c.is_empty());
    }
}
