//! Address arithmetic, page/partition geometry and partition routing.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of virtual and physical addresses.
pub const ADDRESS_BITS: u32 = 48;
/// Width of a physical frame number.
pub const PFN_BITS: u32 = 36;
/// Width of an address-space identifier.
pub const ASID_BITS: u32 = 12;

pub type Vpn = u64;
pub type Pfn = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AddrError {
    #[error("address {0:#x} does not fit in {ADDRESS_BITS} bits")]
    AddressOutOfRange(u64),
    #[error("asid {0} does not fit in {ASID_BITS} bits")]
    AsidOutOfRange(u32),
    #[error("frame {pfn} is outside physical memory ({frames} frames)")]
    FrameOutOfRange { pfn: Pfn, frames: u64 },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
}

/// A 48-bit virtual address.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct VirtualAddress(u64);

impl VirtualAddress {
    pub const MAX: u64 = (1 << ADDRESS_BITS) - 1;

    pub fn new(value: u64) -> Result<Self, AddrError> {
        if value > Self::MAX {
            return Err(AddrError::AddressOutOfRange(value));
        }
        Ok(Self(value))
    }

    #[inline]
    pub fn get(self) -> u64 {
        self.0
    }
}

impl TryFrom<u64> for VirtualAddress {
    type Error = AddrError;
    fn try_from(value: u64) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<VirtualAddress> for u64 {
    fn from(v: VirtualAddress) -> u64 {
        v.0
    }
}

impl fmt::Debug for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VirtualAddress({:#x})", self.0)
    }
}

impl fmt::Display for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// A 12-bit address-space identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Asid(u16);

impl Asid {
    pub const MAX: u16 = (1 << ASID_BITS) - 1;

    pub fn new(id: u32) -> Result<Self, AddrError> {
        if id > Self::MAX as u32 {
            return Err(AddrError::AsidOutOfRange(id));
        }
        Ok(Self(id as u16))
    }

    #[inline]
    pub fn get(self) -> u16 {
        self.0
    }
}

impl TryFrom<u32> for Asid {
    type Error = AddrError;
    fn try_from(value: u32) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Asid> for u32 {
    fn from(a: Asid) -> u32 {
        a.0 as u32
    }
}

impl fmt::Display for Asid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Translation granule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum PageSize {
    #[default]
    #[serde(rename = "4k")]
    Small,
    #[serde(rename = "2m")]
    Huge,
}

impl PageSize {
    #[inline]
    pub const fn shift(self) -> u32 {
        match self {
            PageSize::Small => 12,
            PageSize::Huge => 21,
        }
    }

    #[inline]
    pub const fn bytes(self) -> u64 {
        1 << self.shift()
    }

    pub fn from_bytes(bytes: u64) -> Option<Self> {
        match bytes {
            4096 => Some(PageSize::Small),
            2097152 => Some(PageSize::Huge),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PageSize::Small => "4k",
            PageSize::Huge => "2m",
        }
    }
}

impl std::str::FromStr for PageSize {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "4k" | "4kb" | "4kib" | "4096" => Ok(PageSize::Small),
            "2m" | "2mb" | "2mib" | "2097152" => Ok(PageSize::Huge),
            other => Err(format!("unsupported page size `{other}` (expected 4k or 2m)")),
        }
    }
}

/// Strategy used to route a virtual page to its memory partition.
///
/// Only the modulo scheme exists today; the enum is the extension point for
/// bit-select or hashed variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionHash {
    #[default]
    Modulo,
}

impl PartitionHash {
    #[inline]
    pub fn route(self, vpn: Vpn, partitions: u32) -> u32 {
        match self {
            PartitionHash::Modulo => (vpn % partitions as u64) as u32,
        }
    }
}

/// A physical frame together with the partition that owns it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PhysicalFrame {
    pub pfn: Pfn,
    pub partition: u32,
}

/// Page size and the split of physical memory into equally sized partitions.
///
/// Partition `p` owns the contiguous frame range
/// `[p * capacity, (p + 1) * capacity)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageGeometry {
    page_size: PageSize,
    partition_count: u32,
    partition_capacity: u64,
    #[serde(default)]
    hash: PartitionHash,
}

impl PageGeometry {
    pub fn new(page_size: PageSize, partition_count: u32, partition_capacity: u64) -> Result<Self, AddrError> {
        if partition_count == 0 {
            return Err(AddrError::InvalidGeometry("partition_count must be at least 1".into()));
        }
        if partition_capacity == 0 {
            return Err(AddrError::InvalidGeometry("partition_capacity must be at least 1".into()));
        }
        let frames = partition_capacity
            .checked_mul(partition_count as u64)
            .ok_or_else(|| AddrError::InvalidGeometry("frame count overflows".into()))?;
        if frames > 1 << PFN_BITS {
            return Err(AddrError::InvalidGeometry(format!(
                "{frames} frames exceed the {PFN_BITS}-bit frame number space"
            )));
        }
        Ok(Self { page_size, partition_count, partition_capacity, hash: PartitionHash::Modulo })
    }

    /// Splits `memory_bytes` of physical memory into `partition_count` partitions.
    pub fn from_memory(page_size: PageSize, partition_count: u32, memory_bytes: u64) -> Result<Self, AddrError> {
        if partition_count == 0 {
            return Err(AddrError::InvalidGeometry("partition_count must be at least 1".into()));
        }
        let page = page_size.bytes();
        let per_partition = page * partition_count as u64;
        if memory_bytes == 0 || !memory_bytes.is_multiple_of(per_partition) {
            return Err(AddrError::InvalidGeometry(format!(
                "memory size {memory_bytes} is not a multiple of {partition_count} partitions x {page}-byte pages"
            )));
        }
        Self::new(page_size, partition_count, memory_bytes / per_partition)
    }

    pub fn with_hash(mut self, hash: PartitionHash) -> Self {
        self.hash = hash;
        self
    }

    #[inline]
    pub fn page_size(&self) -> PageSize {
        self.page_size
    }

    #[inline]
    pub fn partition_count(&self) -> u32 {
        self.partition_count
    }

    #[inline]
    pub fn partition_capacity(&self) -> u64 {
        self.partition_capacity
    }

    #[inline]
    pub fn total_frames(&self) -> u64 {
        self.partition_capacity * self.partition_count as u64
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_frames() * self.page_size.bytes()
    }

    /// Splits an address into page number and page offset.
    #[inline]
    pub fn split(&self, vaddr: VirtualAddress) -> (Vpn, u64) {
        let shift = self.page_size.shift();
        (vaddr.get() >> shift, vaddr.get() & (self.page_size.bytes() - 1))
    }

    pub fn join(&self, vpn: Vpn, offset: u64) -> Result<VirtualAddress, AddrError> {
        let bytes = self.page_size.bytes();
        let value = vpn
            .checked_mul(bytes)
            .and_then(|base| base.checked_add(offset % bytes))
            .ok_or(AddrError::AddressOutOfRange(u64::MAX))?;
        VirtualAddress::new(value)
    }

    /// Number of virtual pages in the 48-bit address space.
    pub fn virtual_pages(&self) -> u64 {
        1 << (ADDRESS_BITS - self.page_size.shift())
    }

    /// Memory partition a virtual address is routed to.
    #[inline]
    pub fn partition_index(&self, vaddr: VirtualAddress) -> u32 {
        self.partition_of_vpn(vaddr.get() >> self.page_size.shift())
    }

    #[inline]
    pub fn partition_of_vpn(&self, vpn: Vpn) -> u32 {
        self.hash.route(vpn, self.partition_count)
    }

    /// Partition owning a physical frame.
    #[inline]
    pub fn frame_partition(&self, pfn: Pfn) -> Result<u32, AddrError> {
        if pfn >= self.total_frames() {
            return Err(AddrError::FrameOutOfRange { pfn, frames: self.total_frames() });
        }
        Ok((pfn / self.partition_capacity) as u32)
    }

    pub fn frame(&self, pfn: Pfn) -> Result<PhysicalFrame, AddrError> {
        Ok(PhysicalFrame { pfn, partition: self.frame_partition(pfn)? })
    }

    /// Frame range owned by partition `p`.
    pub fn partition_frames(&self, p: u32) -> Range<Pfn> {
        let start = p as u64 * self.partition_capacity;
        start..start + self.partition_capacity
    }
}
