use bitflags::bitflags;
use serde::{Deserialize, Serialize};

bitflags! {
    /// Twelve permission/status bits carried by page-table and TLB entries.
    #[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
    pub struct PteFlags: u16 {
        const READ = 1 << 0;
        const WRITE = 1 << 1;
        const EXEC = 1 << 2;
        const USER = 1 << 3;
        const ACCESSED = 1 << 4;
        const DIRTY = 1 << 5;
        const SHARED = 1 << 6;
        const COW = 1 << 7;
        /// Inverted page table slot has held an entry at some point.
        /// Distinguishes tombstones from never-used slots.
        const USED = 1 << 11;
    }
}

impl PteFlags {
    pub const MASK: u16 = 0x0fff;

    pub fn rw() -> Self {
        PteFlags::READ | PteFlags::WRITE | PteFlags::USER
    }

    pub fn ro() -> Self {
        PteFlags::READ | PteFlags::USER
    }
}
