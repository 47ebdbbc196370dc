//! Trace-driven model of partitioned, memory-side address translation for
//! near-memory accelerators.

pub mod addrspace;
pub mod analysis;
pub mod config;
pub mod engine;
pub mod ipt;
pub mod latency;
pub(crate) mod lru;
pub mod osmm;
pub mod pte;
pub mod recipes;
pub mod size;
pub mod tlb;
pub mod workloads;
