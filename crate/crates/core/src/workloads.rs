//! Synthetic index-traversal traces.
//!
//! Generators emit the address pattern of a search over an index structure
//! laid out in a contiguous heap, without maintaining real keys. Keys are
//! uniform random. Node placement uses keyed pseudo-random permutations, so a
//! layout costs no memory and is fixed by the seed.
//!
//! Each thread also owns a few private pages (stack, request buffers) at the
//! top of the heap and touches one of them per operation.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addrspace::{Asid, PageSize, VirtualAddress};
use crate::engine::trace::{interleave, TraceRecord};
use crate::size::ByteSize;

pub const NODE_BYTES: u64 = 64;
pub const LEAF_BYTES: u64 = 128;
pub const BUCKET_BYTES: u64 = 8;
const SMALL_PAGE: u64 = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("workload footprint {0} bytes is smaller than one page")]
    TinyFootprint(u64),
    #[error("workload needs at least one operation")]
    NoOps,
    #[error("workload needs at least one thread")]
    NoThreads,
    #[error("a multiprogrammed mix needs at least two constituents")]
    LonelyMix,
    #[error("workload heap does not fit the virtual address space")]
    OutOfAddressSpace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    HashTable,
    SkipList,
    BstInternal,
    BstExternal,
    Multiprog,
}

impl WorkloadKind {
    pub const INDEXES: [WorkloadKind; 4] =
        [WorkloadKind::HashTable, WorkloadKind::SkipList, WorkloadKind::BstInternal, WorkloadKind::BstExternal];

    pub fn label(self) -> &'static str {
        match self {
            WorkloadKind::HashTable => "hash_table",
            WorkloadKind::SkipList => "skip_list",
            WorkloadKind::BstInternal => "bst_internal",
            WorkloadKind::BstExternal => "bst_external",
            WorkloadKind::Multiprog => "multiprog",
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for WorkloadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let all = [
            WorkloadKind::HashTable,
            WorkloadKind::SkipList,
            WorkloadKind::BstInternal,
            WorkloadKind::BstExternal,
            WorkloadKind::Multiprog,
        ];
        let norm = s.replace('-', "_");
        all.into_iter().find(|k| k.label() == norm).ok_or_else(|| {
            format!("unknown workload {s:?} (expected hash_table, skip_list, bst_internal, bst_external or multiprog)")
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub footprint_bytes: ByteSize,
    /// Searches across all threads.
    pub ops: u64,
    pub seed: u64,
    pub threads: u32,
    /// First address space id; a mix uses consecutive ids.
    pub asid: u16,
    pub private_pages: u32,
    /// Non-memory instructions charged before each reference.
    pub insns_per_access: u32,
    pub base_vaddr: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            kind: WorkloadKind::HashTable,
            footprint_bytes: ByteSize(1 << 30),
            ops: 1_000_000,
            seed: 1,
            threads: 1,
            asid: 1,
            private_pages: 16,
            insns_per_access: 4,
            base_vaddr: 1 << 32,
        }
    }
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, footprint_bytes: u64, ops: u64, seed: u64) -> Self {
        Self { kind, footprint_bytes: ByteSize(footprint_bytes), ops, seed, ..Self::default() }
    }

    pub fn with_threads(mut self, threads: u32) -> Self {
        self.threads = threads;
        self
    }

    pub fn with_private_pages(mut self, pages: u32) -> Self {
        self.private_pages = pages;
        self
    }

    pub fn footprint(&self) -> u64 {
        self.footprint_bytes.0
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.footprint() < SMALL_PAGE {
            return Err(WorkloadError::TinyFootprint(self.footprint()));
        }
        if self.ops == 0 {
            return Err(WorkloadError::NoOps);
        }
        if self.threads == 0 {
            return Err(WorkloadError::NoThreads);
        }
        if self.base_vaddr.checked_add(self.footprint()).is_none_or(|end| end > 1 << 48) {
            return Err(WorkloadError::OutOfAddressSpace);
        }
        Ok(())
    }

    /// Private pages per thread after clamping to a quarter of the heap.
    pub fn effective_private_pages(&self) -> u64 {
        let pages = self.footprint() / SMALL_PAGE;
        (self.private_pages as u64).min(pages / (4 * self.threads.max(1) as u64))
    }

    fn data_bytes(&self) -> u64 {
        self.footprint() - self.effective_private_pages() * self.threads as u64 * SMALL_PAGE
    }

    /// Nodes in the structure.
    pub fn node_count(&self) -> u64 {
        let per_node = match self.kind {
            WorkloadKind::HashTable => BUCKET_BYTES + NODE_BYTES,
            WorkloadKind::BstExternal => NODE_BYTES + LEAF_BYTES,
            _ => NODE_BYTES,
        };
        // External trees carry one more leaf than internal nodes.
        let reserve = if self.kind == WorkloadKind::BstExternal { LEAF_BYTES } else { 0 };
        ((self.data_bytes() - reserve.min(self.data_bytes())) / per_node).max(1)
    }
}

/// Keyed bijection on `0..n`: a balanced Feistel network on the enclosing
/// power of four, cycle-walked back into range.
#[derive(Clone, Copy, Debug)]
pub struct Permutation {
    n: u64,
    half_bits: u32,
    keys: [u64; 4],
}

fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl Permutation {
    pub fn new(n: u64, key: u64) -> Self {
        let bits = if n <= 1 { 0 } else { 64 - (n - 1).leading_zeros() };
        let half_bits = bits.div_ceil(2).max(1);
        let keys = [mix(key), mix(key ^ 0x9e37_79b9), mix(key ^ 0x7f4a_7c15), mix(key ^ 0x3c6e_f372)];
        Self { n, half_bits, keys }
    }

    fn round(&self, x: u64) -> u64 {
        let mask = (1u64 << self.half_bits) - 1;
        let (mut l, mut r) = (x >> self.half_bits, x & mask);
        for k in self.keys {
            let f = mix(r ^ k) & mask;
            (l, r) = (r, l ^ f);
        }
        (l << self.half_bits) | r
    }

    pub fn apply(&self, i: u64) -> u64 {
        debug_assert!(i < self.n);
        if self.n <= 1 {
            return 0;
        }
        let mut x = self.round(i);
        while x >= self.n {
            x = self.round(x);
        }
        x
    }
}

#[derive(Clone, Debug)]
enum Structure {
    Hash { buckets: u64, bucket_base: u64, node_base: u64, perm: Permutation },
    Skip { nodes: u64, base: u64, perm: Permutation, top: u32 },
    Bst { nodes: u64, base: u64, leaf_base: Option<u64>, levels: Vec<Permutation>, leaves: Permutation },
}

/// Address generator for one structure kind.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: WorkloadSpec,
    structure: Structure,
    private_base: u64,
    private_pages: u64,
}

impl Generator {
    pub fn new(spec: &WorkloadSpec) -> Result<Self, WorkloadError> {
        spec.validate()?;
        let n = spec.node_count();
        let base = spec.base_vaddr;
        let key = mix(spec.seed ^ 0x5eed);
        let structure = match spec.kind {
            WorkloadKind::HashTable => Structure::Hash {
                buckets: n,
                bucket_base: base,
                node_base: base + (n * BUCKET_BYTES).next_multiple_of(NODE_BYTES),
                perm: Permutation::new(n, key),
            },
            WorkloadKind::SkipList => {
                Structure::Skip { nodes: n, base, perm: Permutation::new(n, key), top: 63 - n.leading_zeros() }
            }
            WorkloadKind::BstInternal | WorkloadKind::BstExternal => {
                let depth = 64 - n.leading_zeros();
                let levels = (0..depth)
                    .map(|l| {
                        let start = (1u64 << l) - 1;
                        Permutation::new((1u64 << l).min(n - start), key ^ mix(l as u64 + 1))
                    })
                    .collect();
                let leaf_base = (spec.kind == WorkloadKind::BstExternal).then(|| base + n * NODE_BYTES);
                Structure::Bst { nodes: n, base, leaf_base, levels, leaves: Permutation::new(n + 1, key ^ 0x1eaf) }
            }
            WorkloadKind::Multiprog => unreachable!("mixes are split before generation"),
        };
        let private_pages = spec.effective_private_pages();
        let private_base = base + spec.footprint() - private_pages * spec.threads as u64 * SMALL_PAGE;
        Ok(Self { spec: *spec, structure, private_base, private_pages })
    }

    /// Appends the addresses of one search by `thread` to `out`.
    pub fn search(&self, rng: &mut impl Rng, thread: u32, out: &mut Vec<u64>) {
        if self.private_pages > 0 {
            let page = thread as u64 * self.private_pages + rng.gen_range(0..self.private_pages);
            out.push(self.private_base + page * SMALL_PAGE + rng.gen_range(0..SMALL_PAGE / 8) * 8);
        }
        match &self.structure {
            Structure::Hash { buckets, bucket_base, node_base, perm } => {
                let b = rng.gen_range(0..*buckets);
                out.push(bucket_base + b * BUCKET_BYTES);
                out.push(node_base + perm.apply(b) * NODE_BYTES);
            }
            Structure::Skip { nodes, base, perm, top } => {
                let x = rng.gen_range(0..*nodes);
                for level in (0..=*top).rev() {
                    let k = (x >> level) << level;
                    out.push(base + perm.apply(k) * NODE_BYTES);
                    let next = k + (1 << level);
                    if next < *nodes {
                        out.push(base + perm.apply(next) * NODE_BYTES);
                    }
                }
            }
            Structure::Bst { nodes, base, leaf_base, levels, leaves } => {
                let mut i = 0u64;
                let mut level = 0usize;
                loop {
                    let start = (1u64 << level) - 1;
                    out.push(base + (start + levels[level].apply(i - start)) * NODE_BYTES);
                    let child = 2 * i + 1 + rng.gen_range(0..2);
                    if child >= *nodes {
                        if let Some(lb) = leaf_base {
                            out.push(lb + leaves.apply(child - nodes) * LEAF_BYTES);
                        }
                        break;
                    }
                    i = child;
                    level += 1;
                }
            }
        }
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }
}

fn thread_rng(seed: u64, thread: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(thread as u64 + 1);
    rng
}

/// Splits `ops` over `threads`, remainder to the lowest threads.
fn share(ops: u64, threads: u32, t: u32) -> u64 {
    ops / threads as u64 + u64::from((t as u64) < ops % threads as u64)
}

/// One trace per thread of a single-structure workload. Thread ids start at
/// `first_thread`.
fn per_thread(spec: &WorkloadSpec, first_thread: u16) -> Result<Vec<Vec<TraceRecord>>, WorkloadError> {
    let gen = Generator::new(spec)?;
    let asid = Asid::new(spec.asid as u32).map_err(|_| WorkloadError::OutOfAddressSpace)?;
    let mut traces = Vec::with_capacity(spec.threads as usize);
    let mut addrs = Vec::with_capacity(64);
    for t in 0..spec.threads {
        let mut rng = thread_rng(spec.seed, t);
        let ops = share(spec.ops, spec.threads, t);
        let mut trace = Vec::with_capacity(ops as usize * 4);
        for _ in 0..ops {
            addrs.clear();
            gen.search(&mut rng, t, &mut addrs);
            for &a in &addrs {
                trace.push(TraceRecord {
                    thread: first_thread + t as u16,
                    asid,
                    vaddr: VirtualAddress::new(a).expect("heap inside the address space"),
                    is_write: false,
                    insns_since_prev: spec.insns_per_access,
                });
            }
        }
        traces.push(trace);
    }
    Ok(traces)
}

/// Constituents of a multiprogrammed run: the four index kinds, each with a
/// quarter of the footprint, operations and threads.
pub fn mix_constituents(spec: &WorkloadSpec) -> Vec<WorkloadSpec> {
    WorkloadKind::INDEXES
        .iter()
        .enumerate()
        .map(|(i, &kind)| WorkloadSpec {
            kind,
            footprint_bytes: ByteSize(spec.footprint() / 4),
            ops: (spec.ops / 4).max(1),
            threads: (spec.threads / 4).max(1),
            seed: spec.seed.wrapping_add(i as u64),
            ..*spec
        })
        .collect()
}

/// Independent traces for each constituent, with consecutive ASIDs starting
/// at the first spec's and disjoint heaps.
pub fn gen_multiprog(specs: &[WorkloadSpec]) -> Result<Vec<Vec<TraceRecord>>, WorkloadError> {
    if specs.len() < 2 {
        return Err(WorkloadError::LonelyMix);
    }
    let mut out = Vec::new();
    let mut base = specs[0].base_vaddr;
    let mut thread = 0u16;
    for (i, s) in specs.iter().enumerate() {
        let s = WorkloadSpec { asid: specs[0].asid + i as u16, base_vaddr: base, ..*s };
        out.extend(per_thread(&s, thread)?);
        thread += s.threads as u16;
        base += s.footprint().next_multiple_of(PageSize::Huge.bytes());
    }
    Ok(out)
}

/// Per-thread traces for any workload kind.
pub fn generate_threads(spec: &WorkloadSpec) -> Result<Vec<Vec<TraceRecord>>, WorkloadError> {
    spec.validate()?;
    match spec.kind {
        WorkloadKind::Multiprog => gen_multiprog(&mix_constituents(spec)),
        _ => per_thread(spec, 0),
    }
}

/// Merged trace, threads interleaved round-robin.
pub fn generate(spec: &WorkloadSpec, chunk: usize) -> Result<Vec<TraceRecord>, WorkloadError> {
    Ok(interleave(generate_threads(spec)?, chunk))
}

pub fn gen_hash_table(spec: &WorkloadSpec) -> Result<Vec<TraceRecord>, WorkloadError> {
    generate(&WorkloadSpec { kind: WorkloadKind::HashTable, ..*spec }, 1)
}

pub fn gen_skip_list(spec: &WorkloadSpec) -> Result<Vec<TraceRecord>, WorkloadError> {
    generate(&WorkloadSpec { kind: WorkloadKind::SkipList, ..*spec }, 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BstVariant {
    Internal,
    External,
}

pub fn gen_bst(spec: &WorkloadSpec, variant: BstVariant) -> Result<Vec<TraceRecord>, WorkloadError> {
    let kind = match variant {
        BstVariant::Internal => WorkloadKind::BstInternal,
        BstVariant::External => WorkloadKind::BstExternal,
    };
    generate(&WorkloadSpec { kind, ..*spec }, 1)
}

/// Operations giving roughly `records` references, estimated from a sample
/// of searches.
pub fn ops_for_records(spec: &WorkloadSpec, records: u64) -> Result<u64, WorkloadError> {
    let specs = match spec.kind {
        WorkloadKind::Multiprog => mix_constituents(spec),
        _ => vec![*spec],
    };
    let mut per_op = 0.0;
    for s in &specs {
        let gen = Generator::new(s)?;
        let mut rng = thread_rng(s.seed ^ 0xa11, 0);
        let mut out = Vec::new();
        const SAMPLE: usize = 256;
        for _ in 0..SAMPLE {
            gen.search(&mut rng, 0, &mut out);
        }
        per_op += out.len() as f64 / SAMPLE as f64 / specs.len() as f64;
    }
    Ok(((records as f64 / per_op).round() as u64).max(1))
}

/// Distinct `(asid, page)` pairs touched by a trace.
pub fn distinct_pages(trace: &[TraceRecord], page: PageSize) -> usize {
    let mut seen = FxHashSet::default();
    for r in trace {
        seen.insert((r.asid, r.vaddr.get() >> page.shift()));
    }
    seen.len()
}
