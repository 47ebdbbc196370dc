//! Timeline latency model.
//!
//! An access is described by the events it incurs (TLB probes, DRAM reads,
//! cache probes, network legs), split into the total path and the part of it
//! that is exposed translation overhead. Evaluating the counts against a
//! [`LatencyParams`] gives nanoseconds. Keeping counts rather than times lets
//! the CPI model re-evaluate a run under different parameters.

use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addrspace::Pfn;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatencyError {
    #[error("latency parameter {name} must be finite and non-negative, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("topology needs at least one socket and one channel")]
    EmptyTopology,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    #[serde(alias = "conv")]
    Conventional,
    Sparta,
    /// SPARTA data path with every translation cost removed.
    Ideal,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Conventional => "conv",
            Mode::Sparta => "sparta",
            Mode::Ideal => "ideal",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conv" | "conventional" => Ok(Mode::Conventional),
            "sparta" => Ok(Mode::Sparta),
            "ideal" => Ok(Mode::Ideal),
            other => Err(format!("unknown mode {other:?} (expected conv, sparta or ideal)")),
        }
    }
}

/// Nanosecond costs of the individual events.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyParams {
    pub t_tlb_probe: f64,
    pub t_noc_hop: f64,
    /// One socket-to-socket traversal.
    pub t_offchip: f64,
    pub t_dram: f64,
    /// Accelerator cache probe.
    pub t_cache: f64,
    /// Virtual/physical request demultiplexing at the memory side.
    pub t_mux: f64,
}

impl Default for LatencyParams {
    fn default() -> Self {
        Self { t_tlb_probe: 1.0, t_noc_hop: 10.0, t_offchip: 40.0, t_dram: 50.0, t_cache: 2.0, t_mux: 0.0 }
    }
}

impl LatencyParams {
    pub fn validate(&self) -> Result<(), LatencyError> {
        let fields = [
            ("t_tlb_probe", self.t_tlb_probe),
            ("t_noc_hop", self.t_noc_hop),
            ("t_offchip", self.t_offchip),
            ("t_dram", self.t_dram),
            ("t_cache", self.t_cache),
            ("t_mux", self.t_mux),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value >= 0.0) {
                return Err(LatencyError::Negative { name, value });
            }
        }
        Ok(())
    }

    /// Every parameter multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            t_tlb_probe: self.t_tlb_probe * k,
            t_noc_hop: self.t_noc_hop * k,
            t_offchip: self.t_offchip * k,
            t_dram: self.t_dram * k,
            t_cache: self.t_cache * k,
            t_mux: self.t_mux * k,
        }
    }

    pub fn local_leg(&self) -> f64 {
        self.t_noc_hop
    }

    /// Source NoC, socket crossing, destination NoC.
    pub fn remote_leg(&self) -> f64 {
        2.0 * self.t_noc_hop + self.t_offchip
    }
}

/// Sockets and memory channels. Physical frames are spread over channels in
/// contiguous blocks, channel-major within a socket.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Topology {
    pub sockets: u32,
    pub channels_per_socket: u32,
}

impl Default for Topology {
    fn default() -> Self {
        Self { sockets: 2, channels_per_socket: 4 }
    }
}

impl Topology {
    pub fn new(sockets: u32, channels_per_socket: u32) -> Result<Self, LatencyError> {
        let t = Self { sockets, channels_per_socket };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), LatencyError> {
        if self.sockets == 0 || self.channels_per_socket == 0 {
            return Err(LatencyError::EmptyTopology);
        }
        Ok(())
    }

    pub fn channels(&self) -> u32 {
        self.sockets * self.channels_per_socket
    }

    pub fn socket_of_channel(&self, channel: u32) -> u32 {
        channel / self.channels_per_socket
    }

    pub fn channel_of_frame(&self, pfn: Pfn, total_frames: u64) -> u32 {
        ((pfn as u128 * self.channels() as u128) / total_frames.max(1) as u128) as u32
    }

    pub fn socket_of_frame(&self, pfn: Pfn, total_frames: u64) -> u32 {
        self.socket_of_channel(self.channel_of_frame(pfn, total_frames))
    }

    /// Number of socket crossings between an accelerator and a channel.
    pub fn distance(&self, src_socket: u32, channel: u32) -> u32 {
        u32::from(self.socket_of_channel(channel) != src_socket)
    }

    /// Expected one-way network time to a uniformly chosen channel.
    pub fn mean_net_time(&self, p: &LatencyParams) -> f64 {
        let s = self.sockets as f64;
        p.local_leg() / s + (s - 1.0) / s * p.remote_leg()
    }
}

/// One-way network time from an accelerator on `src_socket` to `channel`.
pub fn net_time(topo: &Topology, src_socket: u32, channel: u32, p: &LatencyParams) -> f64 {
    if topo.distance(src_socket, channel) == 0 {
        p.local_leg()
    } else {
        p.remote_leg()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub tlb_probes: u64,
    pub dram: u64,
    pub cache: u64,
    pub mux: u64,
    pub local_legs: u64,
    pub remote_legs: u64,
}

impl EventCounts {
    pub fn legs(&self) -> u64 {
        self.local_legs + self.remote_legs
    }

    fn fixed(&self, p: &LatencyParams) -> f64 {
        self.tlb_probes as f64 * p.t_tlb_probe
            + self.dram as f64 * p.t_dram
            + self.cache as f64 * p.t_cache
            + self.mux as f64 * p.t_mux
    }

    /// Time with every leg charged by its actual endpoints.
    pub fn eval(&self, p: &LatencyParams) -> f64 {
        self.fixed(p) + self.local_legs as f64 * p.local_leg() + self.remote_legs as f64 * p.remote_leg()
    }

    /// Time with every leg charged the topology's mean network time.
    pub fn eval_mean(&self, p: &LatencyParams, topo: &Topology) -> f64 {
        self.fixed(p) + self.legs() as f64 * topo.mean_net_time(p)
    }

    /// Adds `n` network legs, local or remote.
    pub fn add_legs(&mut self, remote: bool, n: u64) {
        if remote {
            self.remote_legs += n;
        } else {
            self.local_legs += n;
        }
    }
}

impl Add for EventCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tlb_probes: self.tlb_probes + o.tlb_probes,
            dram: self.dram + o.dram,
            cache: self.cache + o.cache,
            mux: self.mux + o.mux,
            local_legs: self.local_legs + o.local_legs,
            remote_legs: self.remote_legs + o.remote_legs,
        }
    }
}

impl AddAssign for EventCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sub for EventCounts {
    type Output = Self;

    fn sub(self, o: Self) -> Self {
        Self {
            tlb_probes: self.tlb_probes - o.tlb_probes,
            dram: self.dram - o.dram,
            cache: self.cache - o.cache,
            mux: self.mux - o.mux,
            local_legs: self.local_legs - o.local_legs,
            remote_legs: self.remote_legs - o.remote_legs,
        }
    }
}

/// Events of one access: the whole path and its exposed translation part.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessCost {
    pub total: EventCounts,
    pub exposed: EventCounts,
}

impl AddAssign for AccessCost {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.exposed += o.exposed;
    }
}

impl AccessCost {
    /// Latency and exposed translation in ns, legs charged by endpoint.
    pub fn eval(&self, p: &LatencyParams) -> (f64, f64) {
        (self.total.eval(p), self.exposed.eval(p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lookup {
    Hit,
    Miss,
    Absent,
}

impl Lookup {
    pub fn from_hit(hit: bool) -> Self {
        if hit {
            Lookup::Hit
        } else {
            Lookup::Miss
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccessOutcome {
    pub mode: Mode,
    pub acc_tlb: Lookup,
    pub cache: Lookup,
    pub mem_tlb: Lookup,
    pub latency: f64,
    pub exposed_translation: f64,
}

/// Conventional memory trip: accelerator TLB probe, on a miss a one-reference
/// walk to the channel holding the PTE, then the data round trip.
pub fn conv_events(tlb_hit: bool, data_remote: bool, walk_remote: bool) -> AccessCost {
    let mut c = AccessCost::default();
    c.total.tlb_probes = 1;
    c.exposed.tlb_probes = 1;
    if !tlb_hit {
        let mut walk = EventCounts { dram: 1, ..Default::default() };
        walk.add_legs(walk_remote, 2);
        c.total += walk;
        c.exposed += walk;
    }
    c.total.dram += 1;
    c.total.add_legs(data_remote, 2);
    c
}

/// SPARTA memory trip: request travels to the partition, is demultiplexed,
/// probes the memory-side TLB and on a miss walks the inverted page table
/// (`walk_refs` DRAM reads) before the data read.
pub fn sparta_events(mem_tlb_hit: bool, walk_refs: u32, remote: bool) -> AccessCost {
    let mut c = AccessCost::default();
    c.total.add_legs(remote, 2);
    c.total.mux = 1;
    c.total.tlb_probes = 1;
    c.total.dram = 1;
    c.exposed.tlb_probes = 1;
    if !mem_tlb_hit {
        c.total.dram += walk_refs as u64;
        c.exposed.dram += walk_refs as u64;
    }
    c
}

/// The SPARTA trip with its exposed part removed.
pub fn ideal_events(remote: bool) -> AccessCost {
    let s = sparta_events(true, 0, remote);
    AccessCost { total: s.total - s.exposed, exposed: EventCounts::default() }
}

/// Closed-form conventional outcome for given one-way network times.
pub fn conv_latency(tlb_hit: bool, net_data: f64, net_walk: f64, p: &LatencyParams) -> AccessOutcome {
    let data = 2.0 * net_data + p.t_dram;
    let exposed = if tlb_hit { p.t_tlb_probe } else { p.t_tlb_probe + 2.0 * net_walk + p.t_dram };
    AccessOutcome {
        mode: Mode::Conventional,
        acc_tlb: Lookup::from_hit(tlb_hit),
        cache: Lookup::Absent,
        mem_tlb: Lookup::Absent,
        latency: exposed + data,
        exposed_translation: exposed,
    }
}

/// Closed-form SPARTA outcome; `walk_refs` is the mean number of memory
/// references per inverted page table walk.
pub fn sparta_latency(mem_tlb_hit: bool, walk_refs: f64, net: f64, p: &LatencyParams) -> AccessOutcome {
    let exposed = if mem_tlb_hit { p.t_tlb_probe } else { p.t_tlb_probe + p.t_dram * walk_refs };
    AccessOutcome {
        mode: Mode::Sparta,
        acc_tlb: Lookup::Absent,
        cache: Lookup::Absent,
        mem_tlb: Lookup::from_hit(mem_tlb_hit),
        latency: net + p.t_mux + exposed + p.t_dram + net,
        exposed_translation: exposed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheKind {
    None,
    Virtual,
    Physical,
}

/// Events spent at the accelerator before the cache answers or the request
/// leaves for memory.
///
/// Virtual caches are probed without translation. Physical caches need the
/// accelerator TLB first and can only be probed on a TLB hit; on a miss under
/// SPARTA the request goes to memory, which returns the PTE with the data.
pub fn accel_cache_path(cache: CacheKind, acc_tlb: Lookup) -> AccessCost {
    let mut c = AccessCost::default();
    match cache {
        CacheKind::None => {}
        CacheKind::Virtual => c.total.cache = 1,
        CacheKind::Physical => {
            if acc_tlb != Lookup::Absent {
                c.total.tlb_probes = 1;
                c.exposed.tlb_probes = 1;
            }
            if acc_tlb == Lookup::Hit {
                c.total.cache = 1;
            }
        }
    }
    c
}

/// Miss penalty of each organisation: exposed translation on a miss minus
/// that on a hit, with uniform traffic over the topology.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyRow {
    pub sockets: u32,
    pub conv_penalty: f64,
    pub sparta_penalty: f64,
    pub ratio: f64,
}

pub fn normalized_miss_penalty(topologies: &[Topology], p: &LatencyParams, walk_refs: f64) -> Vec<PenaltyRow> {
    topologies
        .iter()
        .map(|t| {
            let net = t.mean_net_time(p);
            let conv = conv_latency(false, net, net, p).exposed_translation
                - conv_latency(true, net, net, p).exposed_translation;
            let sparta = sparta_latency(false, walk_refs, net, p).exposed_translation
                - sparta_latency(true, walk_refs, net, p).exposed_translation;
            PenaltyRow { sockets: t.sockets, conv_penalty: conv, sparta_penalty: sparta, ratio: sparta / conv }
        })
        .collect()
}
