//! One TOML file fully describing a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addrspace::{PageGeometry, PageSize};
use crate::analysis::CpiParams;
use crate::engine::cache::CacheSpec;
use crate::latency::{CacheKind, LatencyParams, Mode, Topology};
use crate::osmm::IptSettings;
use crate::size::ByteSize;
use crate::tlb::TlbConfig;
use crate::workloads::WorkloadSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, message: message.into() }
}

/// TLB sizing. `ways = 0` means fully associative; `l2_entries = 0` means a
/// single level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TlbSpec {
    pub entries: u32,
    pub ways: u32,
    pub l2_entries: u32,
    pub l2_ways: u32,
}

impl Default for TlbSpec {
    fn default() -> Self {
        Self { entries: 128, ways: 4, l2_entries: 0, l2_ways: 0 }
    }
}

impl TlbSpec {
    pub fn new(entries: u32, ways: u32) -> Self {
        Self { entries, ways, l2_entries: 0, l2_ways: 0 }
    }

    pub fn fully_associative(entries: u32) -> Self {
        Self::new(entries, 0)
    }

    fn level(entries: u32, ways: u32, page: PageSize, stride: u64) -> Result<TlbConfig, String> {
        let ways = if ways == 0 { entries } else { ways.min(entries) };
        TlbConfig::new(entries as usize, ways as usize, page)
            .map(|c| c.with_index_stride(stride))
            .map_err(|e| e.to_string())
    }

    /// Level configurations, L1 first.
    pub fn levels(&self, page: PageSize, stride: u64) -> Result<Vec<TlbConfig>, String> {
        let mut out = vec![Self::level(self.entries, self.ways, page, stride)?];
        if self.l2_entries > 0 {
            out.push(Self::level(self.l2_entries, self.l2_ways, page, stride)?);
        }
        Ok(out)
    }

    pub fn total_entries(&self) -> u32 {
        self.entries.max(self.l2_entries)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub mode: Mode,
    pub page_size: PageSize,
    /// Translation partitions; conventional mode always uses one.
    pub partitions: u32,
    pub memory_bytes: ByteSize,
    pub topology: Topology,
    pub latency: LatencyParams,
    /// Conventional: each accelerator's TLB. SPARTA: each partition's
    /// memory-side TLB.
    pub tlb: TlbSpec,
    /// SPARTA accelerator-side TLB, used with physical caches.
    pub accel_tlb: TlbSpec,
    pub cache: CacheSpec,
    pub ipt: IptSettings,
    pub workload: Option<WorkloadSpec>,
    pub trace: Option<PathBuf>,
    /// Fraction of the trace replayed before statistics are reset.
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Records taken from each thread in turn when merging per-thread traces.
    pub interleave_chunk: usize,
    /// Permit an accelerator TLB in front of a virtual cache.
    pub allow_accel_tlb_with_virtual_cache: bool,
    pub cpi: CpiParams,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Conventional,
            page_size: PageSize::Small,
            partitions: 1,
            memory_bytes: ByteSize(2 << 30),
            topology: Topology::default(),
            latency: LatencyParams::default(),
            tlb: TlbSpec::default(),
            accel_tlb: TlbSpec::new(0, 0),
            cache: CacheSpec::default(),
            ipt: IptSettings::default(),
            workload: None,
            trace: None,
            warmup_fraction: 0.1,
            seed: 1,
            interleave_chunk: 1,
            allow_accel_tlb_with_virtual_cache: false,
            cpi: CpiParams::default(),
        }
    }
}

impl SystemConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: PathBuf::from("<inline>"), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        // Trace paths are relative to the config file.
        if let (Some(t), Some(dir)) = (cfg.trace.as_mut(), path.parent()) {
            if t.is_relative() {
                *t = dir.join(&*t);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Partition count actually used for translation.
    pub fn effective_partitions(&self) -> u32 {
        match self.mode {
            Mode::Conventional => 1,
            Mode::Sparta | Mode::Ideal => self.partitions,
        }
    }

    pub fn geometry(&self) -> Result<PageGeometry, ConfigError> {
        PageGeometry::from_memory(self.page_size, self.effective_partitions(), self.memory_bytes.0)
            .map_err(|e| invalid("memory_bytes", e.to_string()))
    }

    pub fn sparta_like(&self) -> bool {
        self.mode != Mode::Conventional
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sparta_like() && self.partitions == 0 {
            return Err(invalid("partitions", "SPARTA needs at least one partition"));
        }
        self.geometry()?;
        self.topology.validate().map_err(|e| invalid("topology", e.to_string()))?;
        self.latency.validate().map_err(|e| invalid("latency", e.to_string()))?;
        self.cache.validate().map_err(|e| invalid("cache", e))?;
        let stride = self.effective_partitions() as u64;
        self.tlb.levels(self.page_size, stride).map_err(|e| invalid("tlb", e))?;
        if self.accel_tlb.entries > 0 {
            self.accel_tlb.levels(self.page_size, 1).map_err(|e| invalid("accel_tlb", e))?;
            if self.mode == Mode::Conventional {
                return Err(invalid("accel_tlb", "conventional mode sizes its accelerator TLB through [tlb]"));
            }
            match self.cache.kind {
                CacheKind::Physical => {}
                CacheKind::Virtual if self.allow_accel_tlb_with_virtual_cache => {}
                CacheKind::Virtual => {
                    return Err(invalid(
                        "accel_tlb",
                        "a virtual cache needs no accelerator TLB (set allow_accel_tlb_with_virtual_cache to override)",
                    ))
                }
                CacheKind::None => return Err(invalid("accel_tlb", "an accelerator TLB needs a physical cache")),
            }
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(invalid("warmup_fraction", format!("{} outside [0, 1)", self.warmup_fraction)));
        }
        if self.interleave_chunk == 0 {
            return Err(invalid("interleave_chunk", "must be at least 1"));
        }
        if !(self.ipt.load_factor > 0.0 && self.ipt.load_factor <= 1.0) {
            return Err(invalid("ipt.load_factor", format!("{} outside (0, 1]", self.ipt.load_factor)));
        }
        self.cpi.validate().map_err(|e| invalid("cpi", e))?;
        if let Some(w) = &self.workload {
            w.validate().map_err(|e| invalid("workload", e.to_string()))?;
        }
        if self.workload.is_some() && self.trace.is_some() {
            return Err(invalid("trace", "give either a workload or a trace, not both"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads::WorkloadKind;

    const EXAMPLE: &str = r#"
mode = "sparta"
page_size = "2m"
partitions = 4
memory_bytes = "2GiB"
seed = 7

[topology]
sockets = 8
channels_per_socket = 4

[latency]
t_dram = 60.0

[tlb]
entries = 64
ways = 4
l2_entries = 1024
l2_ways = 8

[cache]
kind = "physical"
size = "16KiB"

[accel_tlb]
entries = 8

[workload]
kind = "skip_list"
footprint_bytes = "1GiB"
ops = 1000
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = SystemConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.mode, Mode::Sparta);
        assert_eq!(cfg.page_size, PageSize::Huge);
        assert_eq!(cfg.memory_bytes, ByteSize(2 << 30));
        assert_eq!(cfg.latency.t_dram, 60.0);
        assert_eq!(cfg.latency.t_noc_hop, 10.0);
        assert_eq!(cfg.cache.ways, 4);
        assert_eq!(cfg.workload.unwrap().kind, WorkloadKind::SkipList);
        cfg.validate().unwrap();
        let again = SystemConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(cfg.tlb.levels(PageSize::Huge, 4).unwrap().len(), 2);
    }

    #[test]
    fn rejects_unknown_fields_and_contradictions() {
        assert!(SystemConfig::from_toml("colour = 3").is_err());
        let mut cfg = SystemConfig { mode: Mode::Sparta, partitions: 0, ..Default::default() };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.starts_with("partitions:"), "{err}");
        cfg.partitions = 4;
        cfg.accel_tlb = TlbSpec::new(8, 0);
        cfg.cache.kind = CacheKind::Virtual;
        assert!(cfg.validate().unwrap_err().to_string().starts_with("accel_tlb:"));
        cfg.allow_accel_tlb_with_virtual_cache = true;
        cfg.validate().unwrap();
        cfg.warmup_fraction = 1.5;
        assert!(cfg.validate().is_err());
        let odd =
            SystemConfig { memory_bytes: ByteSize(3 << 20), partitions: 7, mode: Mode::Sparta, ..Default::default() };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn conventional_ignores_partitions() {
        let cfg = SystemConfig { partitions: 32, ..Default::default() };
        assert_eq!(cfg.effective_partitions(), 1);
        assert_eq!(cfg.geometry().unwrap().partition_count(), 1);
    }

    #[test]
    fn relative_trace_paths_follow_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "trace = \"t.bin\"\n").unwrap();
        let cfg = SystemConfig::load(&path).unwrap();
        assert_eq!(cfg.trace.unwrap(), dir.path().join("t.bin"));
        let missing = SystemConfig::load(&dir.path().join("nope.toml")).unwrap_err();
        assert!(missing.to_string().contains("nope.toml"));
    }
}
