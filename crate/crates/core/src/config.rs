//! Run configuration, loaded from a TOML key/value file.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ProtectionMode {
    /// No speculative buffer: speculative fills go straight into the L1.
    Unsafe,
    /// Speculative buffer wiped on squash, without timestamp checks.
    FlushOnly,
    /// Speculative buffer with timestamp guards, leapfrogging and
    /// timestamp-ordered non-pipelined units.
    Ghostminion,
}

impl ProtectionMode {
    pub fn has_minion(self) -> bool {
        !matches!(self, ProtectionMode::Unsafe)
    }

    pub fn timeguarded(self) -> bool {
        matches!(self, ProtectionMode::Ghostminion)
    }
}

/// What a speculative load does when a remote private cache holds the line
/// Exclusive or Modified.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoherencePolicy {
    /// Forward a noncoherent copy, validated by replay at commit.
    Forward,
    /// Wait until the load is non-speculative.
    Defer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoreConfig {
    pub width: usize,
    pub rob_size: usize,
    pub fetch_queue: usize,
    pub mem_ports: usize,
    pub alu_units: usize,
    pub mul_units: usize,
    pub div_units: usize,
    pub alu_latency: u64,
    pub mul_latency: u64,
    pub div_latency: u64,
    /// Cycles between a squash and the first refetch.
    pub squash_penalty: u64,
    pub btb_entries: usize,
    pub predictor_entries: usize,
}

impl Default for CoreConfig {
    fn default() -> Self {
        Self {
            width: 4,
            rob_size: 64,
            fetch_queue: 16,
            mem_ports: 2,
            alu_units: 4,
            mul_units: 1,
            div_units: 1,
            alu_latency: 1,
            mul_latency: 3,
            div_latency: 20,
            squash_penalty: 5,
            btb_entries: 256,
            predictor_entries: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    pub size_bytes: usize,
    pub ways: usize,
    pub latency: u64,
    pub mshrs: usize,
}

impl CacheConfig {
    pub fn sets(&self, line_bytes: usize) -> usize {
        self.size_bytes / (self.ways * line_bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinionConfig {
    pub size_bytes: usize,
    pub ways: usize,
}

impl Default for MinionConfig {
    fn default() -> Self {
        Self { size_bytes: 2048, ways: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefetchConfig {
    pub l1_enabled: bool,
    pub l2_enabled: bool,
    pub table_entries: usize,
    /// Consecutive matching strides needed before a prefetch issues.
    pub confidence_threshold: u8,
}

impl Default for PrefetchConfig {
    fn default() -> Self {
        Self { l1_enabled: false, l2_enabled: true, table_entries: 64, confidence_threshold: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Features {
    pub async_reload: bool,
    /// Two-core directory coherence mode.
    pub coherence_mode: bool,
    pub coherence_policy: CoherencePolicy,
    pub icache_minion: bool,
    /// Compare timestamps with the unbounded shadow counter.
    pub unbounded_timestamps: bool,
    /// Schedule non-pipelined units in timestamp order even outside
    /// ghostminion mode (`None` follows the protection mode).
    pub ordered_nonpipelined: Option<bool>,
}

impl Default for Features {
    fn default() -> Self {
        Self {
            async_reload: false,
            coherence_mode: false,
            coherence_policy: CoherencePolicy::Forward,
            icache_minion: true,
            unbounded_timestamps: false,
            ordered_nonpipelined: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: ProtectionMode,
    pub max_cycles: u64,
    pub line_bytes: usize,
    pub mem_bytes: u64,
    pub memory_latency: u64,
    pub core: CoreConfig,
    pub l1d: CacheConfig,
    pub l1i: CacheConfig,
    pub l2: CacheConfig,
    pub dminion: MinionConfig,
    pub iminion: MinionConfig,
    pub prefetch: PrefetchConfig,
    pub features: Features,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: ProtectionMode::Ghostminion,
            max_cycles: 2_000_000,
            line_bytes: 64,
            mem_bytes: 1 << 24,
            memory_latency: 100,
            core: CoreConfig::default(),
            l1d: CacheConfig { size_bytes: 64 * 1024, ways: 2, latency: 2, mshrs: 4 },
            l1i: CacheConfig { size_bytes: 32 * 1024, ways: 2, latency: 2, mshrs: 4 },
            l2: CacheConfig { size_bytes: 2 * 1024 * 1024, ways: 8, latency: 20, mshrs: 20 },
            dminion: MinionConfig::default(),
            iminion: MinionConfig::default(),
            prefetch: PrefetchConfig::default(),
            features: Features::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn with_mode(mut self, mode: ProtectionMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Whether non-pipelined units issue in timestamp order.
    pub fn ordered_nonpipelined(&self) -> bool {
        self.features.ordered_nonpipelined.unwrap_or(self.mode.timeguarded())
    }

    pub fn num_cores(&self) -> usize {
        if self.features.coherence_mode {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !self.line_bytes.is_power_of_two() || self.line_bytes < 8 {
            return bad("line_bytes must be a power of two >= 8");
        }
        if !self.mem_bytes.is_power_of_two() {
            return bad("mem_bytes must be a power of two");
        }
        let c = &self.core;
        if c.width == 0 || c.rob_size == 0 || c.fetch_queue == 0 || c.mem_ports == 0 {
            return bad("core widths and capacities must be nonzero");
        }
        if c.alu_units == 0 || c.mul_units == 0 || c.div_units == 0 {
            return bad("every functional-unit class needs at least one unit");
        }
        if c.alu_latency == 0 || c.mul_latency == 0 || c.div_latency == 0 {
            return bad("functional-unit latencies must be nonzero");
        }
        if !c.btb_entries.is_power_of_two() || !c.predictor_entries.is_power_of_two() {
            return bad("predictor tables must be powers of two");
        }
        for (name, cache) in [("l1d", &self.l1d), ("l1i", &self.l1i), ("l2", &self.l2)] {
            if cache.ways == 0 || cache.mshrs == 0 || cache.latency == 0 {
                return Err(ConfigError::Invalid(format!("{name}: ways, mshrs and latency must be nonzero")));
            }
            let sets = cache.sets(self.line_bytes);
            if sets == 0 || !sets.is_power_of_two() || sets * cache.ways * self.line_bytes != cache.size_bytes {
                return Err(ConfigError::Invalid(format!("{name}: size must be ways * line * 2^k")));
            }
        }
        for (name, m) in [("dminion", &self.dminion), ("iminion", &self.iminion)] {
            let sets = if m.ways == 0 { 0 } else { m.size_bytes / (m.ways * self.line_bytes) };
            if sets == 0 || !sets.is_power_of_two() || sets * m.ways * self.line_bytes != m.size_bytes {
                return Err(ConfigError::Invalid(format!("{name}: size must be ways * line * 2^k")));
            }
        }
        if self.prefetch.table_entries == 0 || !self.prefetch.table_entries.is_power_of_two() {
            return bad("prefetch table_entries must be a power of two");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default().with_mode(ProtectionMode::FlushOnly);
        cfg.features.async_reload = true;
        cfg.core.width = 8;
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("mode = \"unsafe\"\n[core]\nwidth = 2\n").unwrap();
        assert_eq!(cfg.mode, ProtectionMode::Unsafe);
        assert_eq!(cfg.core.width, 2);
        assert_eq!(cfg.core.rob_size, 64);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_geometry() {
        assert!(RunConfig::from_toml("colour = 3").is_err());
        assert!(RunConfig::from_toml("[l1d]\nsize_bytes = 1000\nways = 2\nlatency = 2\nmshrs = 4").is_err());
    }
}
