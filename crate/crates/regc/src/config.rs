//! Run configuration: address-space geometry, cache tuning and the message
//! cost model. All constants can be set from a `key=value` config file.

use crate::error::{SimError, SimResult};

/// Message cost model used to derive simulated time.
///
/// Per-processor clocks advance by these costs as the processor sends and
/// receives messages and issues instrumented stores; the run's simulated
/// time is the maximum over all processor clocks. Waiting (blocked on a
/// lock or barrier) is not charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    /// Fixed cost per message exchange leg, in nanoseconds.
    pub message_latency_ns: u64,
    /// Cost per byte moved on the wire, in nanoseconds.
    pub per_byte_ns: u64,
    /// Cost charged for every store issued (the instrumentation call).
    pub instrumented_store_ns: u64,
    /// Cost of a load or store satisfied from the local cache.
    pub cache_hit_ns: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            message_latency_ns: 1000,
            per_byte_ns: 1,
            instrumented_store_ns: 0,
            cache_hit_ns: 0,
        }
    }
}

/// Simulator configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimConfig {
    /// Total size of the global shared address space in bytes.
    pub total_size_bytes: u64,
    /// Page size in bytes; consistency granularity for ordinary data.
    pub page_size_bytes: u64,
    /// Number of simulated memory servers pages are strided across.
    pub server_count: u64,
    /// Per-processor page cache capacity, in pages.
    pub cache_capacity_pages: u64,
    /// Fetch the next page alongside a missed page.
    pub prefetch_enabled: bool,
    pub cost: CostModel,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            total_size_bytes: 16 * 1024 * 1024,
            page_size_bytes: 4096,
            server_count: 4,
            cache_capacity_pages: 1024,
            prefetch_enabled: true,
            cost: CostModel::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> SimResult<()> {
        if self.page_size_bytes == 0 || self.total_size_bytes == 0 {
            return Err(SimError::Config("sizes must be positive".into()));
        }
        if self.total_size_bytes % self.page_size_bytes != 0 {
            return Err(SimError::Config(
                "total_size_bytes must be a multiple of page_size_bytes".into(),
            ));
        }
        if self.server_count == 0 {
            return Err(SimError::Config("server_count must be at least 1".into()));
        }
        if self.cache_capacity_pages == 0 {
            return Err(SimError::Config("cache_capacity_pages must be at least 1".into()));
        }
        Ok(())
    }

    pub fn total_pages(&self) -> u64 {
        self.total_size_bytes / self.page_size_bytes
    }

    /// Parses `key=value` lines. `#` starts a comment; blank lines are ignored.
    pub fn parse(text: &str) -> SimResult<Self> {
        let mut cfg = SimConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SimError::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            let parse_u64 = |v: &str| -> SimResult<u64> {
                v.parse::<u64>()
                    .map_err(|_| SimError::Config(format!("line {}: bad integer '{}'", lineno + 1, v)))
            };
            match key {
                "total_size_bytes" => cfg.total_size_bytes = parse_u64(value)?,
                "page_size_bytes" => cfg.page_size_bytes = parse_u64(value)?,
                "server_count" => cfg.server_count = parse_u64(value)?,
                "cache_capacity_pages" => cfg.cache_capacity_pages = parse_u64(value)?,
                "prefetch_enabled" => {
                    cfg.prefetch_enabled = match value {
                        "true" | "1" | "on" => true,
                        "false" | "0" | "off" => false,
                        _ => {
                            return Err(SimError::Config(format!(
                                "line {}: bad boolean '{}'",
                                lineno + 1,
                                value
                            )))
                        }
                    }
                }
                "message_latency_ns" => cfg.cost.message_latency_ns = parse_u64(value)?,
                "per_byte_ns" => cfg.cost.per_byte_ns = parse_u64(value)?,
                "instrumented_store_ns" => cfg.cost.instrumented_store_ns = parse_u64(value)?,
                "cache_hit_ns" => cfg.cost.cache_hit_ns = parse_u64(value)?,
                _ => return Err(SimError::Config(format!("line {}: unknown key '{}'", lineno + 1, key))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let cfg = SimConfig::parse(
            "# comment\npage_size_bytes = 1024\nserver_count=3\nprefetch_enabled=off\nper_byte_ns = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.page_size_bytes, 1024);
        assert_eq!(cfg.server_count, 3);
        assert!(!cfg.prefetch_enabled);
        assert_eq!(cfg.cost.per_byte_ns, 2);
    }

    #[test]
    fn rejects_unknown_key() {
        assert!(matches!(SimConfig::parse("bogus=1"), Err(SimError::Config(_))));
    }

    #[test]
    fn rejects_unaligned_total() {
        let err = SimConfig::parse("total_size_bytes=5000\npage_size_bytes=4096");
        assert!(matches!(err, Err(SimError::Config(_))));
    }
}
