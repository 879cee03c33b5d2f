//! Proxy-side caching.
//!
//! Two modes, chosen per region. Static ranges are copied once into proxy
//! memory, pinned, and read by hosts one-sided without going through the
//! request path. Dynamic caching keeps a table of chunk groups filled by a
//! prefetcher that follows the [`RecentList`] of requested chunks.
//!
//! Write-backs bypass the dynamic cache and invalidate the group they touch.
//! Entries are pinned by reference count while a response is built from them.
//!
//! [`CacheModel`] holds the break-even arithmetic and
//! [`AdaptiveController`] switches dynamic caching off when the windowed hit
//! rate falls below it.

mod budget;
mod model;
mod prefetch;
mod recent;
mod statics;
mod table;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use budget::{MemoryBudget, Reservation};
pub use model::{required_hit_rate, AdaptiveController, CacheModel, HitRateMonitor};
pub use prefetch::{prefetch_for, GroupSource, PrefetchCounters, Prefetcher};
pub use recent::{RecentEntry, RecentList, RECENT_CAPACITY};
pub use statics::{StaticCache, StaticEntry};
pub use table::{CacheTable, FillTicket, GroupId, Lookup, Pin, TableStats};

pub const DEFAULT_ENTRY_BYTES: usize = 1 << 20;
pub const DEFAULT_HIT_WINDOW: usize = 1024;
pub const DEFAULT_HYSTERESIS: f64 = 0.05;
pub const DEFAULT_PREFETCH_DEGREE: u64 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error("bandwidths must be positive (net {b_net}, intra {b_intra})")]
    Bandwidth { b_net: f64, b_intra: f64 },
    #[error("hit rate {0} outside [0, 1]")]
    HitRate(f64),
    #[error("proxy memory budget exceeded: {requested} bytes requested, {available} available")]
    Budget { requested: u64, available: u64 },
    #[error("cache configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    #[default]
    Off,
    /// Static ranges only.
    Static,
    /// Dynamic caching of every region, plus static ranges on request.
    Dynamic,
}

impl std::str::FromStr for CacheMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "off" => Ok(CacheMode::Off),
            "static" => Ok(CacheMode::Static),
            "dynamic" => Ok(CacheMode::Dynamic),
            other => Err(format!("unknown cache mode {other:?} (off, static, dynamic)")),
        }
    }
}

impl std::fmt::Display for CacheMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CacheMode::Off => "off",
            CacheMode::Static => "static",
            CacheMode::Dynamic => "dynamic",
        })
    }
}
