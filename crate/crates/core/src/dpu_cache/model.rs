use std::collections::VecDeque;

use serde::Serialize;

use super::CacheError;

/// Smallest hit rate at which proxy-side caching beats going to the memory
/// node directly: `b_net / b_intra`, clamped to `[0, 1]`.
pub fn required_hit_rate(b_net: f64, b_intra: f64) -> Result<f64, CacheError> {
    if !(b_net > 0.0 && b_intra > 0.0) || !b_net.is_finite() || !b_intra.is_finite() {
        return Err(CacheError::Bandwidth { b_net, b_intra });
    }
    Ok((b_net / b_intra).clamp(0.0, 1.0))
}

/// Fetch-time model for one chunk of `s` bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CacheModel {
    pub s: f64,
    pub b_net: f64,
    pub b_intra: f64,
}

impl CacheModel {
    pub fn new(s: f64, b_net: f64, b_intra: f64) -> Result<CacheModel, CacheError> {
        required_hit_rate(b_net, b_intra)?;
        if !(s.is_finite() && s >= 0.0) {
            return Err(CacheError::Config(format!("chunk size {s} is not a byte count")));
        }
        Ok(CacheModel { s, b_net, b_intra })
    }

    pub fn ratio(&self) -> f64 {
        self.b_net / self.b_intra
    }

    pub fn required_hit_rate(&self) -> f64 {
        self.ratio().clamp(0.0, 1.0)
    }

    /// Time to fetch straight from the memory node.
    pub fn baseline_time(&self) -> f64 {
        self.s / self.b_net
    }

    /// Expected time through the proxy at hit rate `h`. Every request pays the
    /// intra-node hop; misses also pay the network.
    pub fn expected_fetch_time(&self, h: f64) -> Result<f64, CacheError> {
        if !(0.0..=1.0).contains(&h) {
            return Err(CacheError::HitRate(h));
        }
        Ok(self.s / self.b_intra + (1.0 - h) * self.s / self.b_net)
    }

    pub fn beneficial(&self, h: f64) -> bool {
        h > self.ratio()
    }
}

/// Hit rate over the last `window` lookups.
#[derive(Debug, Clone)]
pub struct HitRateMonitor {
    window: usize,
    recent: VecDeque<bool>,
    hits_in_window: usize,
    total_hits: u64,
    total_lookups: u64,
}

impl HitRateMonitor {
    pub fn new(window: usize) -> HitRateMonitor {
        assert!(window > 0, "hit-rate window must be positive");
        HitRateMonitor { window, recent: VecDeque::with_capacity(window), hits_in_window: 0, total_hits: 0, total_lookups: 0 }
    }

    pub fn record(&mut self, hit: bool) {
        if self.recent.len() == self.window && self.recent.pop_front() == Some(true) {
            self.hits_in_window -= 1;
        }
        self.recent.push_back(hit);
        if hit {
            self.hits_in_window += 1;
            self.total_hits += 1;
        }
        self.total_lookups += 1;
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn is_full(&self) -> bool {
        self.recent.len() == self.window
    }

    pub fn hits(&self) -> usize {
        self.hits_in_window
    }

    pub fn misses(&self) -> usize {
        self.recent.len() - self.hits_in_window
    }

    /// `None` before the first lookup.
    pub fn hit_rate(&self) -> Option<f64> {
        if self.recent.is_empty() {
            None
        } else {
            Some(self.hits_in_window as f64 / self.recent.len() as f64)
        }
    }

    pub fn total_lookups(&self) -> u64 {
        self.total_lookups
    }

    pub fn total_hits(&self) -> u64 {
        self.total_hits
    }

    pub fn clear(&mut self) {
        self.recent.clear();
        self.hits_in_window = 0;
    }
}

/// Turns dynamic caching off when the windowed hit rate drops below the
/// break-even point and back on once it recovers.
#[derive(Debug, Clone, Serialize)]
pub struct AdaptiveController {
    pub threshold: f64,
    pub hysteresis: f64,
    enabled: bool,
    transitions: u64,
    decisions: u64,
}

impl AdaptiveController {
    pub fn new(threshold: f64, hysteresis: f64) -> AdaptiveController {
        AdaptiveController { threshold, hysteresis, enabled: true, transitions: 0, decisions: 0 }
    }

    pub fn for_model(model: &CacheModel, hysteresis: f64) -> AdaptiveController {
        Self::new(model.required_hit_rate(), hysteresis)
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn transitions(&self) -> u64 {
        self.transitions
    }

    /// Apply one decision from the hit rate `h` of a full window.
    pub fn decide(&mut self, h: f64) -> bool {
        self.decisions += 1;
        let next = if self.enabled { h >= self.threshold - self.hysteresis } else { h > self.threshold + self.hysteresis };
        if next != self.enabled {
            self.enabled = next;
            self.transitions += 1;
        }
        self.enabled
    }

    /// Decide from the monitor; a window that is not yet full leaves the
    /// state unchanged.
    pub fn update(&mut self, monitor: &HitRateMonitor) -> bool {
        match monitor.hit_rate() {
            Some(h) if monitor.is_full() => self.decide(h),
            _ => self.enabled,
        }
    }
}
