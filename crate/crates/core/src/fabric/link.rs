use serde::{Deserialize, Serialize};

use super::FabricError;

/// The two physical paths a transfer can take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    /// Host to proxy, over the PCIe switch of one compute node.
    Intra,
    /// Anything that leaves the compute node.
    Net,
}

impl LinkKind {
    pub const ALL: [LinkKind; 2] = [LinkKind::Intra, LinkKind::Net];

    pub fn as_str(self) -> &'static str {
        match self {
            LinkKind::Intra => "intra",
            LinkKind::Net => "net",
        }
    }
}

impl std::fmt::Display for LinkKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Bandwidth/latency cost model of one link.
///
/// Modeled transfer time of `s` bytes is `latency + s / bandwidth`. The model is
/// accounting only; nothing ever sleeps on it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkProfile {
    pub kind: LinkKind,
    bandwidth_bytes_per_sec: f64,
    latency_sec: f64,
}

impl LinkProfile {
    pub fn new(kind: LinkKind, bandwidth_bytes_per_sec: f64, latency_sec: f64) -> Result<Self, FabricError> {
        if !(bandwidth_bytes_per_sec.is_finite() && bandwidth_bytes_per_sec > 0.0) {
            return Err(FabricError::InvalidProfile(format!(
                "{kind} bandwidth must be positive, got {bandwidth_bytes_per_sec}"
            )));
        }
        if !(latency_sec.is_finite() && latency_sec >= 0.0) {
            return Err(FabricError::InvalidProfile(format!(
                "{kind} latency must be non-negative, got {latency_sec}"
            )));
        }
        Ok(LinkProfile { kind, bandwidth_bytes_per_sec, latency_sec })
    }

    /// 100 Gb/s-class network link.
    pub fn default_net() -> Self {
        LinkProfile { kind: LinkKind::Net, bandwidth_bytes_per_sec: 12.0e9, latency_sec: 3.0e-6 }
    }

    /// Host/proxy link at twice the network bandwidth.
    pub fn default_intra() -> Self {
        LinkProfile { kind: LinkKind::Intra, bandwidth_bytes_per_sec: 24.0e9, latency_sec: 2.0e-6 }
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth_bytes_per_sec
    }

    pub fn latency(&self) -> f64 {
        self.latency_sec
    }

    pub fn transfer_time(&self, bytes: u64) -> f64 {
        self.latency_sec + bytes as f64 / self.bandwidth_bytes_per_sec
    }

    /// Busy time for `doorbells` posted operations moving `payload_bytes` in total.
    pub fn busy_time(&self, doorbells: u64, payload_bytes: u64) -> f64 {
        doorbells as f64 * self.latency_sec + payload_bytes as f64 / self.bandwidth_bytes_per_sec
    }
}
