//! Disaggregated memory runtime with a SmartNIC-style proxy.
//!
//! Three agents cooperate over a simulated [`fabric`]:
//!
//! * the [`host_agent`] stages fabric-attached memory in a unified LRU chunk
//!   buffer and issues [`protocol`] requests on misses and dirty evictions;
//! * the [`dpu_agent`] aggregates and forwards those requests through a
//!   two-stage pipeline and optionally serves them from the [`dpu_cache`];
//! * the [`memory_agent`] owns the backing bytes and is otherwise passive.
//!
//! [`graphbench`] runs graph workloads over the runtime and [`experiment`]
//! drives configured runs and produces traffic reports.

pub mod cluster;
pub mod dpu_agent;
pub mod dpu_cache;
pub mod experiment;
pub mod fabric;
pub mod graphbench;
pub mod host_agent;
pub mod memory_agent;
pub mod protocol;

pub use cluster::Cluster;
pub use dpu_agent::{ProxyConfig, ProxyService};
pub use dpu_cache::CacheMode;
pub use fabric::{ClientId, EndpointId, Fabric, FabricConfig, FabricError, LinkKind, LinkProfile, TrafficSnapshot};
pub use host_agent::{AccessMode, FamHandle, HostAgent, HostConfig};
pub use memory_agent::{MemoryAgent, MemoryAgentConfig};
