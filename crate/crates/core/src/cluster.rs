//! One memory agent, an optional proxy and the fabric between them, all in
//! this process.

use crate::dpu_agent::{ProxyConfig, ProxyError, ProxyService};
use crate::fabric::{ClientId, EndpointId, Fabric, FabricConfig};
use crate::host_agent::{AccessMode, HostAgent, HostConfig, HostError};
use crate::memory_agent::{MemoryAgent, MemoryAgentConfig, MemoryError};

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error(transparent)]
    Host(#[from] HostError),
}

pub struct Cluster {
    pub fabric: Fabric,
    pub memory: MemoryAgent,
    pub proxy: Option<ProxyService>,
}

impl Cluster {
    /// Memory agent only; hosts connect in direct mode.
    pub fn direct(fabric: FabricConfig, memory: MemoryAgentConfig) -> Result<Cluster, ClusterError> {
        let fabric = Fabric::new(fabric);
        let memory = MemoryAgent::start(&fabric, memory)?;
        Ok(Cluster { fabric, memory, proxy: None })
    }

    /// Memory agent plus a proxy built from `proxy(memory endpoint)`.
    pub fn offload(
        fabric: FabricConfig,
        memory: MemoryAgentConfig,
        proxy: impl FnOnce(EndpointId) -> ProxyConfig,
    ) -> Result<Cluster, ClusterError> {
        let mut c = Cluster::direct(fabric, memory)?;
        let cfg = proxy(c.memory.endpoint());
        c.proxy = Some(ProxyService::start(&c.fabric, cfg)?);
        Ok(c)
    }

    /// Where hosts send requests: the proxy if there is one.
    pub fn target(&self) -> EndpointId {
        self.proxy.as_ref().map_or(self.memory.endpoint(), |p| p.endpoint())
    }

    pub fn mode(&self) -> AccessMode {
        if self.proxy.is_some() {
            AccessMode::Offload
        } else {
            AccessMode::Direct
        }
    }

    /// Connect a host; its mode follows the cluster's.
    pub fn host(&self, config: HostConfig) -> Result<HostAgent, HostError> {
        HostAgent::connect(&self.fabric, self.target(), HostConfig { mode: self.mode(), ..config })
    }

    pub fn host_for(&self, client: u32) -> Result<HostAgent, HostError> {
        self.host(HostConfig { client: ClientId(client), ..HostConfig::default() })
    }

    pub fn proxy(&self) -> &ProxyService {
        self.proxy.as_ref().expect("cluster has no proxy")
    }
}
