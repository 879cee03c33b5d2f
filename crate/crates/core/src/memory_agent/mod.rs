//! Memory-node service.
//!
//! The agent reserves and frees regions and answers control messages. Data
//! access is one-sided: peers read and write the registered bytes directly
//! through the fabric and the agent never sees those operations.
//!
//! Every region is registered twice. The read-only rkey is handed to anyone
//! mapping the region; the read-write rkey goes only to the single writer.

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, warn};
use parking_lot::Mutex;
use thiserror::Error;

use crate::fabric::{Access, Charge, ClientId, EndpointId, Fabric, FabricError, Message, RegisteredRegion};
use crate::protocol::{ControlMessage, ErrorCode, RequestKind};

pub const DEFAULT_CAPACITY: u64 = 256 << 30;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemoryError {
    #[error("region length must be positive")]
    ZeroLength,
    #[error("chunk size must be positive")]
    ZeroChunk,
    #[error("unknown region {0}")]
    UnknownRegion(u16),
    #[error("insufficient capacity: {requested} bytes requested, {available} available")]
    Capacity { requested: u64, available: u64 },
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("region {region_id} already has writer {writer}")]
    Coherence { region_id: u16, writer: ClientId },
    #[error("region {region_id} is not writable by client {client}")]
    NotWriter { region_id: u16, client: ClientId },
    #[error("access outside region {region_id}")]
    OutOfBounds { region_id: u16 },
    #[error("region id space exhausted")]
    IdsExhausted,
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

impl MemoryError {
    pub fn code(&self) -> ErrorCode {
        match self {
            MemoryError::UnknownRegion(_) => ErrorCode::UnknownRegion,
            MemoryError::Capacity { .. } | MemoryError::IdsExhausted => ErrorCode::Capacity,
            MemoryError::FileNotFound(_) => ErrorCode::FileNotFound,
            MemoryError::Coherence { .. } | MemoryError::NotWriter { .. } => ErrorCode::Coherence,
            MemoryError::OutOfBounds { .. } => ErrorCode::OutOfBounds,
            MemoryError::ZeroLength | MemoryError::ZeroChunk => ErrorCode::Malformed,
            MemoryError::Fabric(_) => ErrorCode::Internal,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MemoryAgentConfig {
    pub capacity: u64,
    /// Directory that file-backed allocations are resolved against.
    pub data_dir: PathBuf,
}

impl Default for MemoryAgentConfig {
    fn default() -> Self {
        MemoryAgentConfig { capacity: DEFAULT_CAPACITY, data_dir: PathBuf::from(".") }
    }
}

/// Metadata of one fabric-attached memory object.
#[derive(Debug, Clone)]
pub struct FamRegion {
    pub region_id: u16,
    pub length: u64,
    pub chunk_size: u32,
    pub source_file: Option<PathBuf>,
    pub writer: Option<ClientId>,
    read_only: RegisteredRegion,
    read_write: Option<RegisteredRegion>,
}

/// What a client needs to access a region one-sided.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionGrant {
    pub region_id: u16,
    pub length: u64,
    pub chunk_size: u32,
    pub region: RegisteredRegion,
}

impl RegionGrant {
    pub fn writable(&self) -> bool {
        self.region.access == Access::ReadWrite
    }
}

struct State {
    regions: HashMap<u16, FamRegion>,
    next_id: u16,
    used: u64,
}

struct Shared {
    fabric: Fabric,
    endpoint: EndpointId,
    config: MemoryAgentConfig,
    state: Mutex<State>,
}

pub struct MemoryAgent {
    shared: Arc<Shared>,
    stop: Arc<AtomicBool>,
    control: Option<JoinHandle<()>>,
}

impl MemoryAgent {
    /// Create the agent's endpoint on `fabric` and start its control loop.
    pub fn start(fabric: &Fabric, config: MemoryAgentConfig) -> Result<MemoryAgent, MemoryError> {
        let endpoint = fabric.create_endpoint(ClientId::SYSTEM);
        let queue = fabric.receiver(endpoint)?;
        let shared = Arc::new(Shared {
            fabric: fabric.clone(),
            endpoint,
            config,
            state: Mutex::new(State { regions: HashMap::new(), next_id: 1, used: 0 }),
        });
        let stop = Arc::new(AtomicBool::new(false));
        let control = {
            let shared = shared.clone();
            let stop = stop.clone();
            std::thread::Builder::new()
                .name("memory-agent".into())
                .spawn(move || {
                    while !stop.load(Ordering::Acquire) {
                        match queue.recv_timeout(Duration::from_millis(20)) {
                            Ok(msg) => shared.handle(msg),
                            Err(FabricError::Timeout) => continue,
                            Err(_) => break,
                        }
                    }
                })
                .expect("spawn memory agent thread")
        };
        Ok(MemoryAgent { shared, stop, control: Some(control) })
    }

    pub fn endpoint(&self) -> EndpointId {
        self.shared.endpoint
    }

    pub fn fabric(&self) -> &Fabric {
        &self.shared.fabric
    }

    pub fn capacity(&self) -> u64 {
        self.shared.config.capacity
    }

    pub fn used(&self) -> u64 {
        self.shared.state.lock().used
    }

    pub fn alloc_region(
        &self,
        client: ClientId,
        length: u64,
        chunk_size: u32,
        writable: bool,
        file: Option<&str>,
    ) -> Result<RegionGrant, MemoryError> {
        self.shared.alloc(client, length, chunk_size, writable, file)
    }

    pub fn map_region(&self, client: ClientId, region_id: u16, writable: bool) -> Result<RegionGrant, MemoryError> {
        self.shared.map(client, region_id, writable)
    }

    pub fn free_region(&self, region_id: u16) -> Result<(), MemoryError> {
        self.shared.free(region_id)
    }

    pub fn region(&self, region_id: u16) -> Option<FamRegion> {
        self.shared.state.lock().regions.get(&region_id).cloned()
    }

    pub fn region_ids(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.shared.state.lock().regions.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// Bytes of chunk `chunk_index`, at most `size` of them.
    pub fn serve_read(&self, region_id: u16, chunk_index: u64, size: usize) -> Result<Vec<u8>, MemoryError> {
        let region = self.lookup(region_id)?;
        let start = chunk_start(&region, chunk_index, size as u64)?;
        Ok(self.shared.fabric.with_region(&region.read_only, |m| m[start..start + size].to_vec())?)
    }

    pub fn serve_write(&self, client: ClientId, region_id: u16, chunk_index: u64, data: &[u8]) -> Result<(), MemoryError> {
        let region = self.lookup(region_id)?;
        if region.writer != Some(client) {
            return Err(MemoryError::NotWriter { region_id, client });
        }
        let start = chunk_start(&region, chunk_index, data.len() as u64)?;
        self.shared.fabric.with_region_mut(&region.read_only, |m| m[start..start + data.len()].copy_from_slice(data))?;
        Ok(())
    }

    /// Copy of the whole region.
    pub fn contents(&self, region_id: u16) -> Result<Vec<u8>, MemoryError> {
        let region = self.lookup(region_id)?;
        Ok(self.shared.fabric.with_region(&region.read_only, |m| m.to_vec())?)
    }

    fn lookup(&self, region_id: u16) -> Result<FamRegion, MemoryError> {
        self.region(region_id).ok_or(MemoryError::UnknownRegion(region_id))
    }

    pub fn shutdown(mut self) {
        self.stop_thread();
    }

    fn stop_thread(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.control.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MemoryAgent {
    fn drop(&mut self) {
        self.stop_thread();
    }
}

fn chunk_start(region: &FamRegion, chunk_index: u64, len: u64) -> Result<usize, MemoryError> {
    let oob = MemoryError::OutOfBounds { region_id: region.region_id };
    let start = chunk_index.checked_mul(u64::from(region.chunk_size)).ok_or(oob.clone())?;
    match start.checked_add(len) {
        Some(end) if end <= region.length => Ok(start as usize),
        _ => Err(oob),
    }
}

impl Shared {
    fn grant(region: &FamRegion, desc: RegisteredRegion) -> RegionGrant {
        RegionGrant { region_id: region.region_id, length: region.length, chunk_size: region.chunk_size, region: desc }
    }

    fn alloc(&self, client: ClientId, length: u64, chunk_size: u32, writable: bool, file: Option<&str>) -> Result<RegionGrant, MemoryError> {
        if length == 0 {
            return Err(MemoryError::ZeroLength);
        }
        if chunk_size == 0 {
            return Err(MemoryError::ZeroChunk);
        }
        let source = match file {
            Some(name) => {
                let path = self.config.data_dir.join(name);
                if !path.is_file() {
                    return Err(MemoryError::FileNotFound(name.to_string()));
                }
                Some(path)
            }
            None => None,
        };

        let mut state = self.state.lock();
        let available = self.config.capacity - state.used;
        if length > available {
            return Err(MemoryError::Capacity { requested: length, available });
        }
        let region_id = next_free_id(&state)?;
        let read_only = self.fabric.register_region(self.endpoint, length, Access::ReadOnly)?;
        if let Some(path) = &source {
            if let Err(e) = load_file(&self.fabric, &read_only, path, length) {
                let _ = self.fabric.deregister(&read_only);
                return Err(e);
            }
        }
        let read_write = if writable { Some(self.fabric.share_region(&read_only, Access::ReadWrite)?) } else { None };
        let region = FamRegion {
            region_id,
            length,
            chunk_size,
            source_file: source,
            writer: writable.then_some(client),
            read_only,
            read_write,
        };
        let grant = Self::grant(&region, read_write.unwrap_or(read_only));
        state.used += length;
        state.next_id = region_id.wrapping_add(1).max(1);
        state.regions.insert(region_id, region);
        debug!("alloc region {region_id}: {length} bytes for client {client}, writable {writable}");
        Ok(grant)
    }

    fn map(&self, client: ClientId, region_id: u16, writable: bool) -> Result<RegionGrant, MemoryError> {
        let mut state = self.state.lock();
        let region = state.regions.get_mut(&region_id).ok_or(MemoryError::UnknownRegion(region_id))?;
        if !writable {
            return Ok(Self::grant(region, region.read_only));
        }
        match region.writer {
            Some(w) if w != client => Err(MemoryError::Coherence { region_id, writer: w }),
            _ => {
                let rw = match region.read_write {
                    Some(rw) => rw,
                    None => {
                        let rw = self.fabric.share_region(&region.read_only, Access::ReadWrite)?;
                        region.read_write = Some(rw);
                        rw
                    }
                };
                region.writer = Some(client);
                Ok(Self::grant(region, rw))
            }
        }
    }

    fn free(&self, region_id: u16) -> Result<(), MemoryError> {
        let mut state = self.state.lock();
        let region = state.regions.remove(&region_id).ok_or(MemoryError::UnknownRegion(region_id))?;
        state.used -= region.length;
        if let Some(rw) = region.read_write {
            self.fabric.deregister(&rw)?;
        }
        self.fabric.deregister(&region.read_only)?;
        debug!("freed region {region_id}");
        Ok(())
    }

    fn handle(&self, msg: Message) {
        let sender_client = self.fabric.client_of(msg.sender).unwrap_or(ClientId::SYSTEM);
        if msg.immediate != RequestKind::Control.immediate() {
            warn!("memory agent ignores immediate {} from {}", msg.immediate, msg.sender);
            return;
        }
        let reply = match ControlMessage::decode(&msg.payload) {
            Ok(req) => self.control(req),
            Err(e) => {
                warn!("bad control message from {}: {e}", msg.sender);
                ControlMessage::Error { code: ErrorCode::Malformed }
            }
        };
        let charge = Charge::on_demand(sender_client);
        if let Err(e) = self.fabric.send(self.endpoint, msg.sender, RequestKind::Control.immediate(), reply.encode(), charge) {
            warn!("control reply to {} failed: {e}", msg.sender);
        }
    }

    fn control(&self, req: ControlMessage) -> ControlMessage {
        let ack = |g: RegionGrant| ControlMessage::AllocAck { region_id: g.region_id, rkey: g.region.rkey, length: g.length };
        let result = match req {
            ControlMessage::Setup { .. } => Ok(ControlMessage::SetupAck),
            ControlMessage::AllocRegion { client, length, chunk_size, writable, file } => {
                self.alloc(ClientId(client), length, chunk_size, writable, file.as_deref()).map(ack)
            }
            ControlMessage::MapRegion { client, region_id, writable } => self.map(ClientId(client), region_id, writable).map(ack),
            ControlMessage::FreeRegion { region_id } => self.free(region_id).map(|_| ControlMessage::FreeAck),
            _ => return ControlMessage::Error { code: ErrorCode::Malformed },
        };
        result.unwrap_or_else(|e| ControlMessage::Error { code: e.code() })
    }
}

fn next_free_id(state: &State) -> Result<u16, MemoryError> {
    let mut id = state.next_id.max(1);
    for _ in 0..u16::MAX {
        if !state.regions.contains_key(&id) {
            return Ok(id);
        }
        id = id.wrapping_add(1).max(1);
    }
    Err(MemoryError::IdsExhausted)
}

fn load_file(fabric: &Fabric, region: &RegisteredRegion, path: &Path, length: u64) -> Result<(), MemoryError> {
    let missing = || MemoryError::FileNotFound(path.display().to_string());
    let file = File::open(path).map_err(|_| missing())?;
    let mut bytes = Vec::new();
    file.take(length).read_to_end(&mut bytes).map_err(|_| missing())?;
    fabric.with_region_mut(region, |m| m[..bytes.len()].copy_from_slice(&bytes))?;
    Ok(())
}

/// A descriptor for a region owned by `owner`, rebuilt from an `AllocAck`.
pub fn remote_region(owner: EndpointId, rkey: u32, length: u64, writable: bool) -> RegisteredRegion {
    let access = if writable { Access::ReadWrite } else { Access::ReadOnly };
    RegisteredRegion { rkey, base: 0, length, owner, access }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent() -> (Fabric, MemoryAgent) {
        let fabric = Fabric::default();
        let agent = MemoryAgent::start(&fabric, MemoryAgentConfig { capacity: 1 << 20, ..Default::default() }).unwrap();
        (fabric, agent)
    }

    #[test]
    fn ids_skip_live_regions() {
        let (_f, a) = agent();
        let r1 = a.alloc_region(ClientId(1), 10, 4, false, None).unwrap();
        let r2 = a.alloc_region(ClientId(1), 10, 4, false, None).unwrap();
        assert_ne!(r1.region_id, r2.region_id);
        a.free_region(r1.region_id).unwrap();
        let r3 = a.alloc_region(ClientId(1), 10, 4, false, None).unwrap();
        assert!(r3.region_id != r2.region_id);
    }

    #[test]
    fn chunk_start_bounds() {
        let (_f, a) = agent();
        let g = a.alloc_region(ClientId(1), 10, 4, true, None).unwrap();
        assert!(a.serve_read(g.region_id, 2, 2).is_ok());
        assert!(matches!(a.serve_read(g.region_id, 2, 3), Err(MemoryError::OutOfBounds { .. })));
        assert!(matches!(a.serve_read(g.region_id, u64::MAX, 1), Err(MemoryError::OutOfBounds { .. })));
    }

    #[test]
    fn error_codes() {
        assert_eq!(MemoryError::UnknownRegion(1).code(), ErrorCode::UnknownRegion);
        assert_eq!(MemoryError::Coherence { region_id: 1, writer: ClientId(2) }.code(), ErrorCode::Coherence);
        assert_eq!(MemoryError::Capacity { requested: 1, available: 0 }.code(), ErrorCode::Capacity);
    }
}
