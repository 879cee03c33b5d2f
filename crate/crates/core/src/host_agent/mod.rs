//! Client-side runtime.
//!
//! A [`HostAgent`] allocates fabric-attached objects and serves
//! [`fam_read`](HostAgent::fam_read) / [`fam_write`](HostAgent::fam_write)
//! through one [`PageBuffer`] shared by every handle. Misses become requests
//! to the proxy (offload mode) or one-sided reads of the memory node (direct
//! mode). Dirty chunks leave the buffer on eviction: offloaded write-backs are
//! sent and forgotten, direct ones complete before eviction returns.

mod buffer;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam::channel::{self, Receiver, Sender};
use log::{debug, warn};
use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use buffer::{BufferConfig, BufferEvent, BufferStats, ChunkBackend, ChunkKey, PageBuffer};

use crate::fabric::{Charge, ClientId, EndpointId, Fabric, FabricError, LinkKind, Message, RecvQueue, RegisteredRegion};
use crate::memory_agent::remote_region;
use crate::protocol::{
    ControlMessage, ErrorCode, ErrorResponse, ReadRequest, ReadResponse, RequestKind, WriteAck, WriteRequest,
};

pub const DEFAULT_CHUNK_SIZE: u32 = 64 << 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HostError {
    #[error("access [{offset}, {offset}+{len}) outside object of {length} bytes")]
    Bounds { offset: u64, len: u64, length: u64 },
    #[error("handle is read-only")]
    ReadOnly,
    #[error("remote error: {0}")]
    Remote(ErrorCode),
    #[error("unknown region {0}")]
    UnknownRegion(u16),
    #[error("request timed out")]
    Timeout,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessMode {
    /// Host talks to the memory agent itself.
    Direct,
    /// Host talks to the proxy.
    Offload,
}

impl AccessMode {
    pub fn link(self) -> LinkKind {
        match self {
            AccessMode::Direct => LinkKind::Net,
            AccessMode::Offload => LinkKind::Intra,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HostConfig {
    pub client: ClientId,
    pub mode: AccessMode,
    pub chunk_size: u32,
    pub buffer_chunks: usize,
    pub load_threshold: f64,
    pub low_water: f64,
    pub qp_count: usize,
    pub request_timeout: Duration,
    /// Record buffer events for inspection.
    pub trace: bool,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig {
            client: ClientId(1),
            mode: AccessMode::Offload,
            chunk_size: DEFAULT_CHUNK_SIZE,
            buffer_chunks: 1024,
            load_threshold: 0.9,
            low_water: 0.8,
            qp_count: 4,
            request_timeout: Duration::from_secs(30),
            trace: false,
        }
    }
}

/// A mapped fabric-attached object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FamHandle {
    pub region_id: u16,
    pub length: u64,
    pub writable: bool,
    pub chunk_size: u32,
}

impl FamHandle {
    pub fn chunks(&self) -> u64 {
        self.length.div_ceil(u64::from(self.chunk_size))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostStats {
    /// Chunk fetches sent to the proxy or memory node.
    pub read_requests: u64,
    /// Chunk fetches served one-sided from the proxy's static cache.
    pub static_reads: u64,
    pub write_requests: u64,
    pub write_acks: u64,
    pub buffer: BufferStats,
}

#[derive(Debug, Clone)]
struct StaticRange {
    first: u64,
    count: u64,
    region: RegisteredRegion,
}

#[derive(Debug, Clone)]
struct Route {
    length: u64,
    /// One-sided descriptor on the memory node (direct mode).
    direct: Option<RegisteredRegion>,
    statics: Vec<StaticRange>,
}

type Reply = Sender<Result<Vec<u8>, HostError>>;

struct Session {
    fabric: Fabric,
    config: HostConfig,
    target: EndpointId,
    qps: Vec<EndpointId>,
    next_qp: AtomicUsize,
    next_token: AtomicU64,
    pending: Mutex<HashMap<u64, Reply>>,
    control_lock: Mutex<()>,
    control_rx: Receiver<ControlMessage>,
    writes_outstanding: Mutex<u64>,
    writes_cond: Condvar,
    write_errors: Mutex<Vec<ErrorResponse>>,
    routes: RwLock<HashMap<u16, Route>>,
    read_requests: AtomicU64,
    static_reads: AtomicU64,
    write_requests: AtomicU64,
    write_acks: AtomicU64,
    stop: AtomicBool,
}

impl Session {
    fn charge(&self) -> Charge {
        Charge::on_demand(self.config.client)
    }

    fn qp(&self) -> EndpointId {
        let i = self.next_qp.fetch_add(1, Ordering::Relaxed);
        self.qps[i % self.qps.len()]
    }

    /// Requests for one chunk share a queue pair and so stay in order.
    fn qp_for(&self, key: ChunkKey) -> EndpointId {
        let h = (key.chunk ^ (u64::from(key.region_id) << 48)) as usize;
        self.qps[h % self.qps.len()]
    }

    fn control(&self, msg: ControlMessage) -> Result<ControlMessage, HostError> {
        let _serial = self.control_lock.lock();
        while self.control_rx.try_recv().is_ok() {}
        self.fabric.send(self.qps[0], self.target, RequestKind::Control.immediate(), msg.encode(), self.charge())?;
        match self.control_rx.recv_timeout(self.config.request_timeout) {
            Ok(ControlMessage::Error { code }) => Err(HostError::Remote(code)),
            Ok(reply) => Ok(reply),
            Err(_) => Err(HostError::Timeout),
        }
    }

    fn dispatch(&self, msg: Message, control_tx: &Sender<ControlMessage>) {
        let result = match RequestKind::try_from(msg.immediate) {
            Ok(RequestKind::Read) => ReadResponse::decode(msg.payload).map(|r| self.resolve(r.dest_addr, Ok(r.data))),
            Ok(RequestKind::Write) => WriteAck::decode(&msg.payload).map(|_| {
                self.write_acks.fetch_add(1, Ordering::Relaxed);
                self.write_done();
            }),
            Ok(RequestKind::Error) => ErrorResponse::decode(&msg.payload).map(|e| match e.kind {
                RequestKind::Read => self.resolve(e.correlation, Err(HostError::Remote(e.code))),
                RequestKind::Write => {
                    warn!("write-back {:#x} rejected: {}", e.correlation, e.code);
                    self.write_errors.lock().push(e);
                    self.write_done();
                }
                _ => {
                    let _ = control_tx.send(ControlMessage::Error { code: e.code });
                }
            }),
            Ok(RequestKind::Control) => ControlMessage::decode(&msg.payload).map(|c| {
                let _ = control_tx.send(c);
            }),
            Err(e) => Err(e),
        };
        if let Err(e) = result {
            warn!("client {}: dropped message from {}: {e}", self.config.client, msg.sender);
        }
    }

    fn resolve(&self, token: u64, value: Result<Vec<u8>, HostError>) {
        match self.pending.lock().remove(&token) {
            Some(tx) => {
                let _ = tx.send(value);
            }
            None => warn!("response for unknown token {token:#x}"),
        }
    }

    fn write_done(&self) {
        let mut n = self.writes_outstanding.lock();
        *n = n.saturating_sub(1);
        self.writes_cond.notify_all();
    }

    fn route(&self, region_id: u16) -> Result<Route, HostError> {
        self.routes.read().get(&region_id).cloned().ok_or(HostError::UnknownRegion(region_id))
    }

    fn fetch_static(&self, route: &Route, key: ChunkKey, len: usize) -> Option<Result<Vec<u8>, HostError>> {
        let r = route.statics.iter().find(|s| key.chunk >= s.first && key.chunk < s.first + s.count)?;
        let offset = (key.chunk - r.first) * u64::from(self.config.chunk_size);
        self.static_reads.fetch_add(1, Ordering::Relaxed);
        Some(self.fabric.one_sided_read(self.qp(), &r.region, offset, len, self.charge()).map_err(HostError::from))
    }
}

impl ChunkBackend for Session {
    fn fetch(&self, key: ChunkKey, len: usize) -> Result<Vec<u8>, HostError> {
        let route = self.route(key.region_id)?;
        if let Some(res) = self.fetch_static(&route, key, len) {
            return res;
        }
        self.read_requests.fetch_add(1, Ordering::Relaxed);
        let offset = key.chunk * u64::from(self.config.chunk_size);
        match self.config.mode {
            AccessMode::Direct => {
                let region = route.direct.ok_or(HostError::UnknownRegion(key.region_id))?;
                Ok(self.fabric.one_sided_read(self.qp_for(key), &region, offset, len, self.charge())?)
            }
            AccessMode::Offload => {
                let token = self.next_token.fetch_add(1, Ordering::Relaxed);
                let (tx, rx) = channel::bounded(1);
                self.pending.lock().insert(token, tx);
                let req = ReadRequest { region_id: key.region_id, page_offset: key.chunk, dest_addr: token, size: len as u32, dest_rkey: 0 };
                let bytes = req.encode().map_err(|e| HostError::Protocol(e.to_string()))?;
                if let Err(e) = self.fabric.send(self.qp_for(key), self.target, RequestKind::Read.immediate(), bytes.to_vec(), self.charge()) {
                    self.pending.lock().remove(&token);
                    return Err(e.into());
                }
                match rx.recv_timeout(self.config.request_timeout) {
                    Ok(res) => res,
                    Err(_) => {
                        self.pending.lock().remove(&token);
                        Err(HostError::Timeout)
                    }
                }
            }
        }
    }

    fn write_back(&self, key: ChunkKey, data: Vec<u8>) -> Result<(), HostError> {
        self.write_requests.fetch_add(1, Ordering::Relaxed);
        let offset = key.chunk * u64::from(self.config.chunk_size);
        match self.config.mode {
            AccessMode::Direct => {
                let route = self.route(key.region_id)?;
                let region = route.direct.ok_or(HostError::UnknownRegion(key.region_id))?;
                self.fabric.one_sided_write(self.qp_for(key), &region, offset, &data, self.charge())?;
                Ok(())
            }
            AccessMode::Offload => {
                let bytes = WriteRequest::new(key.region_id, key.chunk, data)
                    .encode()
                    .map_err(|e| HostError::Protocol(e.to_string()))?;
                *self.writes_outstanding.lock() += 1;
                if let Err(e) = self.fabric.send(self.qp_for(key), self.target, RequestKind::Write.immediate(), bytes, self.charge()) {
                    self.write_done();
                    return Err(e.into());
                }
                Ok(())
            }
        }
    }

    fn sync(&self) -> Result<(), HostError> {
        let mut n = self.writes_outstanding.lock();
        while *n > 0 {
            if self.writes_cond.wait_for(&mut n, self.config.request_timeout).timed_out() {
                return Err(HostError::Timeout);
            }
        }
        drop(n);
        match self.write_errors.lock().drain(..).next() {
            Some(e) => Err(HostError::Remote(e.code)),
            None => Ok(()),
        }
    }
}

/// Client runtime bound to one proxy or memory agent.
pub struct HostAgent {
    session: Arc<Session>,
    buffer: PageBuffer,
    dispatchers: Vec<JoinHandle<()>>,
}

impl HostAgent {
    /// Open `qp_count` endpoints to `target` (a proxy in offload mode, a
    /// memory agent in direct mode) and run the setup handshake.
    pub fn connect(fabric: &Fabric, target: EndpointId, config: HostConfig) -> Result<HostAgent, HostError> {
        if config.qp_count == 0 {
            return Err(HostError::Config("qp_count must be positive".into()));
        }
        let qps: Vec<EndpointId> = (0..config.qp_count).map(|_| fabric.create_endpoint(config.client)).collect();
        for &qp in &qps {
            fabric.connect_endpoints(qp, target, config.mode.link());
        }
        Self::start(fabric, target, qps, config)
    }

    /// Like [`HostAgent::connect`], but the target lives in another process
    /// listening at `addr`. Each queue pair gets its own connection.
    pub fn connect_tcp<A: std::net::ToSocketAddrs + Copy>(fabric: &Fabric, addr: A, config: HostConfig) -> Result<HostAgent, HostError> {
        if config.qp_count == 0 {
            return Err(HostError::Config("qp_count must be positive".into()));
        }
        let mut target = None;
        let mut qps = Vec::with_capacity(config.qp_count);
        for _ in 0..config.qp_count {
            let qp = fabric.create_endpoint(config.client);
            let remote = fabric.connect(addr, qp, config.mode.link())?;
            if *target.get_or_insert(remote) != remote {
                return Err(HostError::Config(format!("{remote} answered where {} did before", target.unwrap())));
            }
            qps.push(qp);
        }
        Self::start(fabric, target.expect("qp_count > 0"), qps, config)
    }

    fn start(fabric: &Fabric, target: EndpointId, qps: Vec<EndpointId>, config: HostConfig) -> Result<HostAgent, HostError> {
        let queues: Vec<RecvQueue> = qps.iter().map(|&qp| fabric.receiver(qp)).collect::<Result<_, _>>()?;
        let (control_tx, control_rx) = channel::unbounded();
        let session = Arc::new(Session {
            fabric: fabric.clone(),
            config: config.clone(),
            target,
            qps,
            next_qp: AtomicUsize::new(0),
            next_token: AtomicU64::new(1),
            pending: Mutex::new(HashMap::new()),
            control_lock: Mutex::new(()),
            control_rx,
            writes_outstanding: Mutex::new(0),
            writes_cond: Condvar::new(),
            write_errors: Mutex::new(Vec::new()),
            routes: RwLock::new(HashMap::new()),
            read_requests: AtomicU64::new(0),
            static_reads: AtomicU64::new(0),
            write_requests: AtomicU64::new(0),
            write_acks: AtomicU64::new(0),
            stop: AtomicBool::new(false),
        });
        let dispatchers = queues
            .into_iter()
            .enumerate()
            .map(|(i, queue)| {
                let session = session.clone();
                let control_tx = control_tx.clone();
                std::thread::Builder::new()
                    .name(format!("host{}-qp{i}", config.client.0))
                    .spawn(move || {
                        while !session.stop.load(Ordering::Acquire) {
                            match queue.recv_timeout(Duration::from_millis(20)) {
                                Ok(msg) => session.dispatch(msg, &control_tx),
                                Err(FabricError::Timeout) => continue,
                                Err(_) => break,
                            }
                        }
                    })
                    .expect("spawn dispatcher")
            })
            .collect();
        let buffer = PageBuffer::new(
            BufferConfig {
                capacity_chunks: config.buffer_chunks,
                chunk_size: config.chunk_size as usize,
                load_threshold: config.load_threshold,
                low_water: config.low_water,
                trace: config.trace,
            },
            session.clone(),
        )?;
        let agent = HostAgent { session, buffer, dispatchers };
        match agent.session.control(ControlMessage::Setup { client: config.client.0 })? {
            ControlMessage::SetupAck => Ok(agent),
            other => Err(HostError::Protocol(format!("setup answered with {other:?}"))),
        }
    }

    pub fn client(&self) -> ClientId {
        self.session.config.client
    }

    pub fn mode(&self) -> AccessMode {
        self.session.config.mode
    }

    pub fn config(&self) -> &HostConfig {
        &self.session.config
    }

    pub fn endpoints(&self) -> &[EndpointId] {
        &self.session.qps
    }

    fn register(&self, ack: ControlMessage, writable: bool) -> Result<FamHandle, HostError> {
        let ControlMessage::AllocAck { region_id, rkey, length } = ack else {
            return Err(HostError::Protocol(format!("expected AllocAck, got {ack:?}")));
        };
        let direct = match self.mode() {
            AccessMode::Direct => Some(remote_region(self.session.target, rkey, length, writable)),
            AccessMode::Offload => None,
        };
        self.session.routes.write().insert(region_id, Route { length, direct, statics: Vec::new() });
        Ok(FamHandle { region_id, length, writable, chunk_size: self.session.config.chunk_size })
    }

    /// Allocate an object of `length` bytes, zero-filled or preloaded from
    /// `file` on the memory node.
    pub fn fam_alloc(&self, length: u64, file: Option<&str>, writable: bool) -> Result<FamHandle, HostError> {
        let ack = self.session.control(ControlMessage::AllocRegion {
            client: self.client().0,
            length,
            chunk_size: self.session.config.chunk_size,
            writable,
            file: file.map(str::to_string),
        })?;
        let h = self.register(ack, writable)?;
        debug!("client {} allocated region {} ({length} bytes)", self.client(), h.region_id);
        Ok(h)
    }

    /// Map an object allocated by someone else.
    pub fn fam_map(&self, region_id: u16, writable: bool) -> Result<FamHandle, HostError> {
        let ack = self.session.control(ControlMessage::MapRegion { client: self.client().0, region_id, writable })?;
        self.register(ack, writable)
    }

    fn check(&self, h: &FamHandle, offset: u64, len: u64) -> Result<(), HostError> {
        let ok = offset < h.length && offset.checked_add(len).is_some_and(|end| end <= h.length);
        if ok {
            Ok(())
        } else {
            Err(HostError::Bounds { offset, len, length: h.length })
        }
    }

    pub fn fam_read(&self, h: &FamHandle, offset: u64, len: usize) -> Result<Vec<u8>, HostError> {
        let mut out = vec![0u8; len];
        self.fam_read_into(h, offset, &mut out)?;
        Ok(out)
    }

    pub fn fam_read_into(&self, h: &FamHandle, offset: u64, out: &mut [u8]) -> Result<(), HostError> {
        self.check(h, offset, out.len() as u64)?;
        self.buffer.read(h.region_id, h.length, offset, out)
    }

    pub fn fam_write(&self, h: &FamHandle, offset: u64, data: &[u8]) -> Result<(), HostError> {
        if !h.writable {
            return Err(HostError::ReadOnly);
        }
        self.check(h, offset, data.len() as u64)?;
        self.buffer.write(h.region_id, h.length, offset, data)
    }

    /// Evict the `n` least recently used chunks now.
    pub fn evict(&self, n: usize) -> Result<Vec<(ChunkKey, bool)>, HostError> {
        self.buffer.evict(n)
    }

    /// Write back all dirty chunks and wait for their acknowledgements.
    pub fn flush(&self) -> Result<(), HostError> {
        self.buffer.flush()
    }

    pub fn fam_free(&self, h: FamHandle) -> Result<(), HostError> {
        self.buffer.discard_region(h.region_id);
        self.session.control(ControlMessage::FreeRegion { region_id: h.region_id })?;
        self.session.routes.write().remove(&h.region_id);
        Ok(())
    }

    /// Pin chunks `first..first+count` of `h` in the proxy's static cache.
    /// Later misses on them read the proxy copy one-sided.
    pub fn static_load(&self, h: &FamHandle, first: u64, count: u64) -> Result<(), HostError> {
        if self.mode() != AccessMode::Offload {
            return Err(HostError::Config("static caching needs offload mode".into()));
        }
        let reply = self.session.control(ControlMessage::StaticLoad { region_id: h.region_id, first_chunk: first, chunk_count: count })?;
        let ControlMessage::StaticAck { rkey, length } = reply else {
            return Err(HostError::Protocol(format!("expected StaticAck, got {reply:?}")));
        };
        let region = remote_region(self.session.target, rkey, length, false);
        let mut routes = self.session.routes.write();
        let route = routes.get_mut(&h.region_id).ok_or(HostError::UnknownRegion(h.region_id))?;
        route.statics.push(StaticRange { first, count, region });
        Ok(())
    }

    /// Enable or disable dynamic proxy caching for one object.
    pub fn set_cache_policy(&self, h: &FamHandle, dynamic: bool) -> Result<(), HostError> {
        if self.mode() != AccessMode::Offload {
            return Err(HostError::Config("proxy caching needs offload mode".into()));
        }
        match self.session.control(ControlMessage::CachePolicy { region_id: h.region_id, dynamic })? {
            ControlMessage::CachePolicy { .. } => Ok(()),
            other => Err(HostError::Protocol(format!("cache policy answered with {other:?}"))),
        }
    }

    pub fn stats(&self) -> HostStats {
        let s = &self.session;
        HostStats {
            read_requests: s.read_requests.load(Ordering::Relaxed),
            static_reads: s.static_reads.load(Ordering::Relaxed),
            write_requests: s.write_requests.load(Ordering::Relaxed),
            write_acks: s.write_acks.load(Ordering::Relaxed),
            buffer: self.buffer.stats(),
        }
    }

    pub fn buffer(&self) -> &PageBuffer {
        &self.buffer
    }

    pub fn region_length(&self, region_id: u16) -> Option<u64> {
        self.session.routes.read().get(&region_id).map(|r| r.length)
    }

    /// Flush, then stop the dispatchers and close the endpoints.
    pub fn close(mut self) -> Result<(), HostError> {
        let res = self.flush();
        self.teardown();
        res
    }

    fn teardown(&mut self) {
        self.session.stop.store(true, Ordering::Release);
        for h in self.dispatchers.drain(..) {
            let _ = h.join();
        }
        for &qp in &self.session.qps {
            self.session.fabric.close_endpoint(qp);
        }
    }
}

impl Drop for HostAgent {
    fn drop(&mut self) {
        if !self.dispatchers.is_empty() {
            if let Err(e) = self.buffer.flush() {
                warn!("flush on teardown failed: {e}");
            }
            self.teardown();
        }
    }
}
