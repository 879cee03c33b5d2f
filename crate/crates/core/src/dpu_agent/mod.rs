//! The proxy that runs on the SmartNIC.
//!
//! Hosts send requests to one endpoint whose receive queue is shared by every
//! client. Stage A drains that queue, validates requests against the
//! [`RegionDirectory`], answers cache hits, and posts everything else to the
//! memory node as one doorbell batch per drain. Stage B waits for the batch's
//! completions and sends responses straight out of the buffers the data was
//! read into. A bounded queue between the two stages applies back-pressure.
//!
//! Control messages are handled by a third thread so that a slow allocation
//! never stalls the data path.

mod batch;
mod control;
mod directory;
mod dynamic;

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam::channel::{self, Receiver, Sender};
use log::{debug, warn};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{coalesce, ReadTask, TaskBatch, WriteRun, WriteSpan, WriteTask};
pub use directory::{DirectoryEntry, RegionDirectory};
pub use dynamic::CacheStats;

use crate::dpu_cache::{
    CacheError, CacheMode, MemoryBudget, Prefetcher, Reservation, StaticCache, DEFAULT_ENTRY_BYTES, DEFAULT_HIT_WINDOW,
    DEFAULT_HYSTERESIS, DEFAULT_PREFETCH_DEGREE,
};
use crate::fabric::{Charge, ClientId, Completion, EndpointId, Fabric, FabricError, LinkKind, Message, OneSidedOp, OpOutput, RecvQueue};
use crate::protocol::{
    ControlMessage, ErrorCode, ErrorResponse, ReadRequest, RequestKind, WriteRequest, READ_RESPONSE_HEADER_LEN,
};
use dynamic::{DynamicCache, Probe};

pub const DEFAULT_DPU_MEMORY: u64 = 1 << 30;
pub const DEFAULT_CACHE_BYTES: u64 = 768 << 20;
pub const DEFAULT_MAX_BATCH: usize = 32;
pub const DEFAULT_QUEUE_DEPTH: usize = 256;

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("proxy configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    /// Memory agent endpoint the proxy forwards to.
    pub memory: EndpointId,
    /// Client id of the proxy's own endpoints.
    pub client: ClientId,
    /// Reuse an existing endpoint for the memory-node side, for example one
    /// already bridged over TCP.
    pub net_endpoint: Option<EndpointId>,
    pub aggregation: bool,
    pub max_batch: usize,
    pub queue_depth: usize,
    pub dpu_memory: u64,
    pub cache_mode: CacheMode,
    pub cache_bytes: u64,
    pub entry_bytes: usize,
    pub prefetch_degree: u64,
    pub hit_window: usize,
    pub hysteresis: f64,
    /// Let the hit-rate monitor switch dynamic caching off and on.
    pub adaptive: bool,
    /// Chunk size assumed for regions mapped without a prior allocation
    /// through this proxy.
    pub default_chunk_size: u32,
    pub seed: u64,
    pub request_timeout: Duration,
}

impl ProxyConfig {
    pub fn new(memory: EndpointId) -> ProxyConfig {
        ProxyConfig {
            memory,
            client: ClientId(0),
            net_endpoint: None,
            aggregation: true,
            max_batch: DEFAULT_MAX_BATCH,
            queue_depth: DEFAULT_QUEUE_DEPTH,
            dpu_memory: DEFAULT_DPU_MEMORY,
            cache_mode: CacheMode::Off,
            cache_bytes: DEFAULT_CACHE_BYTES,
            entry_bytes: DEFAULT_ENTRY_BYTES,
            prefetch_degree: DEFAULT_PREFETCH_DEGREE,
            hit_window: DEFAULT_HIT_WINDOW,
            hysteresis: DEFAULT_HYSTERESIS,
            adaptive: true,
            default_chunk_size: crate::host_agent::DEFAULT_CHUNK_SIZE,
            seed: 0x5eed,
            request_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyStats {
    /// Data-plane requests taken off the receive queue.
    pub accepted: u64,
    pub reads: u64,
    pub writes: u64,
    pub control: u64,
    /// Drains of the receive queue that held at least one data request.
    pub batches: u64,
    pub largest_batch: u64,
    /// Doorbell batches posted to the memory node.
    pub doorbells: u64,
    pub server_reads: u64,
    /// Server writes after coalescing.
    pub server_writes: u64,
    pub read_responses: u64,
    pub write_acks: u64,
    pub error_responses: u64,
    pub rejected_on_shutdown: u64,
    /// Copies of read data between landing from the memory node and leaving
    /// for the host.
    pub intermediate_copies: u64,
    pub static_loads: u64,
    pub static_bytes: u64,
}

#[derive(Default)]
struct Counters {
    accepted: AtomicU64,
    reads: AtomicU64,
    writes: AtomicU64,
    control: AtomicU64,
    batches: AtomicU64,
    largest_batch: AtomicU64,
    doorbells: AtomicU64,
    server_reads: AtomicU64,
    server_writes: AtomicU64,
    read_responses: AtomicU64,
    write_acks: AtomicU64,
    error_responses: AtomicU64,
    rejected: AtomicU64,
    intermediate_copies: AtomicU64,
    static_loads: AtomicU64,
    static_bytes: AtomicU64,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

#[derive(Default)]
struct Intake {
    paused: bool,
    parked: bool,
}

struct PendingRead {
    task: ReadTask,
    completion: Completion<OpOutput>,
    _staging: Option<Reservation>,
}

struct PendingWrite {
    /// Writes acknowledged when this server write completes.
    origins: Vec<(EndpointId, ClientId, u64)>,
    completion: Completion<OpOutput>,
    groups: Vec<(u16, u64, u64)>,
}

enum Work {
    Forwarded { reads: Vec<PendingRead>, writes: Vec<PendingWrite> },
    /// A read whose group was being prefetched when it arrived.
    AwaitFill { task: ReadTask, region_id: u16 },
}

pub(crate) struct Inner {
    fabric: Fabric,
    config: ProxyConfig,
    host_ep: EndpointId,
    net_ep: EndpointId,
    directory: RegionDirectory,
    statics: StaticCache,
    budget: Arc<MemoryBudget>,
    cache: Option<DynamicCache>,
    counters: Counters,
    stopping: AtomicBool,
    net_rx: RecvQueue,
    rpc_lock: Mutex<()>,
    intake: Mutex<Intake>,
    intake_cond: Condvar,
}

/// Handle to a running proxy. Dropping it shuts the proxy down.
pub struct ProxyService {
    inner: Arc<Inner>,
    prefetcher: Option<Prefetcher>,
    threads: Vec<JoinHandle<()>>,
    host_rx: RecvQueue,
}

/// Start a proxy in front of `config.memory`.
pub fn run_proxy(fabric: &Fabric, config: ProxyConfig) -> Result<ProxyService, ProxyError> {
    ProxyService::start(fabric, config)
}

impl ProxyService {
    pub fn start(fabric: &Fabric, config: ProxyConfig) -> Result<ProxyService, ProxyError> {
        if config.max_batch == 0 || config.queue_depth == 0 {
            return Err(ProxyError::Config("max_batch and queue_depth must be positive".into()));
        }
        if config.default_chunk_size == 0 {
            return Err(ProxyError::Config("default chunk size must be positive".into()));
        }
        let budget = MemoryBudget::new(config.dpu_memory);
        let cache = match config.cache_mode {
            CacheMode::Dynamic => {
                let reservation = budget.try_reserve(config.cache_bytes)?;
                let threshold = crate::dpu_cache::required_hit_rate(
                    fabric.profile(LinkKind::Net).bandwidth(),
                    fabric.profile(LinkKind::Intra).bandwidth(),
                )?;
                Some(DynamicCache::new(&config, threshold, reservation)?)
            }
            _ => None,
        };
        let host_ep = fabric.create_endpoint(config.client);
        let net_ep = match config.net_endpoint {
            Some(ep) => ep,
            None => {
                let ep = fabric.create_endpoint(config.client);
                fabric.connect_endpoints(ep, config.memory, LinkKind::Net);
                ep
            }
        };
        let host_rx = fabric.receiver(host_ep)?;
        let net_rx = fabric.receiver(net_ep)?;
        let inner = Arc::new(Inner {
            fabric: fabric.clone(),
            config: config.clone(),
            host_ep,
            net_ep,
            directory: RegionDirectory::new(),
            statics: StaticCache::new(),
            budget,
            cache,
            counters: Counters::default(),
            stopping: AtomicBool::new(false),
            net_rx,
            rpc_lock: Mutex::new(()),
            intake: Mutex::new(Intake::default()),
            intake_cond: Condvar::new(),
        });

        let (work_tx, work_rx) = channel::bounded::<Work>(config.queue_depth);
        let (control_tx, control_rx) = channel::unbounded::<Message>();
        let mut threads = Vec::new();
        let spawn = |name: &str, f: Box<dyn FnOnce() + Send>| {
            std::thread::Builder::new().name(name.to_string()).spawn(f).expect("spawn proxy thread")
        };
        {
            let (inner, rx) = (inner.clone(), host_rx.clone());
            threads.push(spawn("proxy-stage-a", Box::new(move || inner.stage_a(rx, work_tx, control_tx))));
        }
        {
            let inner = inner.clone();
            threads.push(spawn("proxy-stage-b", Box::new(move || inner.stage_b(work_rx))));
        }
        {
            let inner = inner.clone();
            threads.push(spawn("proxy-control", Box::new(move || inner.control_loop(control_rx))));
        }
        let prefetcher = inner.cache.as_ref().map(|c| {
            Prefetcher::spawn(c.recent.clone(), c.table.clone(), Arc::new(dynamic::Source(inner.clone())), config.prefetch_degree)
        });
        debug!("proxy up: host side {host_ep}, memory side {net_ep}, cache {}", config.cache_mode);
        Ok(ProxyService { inner, prefetcher, threads, host_rx })
    }

    /// Endpoint hosts connect to.
    pub fn endpoint(&self) -> EndpointId {
        self.inner.host_ep
    }

    pub fn net_endpoint(&self) -> EndpointId {
        self.inner.net_ep
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.inner.config
    }

    pub fn directory(&self) -> &RegionDirectory {
        &self.inner.directory
    }

    pub fn budget(&self) -> &MemoryBudget {
        &self.inner.budget
    }

    pub fn static_bytes(&self) -> u64 {
        self.inner.statics.bytes()
    }

    pub fn stats(&self) -> ProxyStats {
        let c = &self.inner.counters;
        let l = |a: &AtomicU64| a.load(Ordering::Relaxed);
        ProxyStats {
            accepted: l(&c.accepted),
            reads: l(&c.reads),
            writes: l(&c.writes),
            control: l(&c.control),
            batches: l(&c.batches),
            largest_batch: l(&c.largest_batch),
            doorbells: l(&c.doorbells),
            server_reads: l(&c.server_reads),
            server_writes: l(&c.server_writes),
            read_responses: l(&c.read_responses),
            write_acks: l(&c.write_acks),
            error_responses: l(&c.error_responses),
            rejected_on_shutdown: l(&c.rejected),
            intermediate_copies: l(&c.intermediate_copies),
            static_loads: l(&c.static_loads),
            static_bytes: l(&c.static_bytes),
        }
    }

    /// `None` unless dynamic caching is configured.
    pub fn cache_stats(&self) -> Option<CacheStats> {
        let c = self.inner.cache.as_ref()?;
        Some(c.stats(self.prefetcher.as_ref().map(|p| p.counters())))
    }

    /// Stop taking requests off the receive queue. Returns once stage A is
    /// idle; requests sent meanwhile stay queued.
    pub fn pause_intake(&self) {
        let mut st = self.inner.intake.lock();
        st.paused = true;
        while !st.parked && !self.threads.is_empty() && !self.inner.stopping.load(Ordering::Acquire) {
            self.inner.intake_cond.wait_for(&mut st, Duration::from_millis(50));
        }
    }

    pub fn resume_intake(&self) {
        let mut st = self.inner.intake.lock();
        st.paused = false;
        self.inner.intake_cond.notify_all();
    }

    /// Stop the proxy. Requests already forwarded complete; requests still
    /// queued are answered with a shutting-down error.
    pub fn shutdown(&mut self) {
        if self.threads.is_empty() {
            return;
        }
        self.inner.stopping.store(true, Ordering::Release);
        self.resume_intake();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        if let Some(mut p) = self.prefetcher.take() {
            p.stop();
        }
        self.inner.fabric.close_endpoint(self.inner.host_ep);
        for msg in self.host_rx.drain(usize::MAX) {
            self.inner.reject(msg);
        }
        for entry in self.inner.statics.drain() {
            let _ = self.inner.fabric.deregister(&entry.region);
        }
        if self.inner.config.net_endpoint.is_none() {
            self.inner.fabric.close_endpoint(self.inner.net_ep);
        }
        debug!("proxy {} stopped", self.inner.host_ep);
    }
}

impl Drop for ProxyService {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl Inner {
    fn client_of(&self, ep: EndpointId) -> ClientId {
        self.fabric.client_of(ep).unwrap_or(self.config.client)
    }

    fn respond(&self, to: EndpointId, client: ClientId, kind: RequestKind, payload: Vec<u8>) {
        match kind {
            RequestKind::Read => bump(&self.counters.read_responses),
            RequestKind::Write => bump(&self.counters.write_acks),
            RequestKind::Error => bump(&self.counters.error_responses),
            RequestKind::Control => {}
        }
        if let Err(e) = self.fabric.send(self.host_ep, to, kind.immediate(), payload, Charge::on_demand(client)) {
            warn!("response to {to} lost: {e}");
        }
    }

    fn fail(&self, to: EndpointId, client: ClientId, kind: RequestKind, correlation: u64, code: ErrorCode) {
        let e = ErrorResponse { kind, correlation, code };
        self.respond(to, client, RequestKind::Error, e.encode().to_vec());
    }

    fn wait_if_paused(&self) {
        let mut st = self.intake.lock();
        while st.paused && !self.stopping.load(Ordering::Acquire) {
            st.parked = true;
            self.intake_cond.notify_all();
            self.intake_cond.wait_for(&mut st, Duration::from_millis(50));
        }
        st.parked = false;
    }

    /// Answer a request that will not be served.
    fn reject(&self, msg: Message) {
        let client = self.client_of(msg.sender);
        bump(&self.counters.rejected);
        match RequestKind::try_from(msg.immediate) {
            Ok(RequestKind::Read) => {
                let corr = ReadRequest::decode(&msg.payload).map(|r| r.dest_addr).unwrap_or(0);
                self.fail(msg.sender, client, RequestKind::Read, corr, ErrorCode::ShuttingDown);
            }
            Ok(RequestKind::Write) => {
                let corr = msg.payload.get(..8).map(|b| u64::from_le_bytes(b.try_into().unwrap())).unwrap_or(0);
                self.fail(msg.sender, client, RequestKind::Write, corr, ErrorCode::ShuttingDown);
            }
            Ok(RequestKind::Control) => {
                let reply = ControlMessage::Error { code: ErrorCode::ShuttingDown };
                self.respond(msg.sender, client, RequestKind::Control, reply.encode());
            }
            _ => {}
        }
    }

    // ---- stage A ----

    fn stage_a(&self, rx: RecvQueue, work: Sender<Work>, control: Sender<Message>) {
        loop {
            self.wait_if_paused();
            if self.stopping.load(Ordering::Acquire) {
                break;
            }
            let first = match rx.recv_timeout(Duration::from_millis(20)) {
                Ok(m) => m,
                Err(FabricError::Timeout) => continue,
                Err(_) => break,
            };
            let mut msgs = vec![first];
            if self.config.aggregation {
                msgs.extend(rx.drain(self.config.max_batch - 1));
            }
            self.accept(msgs, &work, &control);
        }
        for msg in rx.drain(usize::MAX) {
            self.reject(msg);
        }
    }

    fn accept(&self, msgs: Vec<Message>, work: &Sender<Work>, control: &Sender<Message>) {
        let mut batch = TaskBatch::default();
        for msg in msgs {
            match RequestKind::try_from(msg.immediate) {
                Ok(RequestKind::Control) => {
                    bump(&self.counters.control);
                    let _ = control.send(msg);
                }
                Ok(RequestKind::Read) => {
                    bump(&self.counters.accepted);
                    bump(&self.counters.reads);
                    self.accept_read(msg, &mut batch, work);
                }
                Ok(RequestKind::Write) => {
                    bump(&self.counters.accepted);
                    bump(&self.counters.writes);
                    self.accept_write(msg, &mut batch);
                }
                _ => warn!("proxy ignores immediate {} from {}", msg.immediate, msg.sender),
            }
        }
        if batch.is_empty() {
            return;
        }
        bump(&self.counters.batches);
        self.counters.largest_batch.fetch_max(batch.len() as u64, Ordering::Relaxed);
        if self.config.aggregation {
            self.forward(batch, work);
        } else {
            for w in batch.writes {
                self.forward(TaskBatch { reads: Vec::new(), writes: vec![w] }, work);
            }
            for r in batch.reads {
                self.forward(TaskBatch { reads: vec![r], writes: Vec::new() }, work);
            }
        }
    }

    fn accept_read(&self, msg: Message, batch: &mut TaskBatch, work: &Sender<Work>) {
        let client = self.client_of(msg.sender);
        let req = match ReadRequest::decode(&msg.payload) {
            Ok(r) => r,
            Err(_) => return self.fail(msg.sender, client, RequestKind::Read, 0, ErrorCode::Malformed),
        };
        let Some(entry) = self.directory.get(req.region_id) else {
            return self.fail(msg.sender, client, RequestKind::Read, req.dest_addr, ErrorCode::UnknownRegion);
        };
        if req.validate(u64::from(entry.chunk_size), entry.length).is_err() {
            return self.fail(msg.sender, client, RequestKind::Read, req.dest_addr, ErrorCode::OutOfBounds);
        }
        let task = ReadTask {
            sender: msg.sender,
            client,
            dest_addr: req.dest_addr,
            chunk_word: req.chunk().pack().expect("decoded word"),
            region: entry.read,
            offset: req.page_offset * u64::from(entry.chunk_size),
            size: req.size,
        };
        let written_here = batch.writes.iter().any(|w| {
            w.region_id == req.region_id && w.offset < task.offset + u64::from(task.size) && task.offset < w.offset + w.data.len() as u64
        });
        if let (Some(cache), true, false) = (&self.cache, entry.dynamic, written_here) {
            match cache.probe(&task, req.region_id, entry.chunk_size) {
                Probe::Hit(buf) => return self.respond(task.sender, client, RequestKind::Read, buf),
                Probe::Pending => {
                    let _ = work.send(Work::AwaitFill { task, region_id: req.region_id });
                    return;
                }
                Probe::Miss | Probe::Bypass => {}
            }
        }
        batch.reads.push(task);
    }

    fn accept_write(&self, msg: Message, batch: &mut TaskBatch) {
        let client = self.client_of(msg.sender);
        let corr = msg.payload.get(..8).map(|b| u64::from_le_bytes(b.try_into().unwrap())).unwrap_or(0);
        let req = match WriteRequest::decode(&msg.payload) {
            Ok(r) => r,
            Err(_) => return self.fail(msg.sender, client, RequestKind::Write, corr, ErrorCode::Malformed),
        };
        let Some(entry) = self.directory.get(req.region_id) else {
            return self.fail(msg.sender, client, RequestKind::Write, corr, ErrorCode::UnknownRegion);
        };
        let region = match entry.write {
            Some((writer, region)) if writer == client => region,
            _ => return self.fail(msg.sender, client, RequestKind::Write, corr, ErrorCode::Coherence),
        };
        let offset = entry.chunk_offset(req.page_offset);
        let in_bounds = !req.data.is_empty()
            && req.data.len() <= entry.chunk_size as usize
            && offset.and_then(|o| o.checked_add(req.data.len() as u64)).is_some_and(|end| end <= entry.length);
        if !in_bounds {
            return self.fail(msg.sender, client, RequestKind::Write, corr, ErrorCode::OutOfBounds);
        }
        batch.writes.push(WriteTask {
            sender: msg.sender,
            client,
            chunk_word: corr,
            region,
            region_id: req.region_id,
            offset: offset.expect("checked"),
            data: req.data,
        });
    }

    /// Post one doorbell batch: writes first so reads in the same batch see
    /// them, then reads into response-shaped staging buffers.
    fn forward(&self, batch: TaskBatch, work: &Sender<Work>) {
        let spans: Vec<WriteSpan> = batch
            .writes
            .iter()
            .map(|w| WriteSpan { region_id: w.region_id, offset: w.offset, len: w.data.len() as u64 })
            .collect();
        let runs = coalesce(&spans);
        let mut writes: Vec<Option<WriteTask>> = batch.writes.into_iter().map(Some).collect();

        let mut ops: Vec<(OneSidedOp, Charge)> = Vec::new();
        let mut write_meta = Vec::new();
        for run in runs {
            let mut members: Vec<WriteTask> = run.members.iter().map(|&i| writes[i].take().expect("member once")).collect();
            let superseded: Vec<WriteTask> = run.superseded.iter().map(|&i| writes[i].take().expect("member once")).collect();
            let head = &members[0];
            let (region, offset, client, region_id) = (head.region, head.offset, head.client, head.region_id);
            let data = if members.len() == 1 {
                std::mem::take(&mut members[0].data)
            } else {
                let mut d = Vec::with_capacity(members.iter().map(|m| m.data.len()).sum());
                for m in &members {
                    d.extend_from_slice(&m.data);
                }
                d
            };
            let groups = vec![(region_id, offset, data.len() as u64)];
            let origins =
                superseded.iter().chain(members.iter()).map(|w| (w.sender, w.client, w.chunk_word)).collect::<Vec<_>>();
            ops.push((OneSidedOp::Write { region, offset, data }, Charge::on_demand(client)));
            write_meta.push((origins, groups));
        }

        let mut read_meta = Vec::new();
        for task in batch.reads {
            let staging = match self.budget.reserve(u64::from(task.size) + READ_RESPONSE_HEADER_LEN as u64, self.config.request_timeout) {
                Ok(r) => r,
                Err(_) => {
                    self.fail(task.sender, task.client, RequestKind::Read, task.dest_addr, ErrorCode::Budget);
                    continue;
                }
            };
            let into = crate::protocol::ReadResponse::staging_buffer(task.dest_addr, task.size as usize);
            ops.push((
                OneSidedOp::Read { region: task.region, offset: task.offset, len: task.size as usize, into },
                Charge::on_demand(task.client),
            ));
            read_meta.push((task, Some(staging)));
        }
        if ops.is_empty() {
            return;
        }
        let n_writes = write_meta.len();
        let n_reads = read_meta.len();
        let completions = match self.fabric.post_batch(self.net_ep, ops) {
            Ok(c) => c,
            Err(e) => {
                warn!("forwarding batch failed: {e}");
                let code = error_code(&e);
                for (origins, _) in write_meta {
                    for (to, client, corr) in origins {
                        self.fail(to, client, RequestKind::Write, corr, code);
                    }
                }
                for (task, _) in read_meta {
                    self.fail(task.sender, task.client, RequestKind::Read, task.dest_addr, code);
                }
                return;
            }
        };
        bump(&self.counters.doorbells);
        self.counters.server_writes.fetch_add(n_writes as u64, Ordering::Relaxed);
        self.counters.server_reads.fetch_add(n_reads as u64, Ordering::Relaxed);
        if let Some(cache) = &self.cache {
            for (_, groups) in &write_meta {
                for &(region_id, offset, len) in groups {
                    cache.invalidate_range(region_id, offset, len);
                }
            }
        }
        let mut completions = completions.into_iter();
        let writes = write_meta
            .into_iter()
            .map(|(origins, groups)| PendingWrite { origins, completion: completions.next().expect("write completion"), groups })
            .collect();
        let reads = read_meta
            .into_iter()
            .map(|(task, staging)| PendingRead { task, completion: completions.next().expect("read completion"), _staging: staging })
            .collect();
        if work.send(Work::Forwarded { reads, writes }).is_err() {
            warn!("stage B gone; forwarded batch dropped");
        }
    }

    // ---- stage B ----

    fn stage_b(&self, rx: Receiver<Work>) {
        for item in rx {
            match item {
                Work::Forwarded { reads, writes } => {
                    for w in writes {
                        self.finish_write(w);
                    }
                    for r in reads {
                        self.finish_read(r);
                    }
                }
                Work::AwaitFill { task, region_id } => self.finish_pending(task, region_id),
            }
        }
    }

    fn finish_write(&self, w: PendingWrite) {
        let res = w.completion.wait_timeout(self.config.request_timeout);
        if let Some(cache) = &self.cache {
            for &(region_id, offset, len) in &w.groups {
                cache.invalidate_range(region_id, offset, len);
            }
        }
        for (to, client, corr) in w.origins {
            match &res {
                Ok(_) => self.respond(to, client, RequestKind::Write, corr.to_le_bytes().to_vec()),
                Err(e) => self.fail(to, client, RequestKind::Write, corr, error_code(e)),
            }
        }
    }

    fn finish_read(&self, r: PendingRead) {
        let t = r.task;
        match r.completion.wait_timeout(self.config.request_timeout) {
            Ok(out) => {
                let mut buf = out.into_bytes();
                let shaped = buf.len() == READ_RESPONSE_HEADER_LEN + t.size as usize
                    && buf[..READ_RESPONSE_HEADER_LEN] == t.dest_addr.to_le_bytes();
                if !shaped {
                    bump(&self.counters.intermediate_copies);
                    let mut fixed = crate::protocol::ReadResponse::staging_buffer(t.dest_addr, t.size as usize);
                    fixed.extend_from_slice(&buf[buf.len() - t.size as usize..]);
                    buf = fixed;
                }
                self.respond(t.sender, t.client, RequestKind::Read, buf);
            }
            Err(e) => self.fail(t.sender, t.client, RequestKind::Read, t.dest_addr, error_code(&e)),
        }
    }

    fn finish_pending(&self, task: ReadTask, region_id: u16) {
        let cache = self.cache.as_ref().expect("pending fills need a cache");
        if let Some(buf) = cache.wait_fill(&task, region_id) {
            return self.respond(task.sender, task.client, RequestKind::Read, buf);
        }
        let into = crate::protocol::ReadResponse::staging_buffer(task.dest_addr, task.size as usize);
        let op = OneSidedOp::Read { region: task.region, offset: task.offset, len: task.size as usize, into };
        match self.fabric.post_batch(self.net_ep, vec![(op, Charge::on_demand(task.client))]) {
            Ok(mut c) => {
                bump(&self.counters.doorbells);
                bump(&self.counters.server_reads);
                let completion = c.pop().expect("one completion");
                self.finish_read(PendingRead { task, completion, _staging: None });
            }
            Err(e) => self.fail(task.sender, task.client, RequestKind::Read, task.dest_addr, error_code(&e)),
        }
    }

    // ---- memory-node control RPC ----

    fn memory_rpc(&self, msg: &ControlMessage, client: ClientId) -> ControlMessage {
        let _serial = self.rpc_lock.lock();
        while let Ok(Some(stale)) = self.net_rx.try_recv() {
            debug!("discarding stale reply from {}", stale.sender);
        }
        if let Err(e) =
            self.fabric.send(self.net_ep, self.config.memory, RequestKind::Control.immediate(), msg.encode(), Charge::on_demand(client))
        {
            warn!("memory agent unreachable: {e}");
            return ControlMessage::Error { code: ErrorCode::Internal };
        }
        loop {
            match self.net_rx.recv_timeout(self.config.request_timeout) {
                Ok(reply) if reply.immediate == RequestKind::Control.immediate() => {
                    return ControlMessage::decode(&reply.payload).unwrap_or(ControlMessage::Error { code: ErrorCode::Malformed })
                }
                Ok(other) => debug!("ignoring immediate {} on memory side", other.immediate),
                Err(_) => return ControlMessage::Error { code: ErrorCode::Internal },
            }
        }
    }
}

fn error_code(e: &FabricError) -> ErrorCode {
    match e {
        FabricError::ProtectionFault(_) => ErrorCode::OutOfBounds,
        FabricError::AccessDenied(_) => ErrorCode::Coherence,
        _ => ErrorCode::Internal,
    }
}
