//! Simulated two-link transport.
//!
//! A [`Fabric`] hosts endpoints, registered memory regions and the traffic
//! counters of the two links (host/proxy `intra`, off-node `net`). It offers the
//! two families of operations the agents are built on:
//!
//! * one-sided reads and writes on registered regions, where the owner of the
//!   region is passive and never sees the access;
//! * two-sided sends carrying a 32-bit immediate into the destination's shared
//!   receive queue.
//!
//! Every operation is charged `header_overhead` bytes on top of its payload; a
//! doorbell batch is charged the overhead once. Endpoints are in-process by
//! default. An endpoint may also be bridged to another process with
//! [`Fabric::listen`] / [`Fabric::connect`] (see [`tcp`]).

mod completion;
mod counters;
mod link;
pub mod tcp;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam::channel::{self, Receiver, RecvTimeoutError, Sender, TryRecvError};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use completion::{Completion, CompletionGate};
pub use counters::{Charge, ClientId, LinkTraffic, TrafficClass, TrafficSnapshot};
pub use link::{LinkKind, LinkProfile};

pub(crate) use completion::Completer;
use counters::{Tally, TrafficCounters};

pub type Rkey = u32;

pub const DEFAULT_HEADER_OVERHEAD: u64 = 64;
pub const DEFAULT_MAX_MESSAGE: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EndpointId(pub u32);

impl std::fmt::Display for EndpointId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ep{:#x}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FabricError {
    #[error("protection fault: {0}")]
    ProtectionFault(String),
    #[error("remote access denied: rkey {0:#x} is read-only")]
    AccessDenied(Rkey),
    #[error("message of {size} bytes exceeds the {max} byte limit")]
    MessageTooLarge { size: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch spans more than one destination")]
    MixedBatch,
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(EndpointId),
    #[error("no route between {0} and {1}")]
    NoRoute(EndpointId, EndpointId),
    #[error("region length must be positive")]
    EmptyRegion,
    #[error("allocation failure: {requested} bytes requested, {available} available")]
    AllocationFailed { requested: u64, available: u64 },
    #[error("endpoint disconnected")]
    Disconnected,
    #[error("timed out")]
    Timeout,
    #[error("invalid link profile: {0}")]
    InvalidProfile(String),
    #[error("transport error: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Access {
    ReadOnly,
    ReadWrite,
}

/// Descriptor of a registered memory region. Cheap to copy and hand to peers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegisteredRegion {
    pub rkey: Rkey,
    /// Address of the region within its owner's registered space.
    pub base: u64,
    pub length: u64,
    pub owner: EndpointId,
    pub access: Access,
}

impl RegisteredRegion {
    fn check_bounds(&self, offset: u64, len: u64) -> Result<(), FabricError> {
        match offset.checked_add(len) {
            Some(end) if end <= self.length => Ok(()),
            _ => Err(FabricError::ProtectionFault(format!(
                "[{offset}, {offset}+{len}) outside rkey {:#x} of length {}",
                self.rkey, self.length
            ))),
        }
    }
}

/// A two-sided message as seen by the receiver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub sender: EndpointId,
    pub immediate: u32,
    pub payload: Vec<u8>,
}

/// One entry of a doorbell batch of one-sided operations.
#[derive(Debug)]
pub enum OneSidedOp {
    /// Read `len` bytes at `offset`, appended to `into` (which may already hold
    /// a caller-written prefix).
    Read { region: RegisteredRegion, offset: u64, len: usize, into: Vec<u8> },
    Write { region: RegisteredRegion, offset: u64, data: Vec<u8> },
}

impl OneSidedOp {
    fn region(&self) -> &RegisteredRegion {
        match self {
            OneSidedOp::Read { region, .. } | OneSidedOp::Write { region, .. } => region,
        }
    }

    fn payload_len(&self) -> u64 {
        match self {
            OneSidedOp::Read { len, .. } => *len as u64,
            OneSidedOp::Write { data, .. } => data.len() as u64,
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum OpOutput {
    Read(Vec<u8>),
    Written,
}

impl OpOutput {
    pub fn into_bytes(self) -> Vec<u8> {
        match self {
            OpOutput::Read(b) => b,
            OpOutput::Written => Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FabricConfig {
    pub header_overhead: u64,
    pub max_message_bytes: usize,
    /// Registered bytes allowed per endpoint.
    pub endpoint_capacity: u64,
    pub intra: LinkProfile,
    pub net: LinkProfile,
    /// High bits of every endpoint id minted here; distinct per process when
    /// fabrics are bridged over TCP.
    pub node_id: u16,
    /// Number of queue pairs a host agent opens. No correctness impact.
    pub qp_count: usize,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            header_overhead: DEFAULT_HEADER_OVERHEAD,
            max_message_bytes: DEFAULT_MAX_MESSAGE,
            endpoint_capacity: u64::MAX,
            intra: LinkProfile::default_intra(),
            net: LinkProfile::default_net(),
            node_id: 1,
            qp_count: 4,
        }
    }
}

struct LocalEndpoint {
    tx: Sender<Message>,
    rx: Receiver<Message>,
    registered: u64,
}

enum EndpointKind {
    Local(LocalEndpoint),
    /// Lives in another process; reachable through one bridge per local peer.
    Remote,
}

struct EndpointEntry {
    client: ClientId,
    kind: EndpointKind,
}

pub(crate) struct RegionEntry {
    pub desc: RegisteredRegion,
    pub memory: Arc<RwLock<Vec<u8>>>,
}

pub(crate) struct FabricInner {
    config: FabricConfig,
    endpoints: RwLock<HashMap<EndpointId, EndpointEntry>>,
    routes: RwLock<HashMap<(EndpointId, EndpointId), LinkKind>>,
    regions: RwLock<HashMap<Rkey, RegionEntry>>,
    bridges: RwLock<HashMap<(EndpointId, EndpointId), Arc<tcp::Bridge>>>,
    counters: TrafficCounters,
    gate: Arc<CompletionGate>,
    next_endpoint: AtomicU32,
    next_rkey: AtomicU32,
    next_base: AtomicU64,
}

/// Shared handle to one simulated fabric. Clones refer to the same fabric.
#[derive(Clone)]
pub struct Fabric {
    inner: Arc<FabricInner>,
}

fn pair(a: EndpointId, b: EndpointId) -> (EndpointId, EndpointId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Default for Fabric {
    fn default() -> Self {
        Fabric::new(FabricConfig::default())
    }
}

impl Fabric {
    pub fn new(config: FabricConfig) -> Fabric {
        let counters = TrafficCounters::new(config.intra, config.net);
        let node = (config.node_id as u32) << 16;
        let rkey_seed = 0x1000u32.wrapping_add((config.node_id as u32) << 20);
        Fabric {
            inner: Arc::new(FabricInner {
                config,
                endpoints: RwLock::new(HashMap::new()),
                routes: RwLock::new(HashMap::new()),
                regions: RwLock::new(HashMap::new()),
                bridges: RwLock::new(HashMap::new()),
                counters,
                gate: Arc::new(CompletionGate::default()),
                next_endpoint: AtomicU32::new(node | 1),
                next_rkey: AtomicU32::new(rkey_seed),
                next_base: AtomicU64::new(0x10_0000),
            }),
        }
    }

    pub fn config(&self) -> &FabricConfig {
        &self.inner.config
    }

    pub fn header_overhead(&self) -> u64 {
        self.inner.config.header_overhead
    }

    pub fn profile(&self, kind: LinkKind) -> LinkProfile {
        self.inner.counters.profile(kind)
    }

    pub fn gate(&self) -> &CompletionGate {
        &self.inner.gate
    }

    pub fn counters(&self) -> TrafficSnapshot {
        self.inner.counters.snapshot()
    }

    pub fn create_endpoint(&self, client: ClientId) -> EndpointId {
        let id = EndpointId(self.inner.next_endpoint.fetch_add(1, Ordering::Relaxed));
        let (tx, rx) = channel::unbounded();
        self.inner.endpoints.write().insert(
            id,
            EndpointEntry { client, kind: EndpointKind::Local(LocalEndpoint { tx, rx, registered: 0 }) },
        );
        id
    }

    /// Declare which link traffic between `a` and `b` traverses.
    pub fn connect_endpoints(&self, a: EndpointId, b: EndpointId, link: LinkKind) {
        self.inner.routes.write().insert(pair(a, b), link);
    }

    pub fn route(&self, a: EndpointId, b: EndpointId) -> Result<LinkKind, FabricError> {
        self.inner.routes.read().get(&pair(a, b)).copied().ok_or(FabricError::NoRoute(a, b))
    }

    pub fn client_of(&self, ep: EndpointId) -> Option<ClientId> {
        self.inner.endpoints.read().get(&ep).map(|e| e.client)
    }

    /// Drop an endpoint. Its receive queue reports disconnection once drained.
    pub fn close_endpoint(&self, ep: EndpointId) {
        self.inner.endpoints.write().remove(&ep);
        let bridges: Vec<_> = {
            let mut map = self.inner.bridges.write();
            let keys: Vec<_> = map.keys().filter(|(l, _)| *l == ep).copied().collect();
            keys.into_iter().filter_map(|k| map.remove(&k)).collect()
        };
        for b in bridges {
            b.shutdown();
        }
    }

    pub fn receiver(&self, ep: EndpointId) -> Result<RecvQueue, FabricError> {
        match self.inner.endpoints.read().get(&ep) {
            Some(EndpointEntry { kind: EndpointKind::Local(l), .. }) => Ok(RecvQueue { rx: l.rx.clone() }),
            _ => Err(FabricError::UnknownEndpoint(ep)),
        }
    }

    // ---- memory registration ----

    pub fn register_region(&self, owner: EndpointId, length: u64, access: Access) -> Result<RegisteredRegion, FabricError> {
        if length == 0 {
            return Err(FabricError::EmptyRegion);
        }
        let cap = self.inner.config.endpoint_capacity;
        {
            let mut eps = self.inner.endpoints.write();
            let local = match eps.get_mut(&owner) {
                Some(EndpointEntry { kind: EndpointKind::Local(l), .. }) => l,
                _ => return Err(FabricError::UnknownEndpoint(owner)),
            };
            let available = cap.saturating_sub(local.registered);
            if length > available {
                return Err(FabricError::AllocationFailed { requested: length, available });
            }
            local.registered += length;
        }
        let memory = Arc::new(RwLock::new(vec![0u8; length as usize]));
        Ok(self.insert_region(owner, length, access, memory))
    }

    fn insert_region(&self, owner: EndpointId, length: u64, access: Access, memory: Arc<RwLock<Vec<u8>>>) -> RegisteredRegion {
        let rkey = self.inner.next_rkey.fetch_add(1, Ordering::Relaxed);
        let base = self.inner.next_base.fetch_add(length.next_multiple_of(4096), Ordering::Relaxed);
        let desc = RegisteredRegion { rkey, base, length, owner, access };
        self.inner.regions.write().insert(rkey, RegionEntry { desc, memory });
        desc
    }

    /// Register the memory behind `region` a second time under a fresh rkey.
    pub fn share_region(&self, region: &RegisteredRegion, access: Access) -> Result<RegisteredRegion, FabricError> {
        let memory = self.local_region(region)?.memory.clone();
        let shared = self.insert_region(region.owner, region.length, access, memory);
        Ok(RegisteredRegion { base: region.base, ..shared })
    }

    /// Invalidate an rkey. Capacity is returned when the last rkey of a memory
    /// area goes away.
    pub fn deregister(&self, region: &RegisteredRegion) -> Result<(), FabricError> {
        let removed = self
            .inner
            .regions
            .write()
            .remove(&region.rkey)
            .ok_or_else(|| FabricError::ProtectionFault(format!("unknown rkey {:#x}", region.rkey)))?;
        // The region table held one reference; only the caller-visible aliases remain.
        if Arc::strong_count(&removed.memory) == 1 {
            if let Some(EndpointEntry { kind: EndpointKind::Local(l), .. }) =
                self.inner.endpoints.write().get_mut(&region.owner)
            {
                l.registered = l.registered.saturating_sub(region.length);
            }
        }
        Ok(())
    }

    pub fn registered_bytes(&self, ep: EndpointId) -> u64 {
        match self.inner.endpoints.read().get(&ep) {
            Some(EndpointEntry { kind: EndpointKind::Local(l), .. }) => l.registered,
            _ => 0,
        }
    }

    fn local_region(&self, region: &RegisteredRegion) -> Result<RegionEntryRef, FabricError> {
        let regions = self.inner.regions.read();
        let entry = regions
            .get(&region.rkey)
            .ok_or_else(|| FabricError::ProtectionFault(format!("unknown rkey {:#x}", region.rkey)))?;
        Ok(RegionEntryRef { desc: entry.desc, memory: entry.memory.clone() })
    }

    /// Owner-side access to the bytes of a locally registered region.
    pub fn with_region<R>(&self, region: &RegisteredRegion, f: impl FnOnce(&[u8]) -> R) -> Result<R, FabricError> {
        let entry = self.local_region(region)?;
        let mem = entry.memory.read();
        Ok(f(&mem))
    }

    /// Owner-side mutable access to a locally registered region.
    pub fn with_region_mut<R>(&self, region: &RegisteredRegion, f: impl FnOnce(&mut [u8]) -> R) -> Result<R, FabricError> {
        let entry = self.local_region(region)?;
        let mut mem = entry.memory.write();
        Ok(f(&mut mem))
    }

    pub(crate) fn serve_local(&self, owner: EndpointId, rkey: Rkey, op: ServeOp) -> Result<Vec<u8>, FabricError> {
        let entry = {
            let regions = self.inner.regions.read();
            let e = regions
                .get(&rkey)
                .ok_or_else(|| FabricError::ProtectionFault(format!("unknown rkey {rkey:#x}")))?;
            RegionEntryRef { desc: e.desc, memory: e.memory.clone() }
        };
        if entry.desc.owner != owner {
            return Err(FabricError::ProtectionFault(format!("rkey {rkey:#x} not owned by {owner}")));
        }
        match op {
            ServeOp::Read { offset, len } => {
                entry.desc.check_bounds(offset, len as u64)?;
                let mem = entry.memory.read();
                Ok(mem[offset as usize..offset as usize + len].to_vec())
            }
            ServeOp::Write { offset, data } => {
                entry.desc.check_bounds(offset, data.len() as u64)?;
                if entry.desc.access != Access::ReadWrite {
                    return Err(FabricError::AccessDenied(rkey));
                }
                let mut mem = entry.memory.write();
                mem[offset as usize..offset as usize + data.len()].copy_from_slice(data);
                Ok(Vec::new())
            }
        }
    }

    // ---- one-sided operations ----

    /// Post a doorbell batch of one-sided operations against regions owned by
    /// a single peer. The whole batch is validated before anything moves.
    pub fn post_batch(&self, from: EndpointId, ops: Vec<(OneSidedOp, Charge)>) -> Result<Vec<Completion<OpOutput>>, FabricError> {
        let first = ops.first().ok_or(FabricError::EmptyBatch)?;
        let owner = first.0.region().owner;
        if ops.iter().any(|(op, _)| op.region().owner != owner) {
            return Err(FabricError::MixedBatch);
        }
        let link = self.route(from, owner)?;
        for (op, _) in &ops {
            op.region().check_bounds(op_offset(op), op.payload_len())?;
        }

        // Charge before moving: the header once, payloads per op.
        let overhead = self.inner.config.header_overhead;
        for (i, (op, charge)) in ops.iter().enumerate() {
            let header = if i == 0 { overhead } else { 0 };
            let doorbells = u64::from(i == 0);
            self.inner.counters.record(
                link,
                *charge,
                Tally { messages: 1, payload: op.payload_len(), header, doorbells },
            );
        }

        let bridge = self.inner.bridges.read().get(&(from, owner)).cloned();
        let mut out = Vec::with_capacity(ops.len());
        match bridge {
            Some(bridge) => {
                for (op, _) in ops {
                    out.push(bridge.post_one_sided(op, self.inner.gate.clone()));
                }
            }
            None => {
                for (op, _) in ops {
                    let res = self.execute_local(op);
                    out.push(Completion::ready(self.inner.gate.clone(), res));
                }
            }
        }
        Ok(out)
    }

    fn execute_local(&self, op: OneSidedOp) -> Result<OpOutput, FabricError> {
        match op {
            OneSidedOp::Read { region, offset, len, mut into } => {
                let entry = self.local_region(&region)?;
                let mem = entry.memory.read();
                into.extend_from_slice(&mem[offset as usize..offset as usize + len]);
                Ok(OpOutput::Read(into))
            }
            OneSidedOp::Write { region, offset, data } => {
                let entry = self.local_region(&region)?;
                if entry.desc.access != Access::ReadWrite {
                    return Err(FabricError::AccessDenied(region.rkey));
                }
                let mut mem = entry.memory.write();
                mem[offset as usize..offset as usize + data.len()].copy_from_slice(&data);
                Ok(OpOutput::Written)
            }
        }
    }

    pub fn post_read(&self, from: EndpointId, region: &RegisteredRegion, offset: u64, len: usize, charge: Charge) -> Result<Completion<OpOutput>, FabricError> {
        let op = OneSidedOp::Read { region: *region, offset, len, into: Vec::with_capacity(len) };
        Ok(self.post_batch(from, vec![(op, charge)])?.pop().expect("one completion per op"))
    }

    pub fn post_write(&self, from: EndpointId, region: &RegisteredRegion, offset: u64, data: Vec<u8>, charge: Charge) -> Result<Completion<OpOutput>, FabricError> {
        let op = OneSidedOp::Write { region: *region, offset, data };
        Ok(self.post_batch(from, vec![(op, charge)])?.pop().expect("one completion per op"))
    }

    pub fn one_sided_read(&self, from: EndpointId, region: &RegisteredRegion, offset: u64, len: usize, charge: Charge) -> Result<Vec<u8>, FabricError> {
        self.post_read(from, region, offset, len, charge)?.wait().map(OpOutput::into_bytes)
    }

    pub fn one_sided_write(&self, from: EndpointId, region: &RegisteredRegion, offset: u64, data: &[u8], charge: Charge) -> Result<(), FabricError> {
        self.post_write(from, region, offset, data.to_vec(), charge)?.wait().map(|_| ())
    }

    // ---- two-sided operations ----

    pub fn send(&self, from: EndpointId, to: EndpointId, immediate: u32, payload: Vec<u8>, charge: Charge) -> Result<(), FabricError> {
        self.send_batch(from, to, vec![(immediate, payload)], charge)
    }

    /// Deliver `messages` in order with a single doorbell.
    pub fn send_batch(&self, from: EndpointId, to: EndpointId, messages: Vec<(u32, Vec<u8>)>, charge: Charge) -> Result<(), FabricError> {
        if messages.is_empty() {
            return Err(FabricError::EmptyBatch);
        }
        let max = self.inner.config.max_message_bytes;
        if let Some((_, p)) = messages.iter().find(|(_, p)| p.len() > max) {
            return Err(FabricError::MessageTooLarge { size: p.len(), max });
        }
        let link = self.route(from, to)?;
        let payload: u64 = messages.iter().map(|(_, p)| p.len() as u64).sum();
        let tally = Tally {
            messages: messages.len() as u64,
            payload,
            header: self.inner.config.header_overhead,
            doorbells: 1,
        };

        let bridge = self.inner.bridges.read().get(&(from, to)).cloned();
        if let Some(bridge) = bridge {
            self.inner.counters.record(link, charge, tally);
            for (imm, p) in messages {
                bridge.send_message(imm, &p)?;
            }
            return Ok(());
        }
        let tx = match self.inner.endpoints.read().get(&to) {
            Some(EndpointEntry { kind: EndpointKind::Local(l), .. }) => l.tx.clone(),
            Some(_) => return Err(FabricError::NoRoute(from, to)),
            None => return Err(FabricError::UnknownEndpoint(to)),
        };
        self.inner.counters.record(link, charge, tally);
        for (immediate, payload) in messages {
            tx.send(Message { sender: from, immediate, payload }).map_err(|_| FabricError::Disconnected)?;
        }
        Ok(())
    }

    // ---- bridge plumbing ----

    pub(crate) fn register_remote(&self, local: EndpointId, remote: EndpointId, client: ClientId, link: LinkKind, bridge: Arc<tcp::Bridge>) -> Result<(), FabricError> {
        let mut eps = self.inner.endpoints.write();
        if let Some(EndpointEntry { kind: EndpointKind::Local(_), .. }) = eps.get(&remote) {
            return Err(FabricError::Transport(format!("endpoint id {remote} collides with a local endpoint")));
        }
        eps.insert(remote, EndpointEntry { client, kind: EndpointKind::Remote });
        drop(eps);
        self.inner.routes.write().insert(pair(local, remote), link);
        self.inner.bridges.write().insert((local, remote), bridge);
        Ok(())
    }

    pub(crate) fn unregister_remote(&self, local: EndpointId, remote: EndpointId) {
        self.inner.bridges.write().remove(&(local, remote));
    }

    pub(crate) fn deliver(&self, to: EndpointId, msg: Message) -> Result<(), FabricError> {
        match self.inner.endpoints.read().get(&to) {
            Some(EndpointEntry { kind: EndpointKind::Local(l), .. }) => {
                l.tx.send(msg).map_err(|_| FabricError::Disconnected)
            }
            _ => Err(FabricError::UnknownEndpoint(to)),
        }
    }
}

fn op_offset(op: &OneSidedOp) -> u64 {
    match op {
        OneSidedOp::Read { offset, .. } | OneSidedOp::Write { offset, .. } => *offset,
    }
}

struct RegionEntryRef {
    desc: RegisteredRegion,
    memory: Arc<RwLock<Vec<u8>>>,
}

pub(crate) enum ServeOp<'a> {
    Read { offset: u64, len: usize },
    Write { offset: u64, data: &'a [u8] },
}

/// Consumer handle on an endpoint's shared receive queue. Clones share the
/// queue; each message goes to exactly one consumer.
#[derive(Clone)]
pub struct RecvQueue {
    rx: Receiver<Message>,
}

impl RecvQueue {
    pub fn recv(&self) -> Result<Message, FabricError> {
        self.rx.recv().map_err(|_| FabricError::Disconnected)
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Message, FabricError> {
        self.rx.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => FabricError::Timeout,
            RecvTimeoutError::Disconnected => FabricError::Disconnected,
        })
    }

    pub fn try_recv(&self) -> Result<Option<Message>, FabricError> {
        match self.rx.try_recv() {
            Ok(m) => Ok(Some(m)),
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => Err(FabricError::Disconnected),
        }
    }

    /// Take whatever is queued right now, up to `max` messages, without waiting.
    pub fn drain(&self, max: usize) -> Vec<Message> {
        let mut out = Vec::new();
        while out.len() < max {
            match self.rx.try_recv() {
                Ok(m) => out.push(m),
                Err(_) => break,
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.rx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rx.is_empty()
    }
}
