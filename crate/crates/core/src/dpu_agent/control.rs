use crossbeam::channel::Receiver;
use log::{debug, warn};

use super::{bump, DirectoryEntry, Inner};
use crate::dpu_cache::{CacheMode, StaticEntry};
use crate::fabric::{Access, Charge, ClientId, Message};
use crate::memory_agent::remote_region;
use crate::protocol::{ControlMessage, ErrorCode, RequestKind};

impl Inner {
    pub(super) fn control_loop(&self, rx: Receiver<Message>) {
        for msg in rx {
            let client = self.client_of(msg.sender);
            let reply = match ControlMessage::decode(&msg.payload) {
                Ok(req) => self.control(req, client),
                Err(e) => {
                    warn!("bad control message from {}: {e}", msg.sender);
                    ControlMessage::Error { code: ErrorCode::Malformed }
                }
            };
            self.respond(msg.sender, client, RequestKind::Control, reply.encode());
        }
    }

    fn control(&self, req: ControlMessage, client: ClientId) -> ControlMessage {
        let result = match req {
            ControlMessage::Setup { client } => {
                debug!("client {client} attached");
                Ok(ControlMessage::SetupAck)
            }
            ControlMessage::AllocRegion { client: owner, chunk_size, writable, .. } => {
                let reply = self.memory_rpc(&req, client);
                if let ControlMessage::AllocAck { region_id, rkey, length } = reply {
                    let region = remote_region(self.config.memory, rkey, length, writable);
                    self.directory.insert(
                        region_id,
                        DirectoryEntry {
                            memory: self.config.memory,
                            read: region,
                            write: writable.then_some((ClientId(owner), region)),
                            length,
                            chunk_size,
                            dynamic: self.config.cache_mode == CacheMode::Dynamic,
                        },
                    );
                }
                Ok(reply)
            }
            ControlMessage::MapRegion { client: mapper, region_id, writable } => {
                if writable && self.statics.has_region(region_id) {
                    Err(ErrorCode::Coherence)
                } else {
                    let reply = self.memory_rpc(&req, client);
                    if let ControlMessage::AllocAck { region_id, rkey, length } = reply {
                        self.record_mapping(region_id, ClientId(mapper), rkey, length, writable);
                    }
                    Ok(reply)
                }
            }
            ControlMessage::FreeRegion { region_id } => {
                let reply = self.memory_rpc(&req, client);
                if reply == ControlMessage::FreeAck {
                    self.forget_region(region_id);
                }
                Ok(reply)
            }
            ControlMessage::StaticLoad { region_id, first_chunk, chunk_count } => {
                self.static_load(region_id, first_chunk, chunk_count, client)
            }
            ControlMessage::CachePolicy { region_id, dynamic } => self.set_policy(region_id, dynamic).map(|_| req),
            _ => Err(ErrorCode::Malformed),
        };
        result.unwrap_or_else(|code| ControlMessage::Error { code })
    }

    fn record_mapping(&self, region_id: u16, mapper: ClientId, rkey: u32, length: u64, writable: bool) {
        let region = remote_region(self.config.memory, rkey, length, writable);
        let known = self.directory.update(region_id, |e| {
            if writable {
                e.write = Some((mapper, region));
            }
        });
        if !known {
            self.directory.insert(
                region_id,
                DirectoryEntry {
                    memory: self.config.memory,
                    read: region,
                    write: writable.then_some((mapper, region)),
                    length,
                    chunk_size: self.config.default_chunk_size,
                    dynamic: self.config.cache_mode == CacheMode::Dynamic,
                },
            );
        }
    }

    fn forget_region(&self, region_id: u16) {
        self.directory.remove(region_id);
        if let Some(cache) = &self.cache {
            cache.table.invalidate_region(region_id);
        }
        for entry in self.statics.remove_region(region_id) {
            if let Err(e) = self.fabric.deregister(&entry.region) {
                warn!("static copy of region {region_id}: {e}");
            }
        }
    }

    fn set_policy(&self, region_id: u16, dynamic: bool) -> Result<(), ErrorCode> {
        if dynamic && (self.cache.is_none() || self.statics.has_region(region_id)) {
            return Err(ErrorCode::Budget);
        }
        if !self.directory.update(region_id, |e| e.dynamic = dynamic) {
            return Err(ErrorCode::UnknownRegion);
        }
        if let (Some(cache), false) = (&self.cache, dynamic) {
            cache.table.invalidate_region(region_id);
        }
        Ok(())
    }

    /// Copy a chunk range into proxy memory once and export it read-only.
    fn static_load(&self, region_id: u16, first: u64, count: u64, client: ClientId) -> Result<ControlMessage, ErrorCode> {
        let entry = self.directory.get(region_id).ok_or(ErrorCode::UnknownRegion)?;
        if self.config.cache_mode == CacheMode::Off {
            return Err(ErrorCode::Budget);
        }
        if entry.write.is_some() {
            return Err(ErrorCode::Coherence);
        }
        if count == 0 {
            return Err(ErrorCode::Malformed);
        }
        let cs = u64::from(entry.chunk_size);
        let start = first.checked_mul(cs).filter(|&s| s < entry.length).ok_or(ErrorCode::OutOfBounds)?;
        let end = first.checked_add(count).and_then(|c| c.checked_mul(cs)).map_or(entry.length, |e| e.min(entry.length));
        let len = end - start;
        let reservation = self.budget.try_reserve(len).map_err(|_| ErrorCode::Budget)?;
        let region = self.fabric.register_region(self.host_ep, len, Access::ReadOnly).map_err(|_| ErrorCode::Budget)?;
        let loaded = self
            .fabric
            .one_sided_read(self.net_ep, &entry.read, start, len as usize, Charge::background(client))
            .and_then(|data| self.fabric.with_region_mut(&region, |m| m.copy_from_slice(&data)));
        if let Err(e) = loaded {
            warn!("static load of region {region_id} failed: {e}");
            let _ = self.fabric.deregister(&region);
            return Err(ErrorCode::Internal);
        }
        self.directory.update(region_id, |e| e.dynamic = false);
        if let Some(cache) = &self.cache {
            cache.table.invalidate_region(region_id);
        }
        self.statics.insert(StaticEntry { region_id, first_chunk: first, chunk_count: count, region, reservation });
        bump(&self.counters.static_loads);
        self.counters.static_bytes.fetch_add(len, std::sync::atomic::Ordering::Relaxed);
        debug!("region {region_id}: chunks {first}..{} pinned ({len} bytes)", first + count);
        Ok(ControlMessage::StaticAck { rkey: region.rkey, length: len })
    }
}
