//! TCP bridge between fabrics living in different processes.
//!
//! Every frame on the wire is
//!
//! ```text
//! [ length: u32 LE ][ immediate: u32 LE ][ payload: length bytes ]
//! ```
//!
//! A connection joins exactly one local endpoint with one remote endpoint. Both
//! sides first send a `HELLO` frame naming their endpoint and client. Two-sided
//! messages travel with their own immediate. One-sided operations are carried
//! as control frames whose immediates sit in the reserved range
//! `0xFFFF_FF00..`; they are served by the bridge against the locally
//! registered regions and never reach an agent's receive queue.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::Mutex;

use super::{
    ClientId, Completer, Completion, CompletionGate, EndpointId, Fabric, FabricError, FabricInner, LinkKind,
    Message, OneSidedOp, OpOutput, ServeOp,
};

pub const RESERVED_IMMEDIATE_BASE: u32 = 0xFFFF_FF00;
const IMM_HELLO: u32 = RESERVED_IMMEDIATE_BASE | 0x01;
const IMM_READ: u32 = RESERVED_IMMEDIATE_BASE | 0x10;
const IMM_WRITE: u32 = RESERVED_IMMEDIATE_BASE | 0x11;
const IMM_REPLY: u32 = RESERVED_IMMEDIATE_BASE | 0x12;

const STATUS_OK: u8 = 0;
const STATUS_PROTECTION: u8 = 1;
const STATUS_ACCESS: u8 = 2;

/// Largest frame accepted from a peer (one-sided reads may exceed the
/// two-sided message limit).
const MAX_FRAME: usize = 1 << 30;

/// Write one frame.
pub fn write_frame<W: Write>(w: &mut W, immediate: u32, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&immediate.to_le_bytes())?;
    w.write_all(payload)
}

/// Read one frame; `Ok(None)` on clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<(u32, Vec<u8>)>> {
    let mut head = [0u8; 8];
    match r.read_exact(&mut head[..1]) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    r.read_exact(&mut head[1..])?;
    let len = u32::from_le_bytes(head[0..4].try_into().unwrap()) as usize;
    let imm = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some((imm, payload)))
}

fn io_err(e: io::Error) -> FabricError {
    FabricError::Transport(e.to_string())
}

struct PendingOp {
    completer: Completer<OpOutput>,
    /// Read target (with any caller prefix); `None` for writes.
    into: Option<Vec<u8>>,
}

/// One established connection.
pub(crate) struct Bridge {
    fabric: Weak<FabricInner>,
    local: EndpointId,
    remote: EndpointId,
    writer: Mutex<BufWriter<TcpStream>>,
    stream: TcpStream,
    pending: Mutex<HashMap<u64, PendingOp>>,
    next_tag: AtomicU64,
    closed: AtomicBool,
}

impl Bridge {
    fn frame(&self, imm: u32, payload: &[u8]) -> Result<(), FabricError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(FabricError::Disconnected);
        }
        let mut w = self.writer.lock();
        write_frame(&mut *w, imm, payload).and_then(|_| w.flush()).map_err(io_err)
    }

    pub(crate) fn send_message(&self, immediate: u32, payload: &[u8]) -> Result<(), FabricError> {
        if immediate >= RESERVED_IMMEDIATE_BASE {
            return Err(FabricError::Transport(format!("immediate {immediate:#x} is reserved")));
        }
        self.frame(immediate, payload)
    }

    pub(crate) fn post_one_sided(&self, op: OneSidedOp, gate: Arc<CompletionGate>) -> Completion<OpOutput> {
        let (completer, completion) = Completion::pending(gate);
        let tag = self.next_tag.fetch_add(1, Ordering::Relaxed);
        let (imm, body, into) = match op {
            OneSidedOp::Read { region, offset, len, into } => {
                let mut body = Vec::with_capacity(24);
                body.extend_from_slice(&tag.to_le_bytes());
                body.extend_from_slice(&region.rkey.to_le_bytes());
                body.extend_from_slice(&offset.to_le_bytes());
                body.extend_from_slice(&(len as u32).to_le_bytes());
                (IMM_READ, body, Some(into))
            }
            OneSidedOp::Write { region, offset, data } => {
                let mut body = Vec::with_capacity(20 + data.len());
                body.extend_from_slice(&tag.to_le_bytes());
                body.extend_from_slice(&region.rkey.to_le_bytes());
                body.extend_from_slice(&offset.to_le_bytes());
                body.extend_from_slice(&data);
                (IMM_WRITE, body, None)
            }
        };
        self.pending.lock().insert(tag, PendingOp { completer, into });
        if let Err(e) = self.frame(imm, &body) {
            if let Some(p) = self.pending.lock().remove(&tag) {
                p.completer.complete(Err(e));
            }
        }
        completion
    }

    pub(crate) fn shutdown(&self) {
        if !self.closed.swap(true, Ordering::AcqRel) {
            let _ = self.stream.shutdown(std::net::Shutdown::Both);
        }
        for (_, p) in self.pending.lock().drain() {
            p.completer.complete(Err(FabricError::Disconnected));
        }
    }

    fn serve(&self, fabric: &Fabric, imm: u32, body: &[u8]) -> Result<(), FabricError> {
        if body.len() < 20 {
            return Err(FabricError::Transport("short one-sided frame".into()));
        }
        let tag = u64::from_le_bytes(body[0..8].try_into().unwrap());
        let rkey = u32::from_le_bytes(body[8..12].try_into().unwrap());
        let offset = u64::from_le_bytes(body[12..20].try_into().unwrap());
        let result = if imm == IMM_READ {
            if body.len() < 24 {
                return Err(FabricError::Transport("short read frame".into()));
            }
            let len = u32::from_le_bytes(body[20..24].try_into().unwrap()) as usize;
            fabric.serve_local(self.local, rkey, ServeOp::Read { offset, len })
        } else {
            fabric.serve_local(self.local, rkey, ServeOp::Write { offset, data: &body[20..] })
        };
        let mut reply = Vec::with_capacity(9);
        reply.extend_from_slice(&tag.to_le_bytes());
        match result {
            Ok(data) => {
                reply.push(STATUS_OK);
                reply.extend_from_slice(&data);
            }
            Err(FabricError::AccessDenied(k)) => {
                reply.push(STATUS_ACCESS);
                reply.extend_from_slice(&k.to_le_bytes());
            }
            Err(e) => {
                reply.push(STATUS_PROTECTION);
                reply.extend_from_slice(e.to_string().as_bytes());
            }
        }
        self.frame(IMM_REPLY, &reply)
    }

    fn complete(&self, body: &[u8]) -> Result<(), FabricError> {
        if body.len() < 9 {
            return Err(FabricError::Transport("short reply frame".into()));
        }
        let tag = u64::from_le_bytes(body[0..8].try_into().unwrap());
        let Some(p) = self.pending.lock().remove(&tag) else {
            return Err(FabricError::Transport(format!("reply for unknown tag {tag}")));
        };
        let data = &body[9..];
        let result = match body[8] {
            STATUS_OK => Ok(match p.into {
                Some(mut into) => {
                    into.extend_from_slice(data);
                    OpOutput::Read(into)
                }
                None => OpOutput::Written,
            }),
            STATUS_ACCESS if data.len() >= 4 => {
                Err(FabricError::AccessDenied(u32::from_le_bytes(data[0..4].try_into().unwrap())))
            }
            _ => Err(FabricError::ProtectionFault(String::from_utf8_lossy(data).into_owned())),
        };
        p.completer.complete(result);
        Ok(())
    }

    fn run_reader(self: Arc<Self>, mut reader: BufReader<TcpStream>) {
        loop {
            let frame = match read_frame(&mut reader) {
                Ok(Some(f)) => f,
                Ok(None) => break,
                Err(e) => {
                    if !self.closed.load(Ordering::Acquire) {
                        log::debug!("bridge {}<->{}: {e}", self.local, self.remote);
                    }
                    break;
                }
            };
            let Some(inner) = self.fabric.upgrade() else { break };
            let fabric = Fabric { inner };
            let (imm, payload) = frame;
            let res = match imm {
                IMM_HELLO => Ok(()),
                IMM_READ | IMM_WRITE => self.serve(&fabric, imm, &payload),
                IMM_REPLY => self.complete(&payload),
                _ => fabric.deliver(self.local, Message { sender: self.remote, immediate: imm, payload }),
            };
            if let Err(e) = res {
                log::warn!("bridge {}<->{}: {e}", self.local, self.remote);
                if matches!(e, FabricError::Disconnected | FabricError::UnknownEndpoint(_)) {
                    break;
                }
            }
        }
        self.shutdown();
        if let Some(inner) = self.fabric.upgrade() {
            Fabric { inner }.unregister_remote(self.local, self.remote);
        }
    }
}

fn hello(local: EndpointId, client: ClientId) -> Vec<u8> {
    let mut b = Vec::with_capacity(8);
    b.extend_from_slice(&local.0.to_le_bytes());
    b.extend_from_slice(&client.0.to_le_bytes());
    b
}

/// Accept loop bound to one local endpoint.
pub struct Listener {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Listener {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
    }
}

impl Fabric {
    fn establish(&self, stream: TcpStream, local: EndpointId, link: LinkKind) -> Result<EndpointId, FabricError> {
        stream.set_nodelay(true).map_err(io_err)?;
        let client = self.client_of(local).ok_or(FabricError::UnknownEndpoint(local))?;
        let mut writer = BufWriter::new(stream.try_clone().map_err(io_err)?);
        write_frame(&mut writer, IMM_HELLO, &hello(local, client)).and_then(|_| writer.flush()).map_err(io_err)?;
        let mut reader = BufReader::new(stream.try_clone().map_err(io_err)?);
        let (imm, body) = read_frame(&mut reader)
            .map_err(io_err)?
            .ok_or(FabricError::Disconnected)?;
        if imm != IMM_HELLO || body.len() != 8 {
            return Err(FabricError::Transport("peer did not start with HELLO".into()));
        }
        let remote = EndpointId(u32::from_le_bytes(body[0..4].try_into().unwrap()));
        let remote_client = ClientId(u32::from_le_bytes(body[4..8].try_into().unwrap()));
        let bridge = Arc::new(Bridge {
            fabric: Arc::downgrade(&self.inner),
            local,
            remote,
            writer: Mutex::new(writer),
            stream,
            pending: Mutex::new(HashMap::new()),
            next_tag: AtomicU64::new(1),
            closed: AtomicBool::new(false),
        });
        self.register_remote(local, remote, remote_client, link, bridge.clone())?;
        thread::Builder::new()
            .name(format!("bridge-{local}"))
            .spawn(move || bridge.run_reader(reader))
            .map_err(io_err)?;
        Ok(remote)
    }

    /// Connect `local` to the endpoint listening at `addr`; returns the remote
    /// endpoint id, routed over `link`.
    pub fn connect<A: ToSocketAddrs>(&self, addr: A, local: EndpointId, link: LinkKind) -> Result<EndpointId, FabricError> {
        let stream = TcpStream::connect(addr).map_err(io_err)?;
        self.establish(stream, local, link)
    }

    /// Accept connections for `local`. Each peer becomes a remote endpoint
    /// whose messages land in `local`'s shared receive queue.
    pub fn listen<A: ToSocketAddrs>(&self, addr: A, local: EndpointId, link: LinkKind) -> Result<Listener, FabricError> {
        let listener = TcpListener::bind(addr).map_err(io_err)?;
        listener.set_nonblocking(true).map_err(io_err)?;
        let bound = listener.local_addr().map_err(io_err)?;
        let stop = Arc::new(AtomicBool::new(false));
        let fabric = self.clone();
        let flag = stop.clone();
        let thread = thread::Builder::new()
            .name(format!("listen-{bound}"))
            .spawn(move || {
                while !flag.load(Ordering::Acquire) {
                    match listener.accept() {
                        Ok((stream, peer)) => {
                            let _ = stream.set_nonblocking(false);
                            match fabric.establish(stream, local, link) {
                                Ok(remote) => log::info!("{local}: accepted {remote} from {peer}"),
                                Err(e) => log::warn!("{local}: handshake with {peer} failed: {e}"),
                            }
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                        Err(e) => {
                            log::warn!("accept on {bound}: {e}");
                            thread::sleep(Duration::from_millis(50));
                        }
                    }
                }
            })
            .map_err(io_err)?;
        Ok(Listener { addr: bound, stop, thread: Some(thread) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_layout_is_length_immediate_payload() {
        let mut buf = Vec::new();
        write_frame(&mut buf, 0x0102_0304, b"abc").unwrap();
        assert_eq!(buf, [3, 0, 0, 0, 4, 3, 2, 1, b'a', b'b', b'c']);
        let (imm, payload) = read_frame(&mut &buf[..]).unwrap().unwrap();
        assert_eq!(imm, 0x0102_0304);
        assert_eq!(payload, b"abc");
    }

    #[test]
    fn empty_stream_is_clean_eof() {
        assert!(read_frame(&mut &[][..]).unwrap().is_none());
    }

    #[test]
    fn truncated_frame_is_an_error() {
        let buf = [5u8, 0, 0, 0, 1, 0, 0, 0, b'x'];
        assert!(read_frame(&mut &buf[..]).is_err());
    }
}
