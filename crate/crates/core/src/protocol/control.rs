use super::{ErrorCode, ProtocolError};

/// Control-plane RPC. Each message starts with a one-byte variant tag followed
/// by its fields, little-endian, with no padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlMessage {
    /// Session start; the proxy learns which client an endpoint belongs to.
    Setup { client: u32 },
    SetupAck,
    /// Reserve `length` bytes, optionally preloaded from a file on the memory node.
    AllocRegion { client: u32, length: u64, chunk_size: u32, writable: bool, file: Option<String> },
    /// Answer to `AllocRegion` and `MapRegion`.
    AllocAck { region_id: u16, rkey: u32, length: u64 },
    /// Attach to an existing region.
    MapRegion { client: u32, region_id: u16, writable: bool },
    FreeRegion { region_id: u16 },
    FreeAck,
    /// Pin `chunk_count` chunks starting at `first_chunk` in the proxy cache.
    StaticLoad { region_id: u16, first_chunk: u64, chunk_count: u64 },
    /// Where the pinned chunks can be read one-sided on the proxy.
    StaticAck { rkey: u32, length: u64 },
    /// Turn dynamic caching on or off for one region.
    CachePolicy { region_id: u16, dynamic: bool },
    Error { code: ErrorCode },
}

const T_SETUP: u8 = 1;
const T_SETUP_ACK: u8 = 2;
const T_ALLOC: u8 = 3;
const T_ALLOC_ACK: u8 = 4;
const T_MAP: u8 = 5;
const T_FREE: u8 = 6;
const T_FREE_ACK: u8 = 7;
const T_STATIC_LOAD: u8 = 8;
const T_STATIC_ACK: u8 = 9;
const T_CACHE_POLICY: u8 = 10;
const T_ERROR: u8 = 11;

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(ProtocolError::Malformed("control message"))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }
    fn bool(&mut self) -> Result<bool, ProtocolError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(ProtocolError::Malformed("boolean")),
        }
    }
    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn finish(self) -> Result<(), ProtocolError> {
        if self.at == self.buf.len() {
            Ok(())
        } else {
            Err(ProtocolError::Malformed("trailing bytes"))
        }
    }
}

impl ControlMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32);
        match self {
            ControlMessage::Setup { client } => {
                out.push(T_SETUP);
                out.extend_from_slice(&client.to_le_bytes());
            }
            ControlMessage::SetupAck => out.push(T_SETUP_ACK),
            ControlMessage::AllocRegion { client, length, chunk_size, writable, file } => {
                out.push(T_ALLOC);
                out.extend_from_slice(&client.to_le_bytes());
                out.extend_from_slice(&length.to_le_bytes());
                out.extend_from_slice(&chunk_size.to_le_bytes());
                out.push(u8::from(*writable));
                match file {
                    None => out.push(0),
                    Some(name) => {
                        out.push(1);
                        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
                        out.extend_from_slice(name.as_bytes());
                    }
                }
            }
            ControlMessage::AllocAck { region_id, rkey, length } => {
                out.push(T_ALLOC_ACK);
                out.extend_from_slice(&region_id.to_le_bytes());
                out.extend_from_slice(&rkey.to_le_bytes());
                out.extend_from_slice(&length.to_le_bytes());
            }
            ControlMessage::MapRegion { client, region_id, writable } => {
                out.push(T_MAP);
                out.extend_from_slice(&client.to_le_bytes());
                out.extend_from_slice(&region_id.to_le_bytes());
                out.push(u8::from(*writable));
            }
            ControlMessage::FreeRegion { region_id } => {
                out.push(T_FREE);
                out.extend_from_slice(&region_id.to_le_bytes());
            }
            ControlMessage::FreeAck => out.push(T_FREE_ACK),
            ControlMessage::StaticLoad { region_id, first_chunk, chunk_count } => {
                out.push(T_STATIC_LOAD);
                out.extend_from_slice(&region_id.to_le_bytes());
                out.extend_from_slice(&first_chunk.to_le_bytes());
                out.extend_from_slice(&chunk_count.to_le_bytes());
            }
            ControlMessage::StaticAck { rkey, length } => {
                out.push(T_STATIC_ACK);
                out.extend_from_slice(&rkey.to_le_bytes());
                out.extend_from_slice(&length.to_le_bytes());
            }
            ControlMessage::CachePolicy { region_id, dynamic } => {
                out.push(T_CACHE_POLICY);
                out.extend_from_slice(&region_id.to_le_bytes());
                out.push(u8::from(*dynamic));
            }
            ControlMessage::Error { code } => {
                out.push(T_ERROR);
                out.extend_from_slice(&(*code as u32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let mut r = Reader { buf: bytes, at: 0 };
        let msg = match r.u8()? {
            T_SETUP => ControlMessage::Setup { client: r.u32()? },
            T_SETUP_ACK => ControlMessage::SetupAck,
            T_ALLOC => {
                let client = r.u32()?;
                let length = r.u64()?;
                let chunk_size = r.u32()?;
                let writable = r.bool()?;
                let file = if r.bool()? {
                    let n = r.u32()? as usize;
                    let raw = r.take(n)?;
                    Some(String::from_utf8(raw.to_vec()).map_err(|_| ProtocolError::Malformed("file name"))?)
                } else {
                    None
                };
                ControlMessage::AllocRegion { client, length, chunk_size, writable, file }
            }
            T_ALLOC_ACK => ControlMessage::AllocAck { region_id: r.u16()?, rkey: r.u32()?, length: r.u64()? },
            T_MAP => ControlMessage::MapRegion { client: r.u32()?, region_id: r.u16()?, writable: r.bool()? },
            T_FREE => ControlMessage::FreeRegion { region_id: r.u16()? },
            T_FREE_ACK => ControlMessage::FreeAck,
            T_STATIC_LOAD => ControlMessage::StaticLoad {
                region_id: r.u16()?,
                first_chunk: r.u64()?,
                chunk_count: r.u64()?,
            },
            T_STATIC_ACK => ControlMessage::StaticAck { rkey: r.u32()?, length: r.u64()? },
            T_CACHE_POLICY => ControlMessage::CachePolicy { region_id: r.u16()?, dynamic: r.bool()? },
            T_ERROR => ControlMessage::Error { code: ErrorCode::try_from(r.u32()?)? },
            _ => return Err(ProtocolError::Malformed("control tag")),
        };
        r.finish()?;
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alloc_with_and_without_file() {
        let anon = ControlMessage::AllocRegion { client: 3, length: 1 << 20, chunk_size: 65536, writable: true, file: None };
        let bytes = anon.encode();
        assert_eq!(bytes.len(), 1 + 4 + 8 + 4 + 1 + 1);
        assert_eq!(ControlMessage::decode(&bytes).unwrap(), anon);

        let file = ControlMessage::AllocRegion {
            client: 3,
            length: 16,
            chunk_size: 4096,
            writable: false,
            file: Some("graph.bin".into()),
        };
        assert_eq!(ControlMessage::decode(&file.encode()).unwrap(), file);
    }

    #[test]
    fn rejects_trailing_and_truncated() {
        let mut b = ControlMessage::FreeAck.encode();
        b.push(0);
        assert!(ControlMessage::decode(&b).is_err());
        let b = ControlMessage::AllocAck { region_id: 1, rkey: 2, length: 3 }.encode();
        assert!(ControlMessage::decode(&b[..b.len() - 1]).is_err());
        assert!(ControlMessage::decode(&[]).is_err());
        assert!(ControlMessage::decode(&[200]).is_err());
    }
}
