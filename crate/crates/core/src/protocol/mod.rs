//! Wire formats of the two-sided data plane and the control plane.
//!
//! The first 64-bit word of every data-plane request packs the region id into
//! bits 63..48 and the chunk index into bits 47..0, stored little-endian:
//!
//! ```text
//! read  (24 B): [ region_id:16 | page_offset:48 ][ dest_addr:64 ][ size:32 ][ dest_rkey:32 ]
//! write (12+n): [ region_id:16 | page_offset:48 ][ size:32 ][ data: size bytes ]
//! ```
//!
//! `page_offset` is a chunk index; its byte address is `page_offset * chunk_size`.
//! The request kind travels in the message immediate, see [`RequestKind`].
//! `docs/protocol.md` in the repository root lists every byte.

mod control;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use control::ControlMessage;

pub const READ_REQUEST_LEN: usize = 24;
pub const WRITE_HEADER_LEN: usize = 12;
pub const READ_RESPONSE_HEADER_LEN: usize = 8;
pub const WRITE_ACK_LEN: usize = 8;
pub const ERROR_RESPONSE_LEN: usize = 13;
pub const MAX_PAGE_OFFSET: u64 = (1 << 48) - 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("page offset {0:#x} does not fit in 48 bits")]
    PageOffsetRange(u64),
    #[error("request size must be positive")]
    ZeroSize,
    #[error("declared size {declared} does not match {actual} data bytes")]
    SizeMismatch { declared: u32, actual: usize },
    #[error("expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("unknown immediate tag {0}")]
    UnknownKind(u32),
    #[error("unknown error code {0}")]
    UnknownErrorCode(u32),
    #[error("malformed {0}")]
    Malformed(&'static str),
}

/// Message immediate. Requests use `Read`/`Write`; `Error` marks a failed
/// data-plane request; `Control` carries a [`ControlMessage`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u32)]
pub enum RequestKind {
    Read = 1,
    Write = 2,
    Error = 3,
    Control = 4,
}

impl RequestKind {
    pub fn immediate(self) -> u32 {
        self as u32
    }
}

impl TryFrom<u32> for RequestKind {
    type Error = ProtocolError;

    fn try_from(v: u32) -> Result<Self, ProtocolError> {
        match v {
            1 => Ok(RequestKind::Read),
            2 => Ok(RequestKind::Write),
            3 => Ok(RequestKind::Error),
            4 => Ok(RequestKind::Control),
            other => Err(ProtocolError::UnknownKind(other)),
        }
    }
}

/// `(region_id, chunk index)`; doubles as the chunk id used by the proxy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChunkAddr {
    pub region_id: u16,
    pub page_offset: u64,
}

impl ChunkAddr {
    pub fn new(region_id: u16, page_offset: u64) -> Self {
        ChunkAddr { region_id, page_offset }
    }

    pub fn pack(self) -> Result<u64, ProtocolError> {
        if self.page_offset > MAX_PAGE_OFFSET {
            return Err(ProtocolError::PageOffsetRange(self.page_offset));
        }
        Ok((u64::from(self.region_id) << 48) | self.page_offset)
    }

    pub fn unpack(word: u64) -> Self {
        ChunkAddr { region_id: (word >> 48) as u16, page_offset: word & MAX_PAGE_OFFSET }
    }
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadRequest {
    pub region_id: u16,
    pub page_offset: u64,
    pub dest_addr: u64,
    pub size: u32,
    pub dest_rkey: u32,
}

impl ReadRequest {
    pub fn chunk(&self) -> ChunkAddr {
        ChunkAddr::new(self.region_id, self.page_offset)
    }

    pub fn encode(&self) -> Result<[u8; READ_REQUEST_LEN], ProtocolError> {
        let word = self.chunk().pack()?;
        let mut out = [0u8; READ_REQUEST_LEN];
        out[0..8].copy_from_slice(&word.to_le_bytes());
        out[8..16].copy_from_slice(&self.dest_addr.to_le_bytes());
        out[16..20].copy_from_slice(&self.size.to_le_bytes());
        out[20..24].copy_from_slice(&self.dest_rkey.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        if bytes.len() != READ_REQUEST_LEN {
            return Err(ProtocolError::Length { expected: READ_REQUEST_LEN, actual: bytes.len() });
        }
        let addr = ChunkAddr::unpack(u64_at(bytes, 0));
        Ok(ReadRequest {
            region_id: addr.region_id,
            page_offset: addr.page_offset,
            dest_addr: u64_at(bytes, 8),
            size: u32_at(bytes, 16),
            dest_rkey: u32_at(bytes, 20),
        })
    }

    /// Checks that the request is non-empty and addresses bytes inside a region
    /// of `region_len` bytes split into `chunk_size`-byte chunks.
    pub fn validate(&self, chunk_size: u64, region_len: u64) -> Result<(), ProtocolError> {
        if self.size == 0 {
            return Err(ProtocolError::ZeroSize);
        }
        let start = self.page_offset.checked_mul(chunk_size).ok_or(ProtocolError::PageOffsetRange(self.page_offset))?;
        match start.checked_add(u64::from(self.size)) {
            Some(end) if end <= region_len => Ok(()),
            _ => Err(ProtocolError::PageOffsetRange(self.page_offset)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteRequest {
    pub region_id: u16,
    pub page_offset: u64,
    pub size: u32,
    pub data: Vec<u8>,
}

impl WriteRequest {
    pub fn new(region_id: u16, page_offset: u64, data: Vec<u8>) -> Self {
        WriteRequest { region_id, page_offset, size: data.len() as u32, data }
    }

    pub fn chunk(&self) -> ChunkAddr {
        ChunkAddr::new(self.region_id, self.page_offset)
    }

    pub fn encoded_len(&self) -> usize {
        WRITE_HEADER_LEN + self.data.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        if self.size == 0 {
            return Err(ProtocolError::ZeroSize);
        }
        if self.size as usize != self.data.len() {
            return Err(ProtocolError::SizeMismatch { declared: self.size, actual: self.data.len() });
        }
        let word = self.chunk().pack()?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&word.to_le_bytes());
        out.extend_from_slice(&self.size.to_le_bytes());
        out.extend_from_slice(&self.data);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        if bytes.len() < WRITE_HEADER_LEN {
            return Err(ProtocolError::Length { expected: WRITE_HEADER_LEN, actual: bytes.len() });
        }
        let addr = ChunkAddr::unpack(u64_at(bytes, 0));
        let size = u32_at(bytes, 8);
        let data = &bytes[WRITE_HEADER_LEN..];
        if size == 0 {
            return Err(ProtocolError::ZeroSize);
        }
        if size as usize != data.len() {
            return Err(ProtocolError::SizeMismatch { declared: size, actual: data.len() });
        }
        Ok(WriteRequest { region_id: addr.region_id, page_offset: addr.page_offset, size, data: data.to_vec() })
    }
}

/// Data returned for a read: the request's `dest_addr` followed by the bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadResponse {
    pub dest_addr: u64,
    pub data: Vec<u8>,
}

impl ReadResponse {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(READ_RESPONSE_HEADER_LEN + self.data.len());
        out.extend_from_slice(&self.dest_addr.to_le_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    /// Split a response in place; the data keeps the received allocation.
    pub fn decode(mut bytes: Vec<u8>) -> Result<Self, ProtocolError> {
        if bytes.len() < READ_RESPONSE_HEADER_LEN {
            return Err(ProtocolError::Length { expected: READ_RESPONSE_HEADER_LEN, actual: bytes.len() });
        }
        let dest_addr = u64_at(&bytes, 0);
        bytes.drain(..READ_RESPONSE_HEADER_LEN);
        Ok(ReadResponse { dest_addr, data: bytes })
    }

    /// Start a response buffer with room for `len` data bytes after the header.
    pub fn staging_buffer(dest_addr: u64, len: usize) -> Vec<u8> {
        let mut buf = Vec::with_capacity(READ_RESPONSE_HEADER_LEN + len);
        buf.extend_from_slice(&dest_addr.to_le_bytes());
        buf
    }
}

/// Acknowledges a write-back of one chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteAck {
    pub chunk: ChunkAddr,
}

impl WriteAck {
    pub fn encode(&self) -> Result<[u8; WRITE_ACK_LEN], ProtocolError> {
        Ok(self.chunk.pack()?.to_le_bytes())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        if bytes.len() != WRITE_ACK_LEN {
            return Err(ProtocolError::Length { expected: WRITE_ACK_LEN, actual: bytes.len() });
        }
        Ok(WriteAck { chunk: ChunkAddr::unpack(u64_at(bytes, 0)) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u32)]
pub enum ErrorCode {
    UnknownRegion = 1,
    OutOfBounds = 2,
    Coherence = 3,
    Capacity = 4,
    FileNotFound = 5,
    Budget = 6,
    ShuttingDown = 7,
    Malformed = 8,
    Internal = 9,
}

impl TryFrom<u32> for ErrorCode {
    type Error = ProtocolError;

    fn try_from(v: u32) -> Result<Self, ProtocolError> {
        use ErrorCode::*;
        Ok(match v {
            1 => UnknownRegion,
            2 => OutOfBounds,
            3 => Coherence,
            4 => Capacity,
            5 => FileNotFound,
            6 => Budget,
            7 => ShuttingDown,
            8 => Malformed,
            9 => Internal,
            other => return Err(ProtocolError::UnknownErrorCode(other)),
        })
    }
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ErrorCode::UnknownRegion => "unknown region",
            ErrorCode::OutOfBounds => "out of bounds",
            ErrorCode::Coherence => "single-writer violation",
            ErrorCode::Capacity => "insufficient capacity",
            ErrorCode::FileNotFound => "file not found",
            ErrorCode::Budget => "proxy memory budget exceeded",
            ErrorCode::ShuttingDown => "shutting down",
            ErrorCode::Malformed => "malformed request",
            ErrorCode::Internal => "internal error",
        };
        f.write_str(s)
    }
}

/// Failure of one data-plane request. `correlation` is the read's `dest_addr`
/// or the write's packed chunk word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErrorResponse {
    pub kind: RequestKind,
    pub correlation: u64,
    pub code: ErrorCode,
}

impl ErrorResponse {
    pub fn encode(&self) -> [u8; ERROR_RESPONSE_LEN] {
        let mut out = [0u8; ERROR_RESPONSE_LEN];
        out[0] = self.kind as u32 as u8;
        out[1..9].copy_from_slice(&self.correlation.to_le_bytes());
        out[9..13].copy_from_slice(&(self.code as u32).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        if bytes.len() != ERROR_RESPONSE_LEN {
            return Err(ProtocolError::Length { expected: ERROR_RESPONSE_LEN, actual: bytes.len() });
        }
        Ok(ErrorResponse {
            kind: RequestKind::try_from(u32::from(bytes[0]))?,
            correlation: u64_at(bytes, 1),
            code: ErrorCode::try_from(u32_at(bytes, 9))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_read_is_24_zero_bytes() {
        let r = ReadRequest { region_id: 0, page_offset: 0, dest_addr: 0, size: 0, dest_rkey: 0 };
        assert_eq!(r.encode().unwrap(), [0u8; 24]);
    }

    #[test]
    fn page_offset_range_enforced() {
        let r = ReadRequest { region_id: 1, page_offset: 1 << 48, dest_addr: 0, size: 1, dest_rkey: 0 };
        assert_eq!(r.encode(), Err(ProtocolError::PageOffsetRange(1 << 48)));
        let w = WriteRequest::new(1, 1 << 48, vec![1]);
        assert_eq!(w.encode(), Err(ProtocolError::PageOffsetRange(1 << 48)));
        let ok = ReadRequest { page_offset: MAX_PAGE_OFFSET, ..r };
        assert_eq!(ReadRequest::decode(&ok.encode().unwrap()).unwrap(), ok);
    }

    #[test]
    fn read_decode_wrong_length() {
        assert_eq!(
            ReadRequest::decode(&[0u8; 23]),
            Err(ProtocolError::Length { expected: 24, actual: 23 })
        );
        assert!(ReadRequest::decode(&[0u8; 25]).is_err());
    }

    #[test]
    fn write_size_rules() {
        assert_eq!(WriteRequest::new(1, 0, vec![]).encode(), Err(ProtocolError::ZeroSize));
        let bad = WriteRequest { region_id: 1, page_offset: 0, size: 4, data: b"abc".to_vec() };
        assert_eq!(bad.encode(), Err(ProtocolError::SizeMismatch { declared: 4, actual: 3 }));
        let w = WriteRequest::new(1, 0, b"abc".to_vec());
        let bytes = w.encode().unwrap();
        assert_eq!(bytes.len(), 15);
        assert_eq!(WriteRequest::decode(&bytes).unwrap(), w);
        assert!(WriteRequest::decode(&bytes[..14]).is_err());
    }

    #[test]
    fn read_validation_against_region() {
        let r = ReadRequest { region_id: 1, page_offset: 3, dest_addr: 0, size: 100, dest_rkey: 0 };
        assert!(r.validate(100, 400).is_ok());
        assert!(r.validate(100, 399).is_err());
        assert_eq!(ReadRequest { size: 0, ..r }.validate(100, 400), Err(ProtocolError::ZeroSize));
        assert!(ReadRequest { page_offset: MAX_PAGE_OFFSET, ..r }.validate(u64::MAX, u64::MAX).is_err());
    }

    #[test]
    fn immediates() {
        for k in [RequestKind::Read, RequestKind::Write, RequestKind::Error, RequestKind::Control] {
            assert_eq!(RequestKind::try_from(k.immediate()), Ok(k));
        }
        assert_eq!(RequestKind::try_from(0), Err(ProtocolError::UnknownKind(0)));
        assert_eq!(RequestKind::try_from(99), Err(ProtocolError::UnknownKind(99)));
    }

    #[test]
    fn responses_round_trip() {
        let r = ReadResponse { dest_addr: 0xABCD, data: vec![1, 2, 3] };
        assert_eq!(ReadResponse::decode(r.encode()).unwrap(), r);
        let a = WriteAck { chunk: ChunkAddr::new(9, 77) };
        assert_eq!(WriteAck::decode(&a.encode().unwrap()).unwrap(), a);
        let e = ErrorResponse { kind: RequestKind::Write, correlation: 5, code: ErrorCode::Coherence };
        assert_eq!(ErrorResponse::decode(&e.encode()).unwrap(), e);
        let mut bad = e.encode();
        bad[9] = 200;
        assert!(ErrorResponse::decode(&bad).is_err());
    }
}
