use std::path::PathBuf;

use proptest::prelude::*;
use farmem::protocol::{
    ChunkAddr, ControlMessage, ErrorCode, ErrorResponse, ReadRequest, ReadResponse, RequestKind, WriteAck,
    WriteRequest, MAX_PAGE_OFFSET,
};

fn fixture(name: &str) -> Vec<u8> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Independent packer: writes each field bit by bit into a little-endian byte
/// array, walking the field list of the read request layout.
fn pack_fields(fields: &[(u64, u32)]) -> Vec<u8> {
    let total_bits: u32 = fields.iter().map(|f| f.1).sum();
    let mut out = vec![0u8; (total_bits / 8) as usize];
    let mut cursor = 0u32;
    // Within the first 64-bit word the order is page_offset (low) then region_id (high).
    for &(value, bits) in fields {
        for b in 0..bits {
            if (value >> b) & 1 == 1 {
                let pos = cursor + b;
                out[(pos / 8) as usize] |= 1 << (pos % 8);
            }
        }
        cursor += bits;
    }
    out
}

fn read_oracle(r: &ReadRequest) -> Vec<u8> {
    pack_fields(&[
        (r.page_offset, 48),
        (r.region_id as u64, 16),
        (r.dest_addr, 64),
        (r.size as u64, 32),
        (r.dest_rkey as u64, 32),
    ])
}

#[test]
fn read_request_matches_independent_packer() {
    let r = ReadRequest { region_id: 1, page_offset: 2, dest_addr: 0x10, size: 65536, dest_rkey: 7 };
    let oracle = read_oracle(&r);
    assert_eq!(oracle.len(), 24);
    assert_eq!(
        oracle,
        [2, 0, 0, 0, 0, 0, 1, 0, 0x10, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 7, 0, 0, 0]
    );
    assert_eq!(r.encode().unwrap().to_vec(), oracle);
    assert_eq!(ReadRequest::decode(&oracle).unwrap(), r);
}

#[test]
fn golden_read_requests() {
    let r = ReadRequest { region_id: 1, page_offset: 2, dest_addr: 0x10, size: 65536, dest_rkey: 7 };
    assert_eq!(r.encode().unwrap().to_vec(), fixture("read_request.bin"));
    let max = ReadRequest {
        region_id: 0xFFFF,
        page_offset: MAX_PAGE_OFFSET,
        dest_addr: 0xDEAD_BEEF_CAFE_F00D,
        size: u32::MAX,
        dest_rkey: 0x89AB_CDEF,
    };
    assert_eq!(max.encode().unwrap().to_vec(), fixture("read_request_max.bin"));
    assert_eq!(read_oracle(&max), fixture("read_request_max.bin"));
    assert_eq!(ReadRequest::decode(&fixture("read_request_max.bin")).unwrap(), max);
}

#[test]
fn golden_write_request() {
    let w = WriteRequest::new(3, 5, b"abc".to_vec());
    let bytes = w.encode().unwrap();
    assert_eq!(bytes, fixture("write_request.bin"));
    assert_eq!(bytes.len(), 12 + 3);
    let mut oracle = pack_fields(&[(5, 48), (3, 16), (3, 32)]);
    oracle.extend_from_slice(b"abc");
    assert_eq!(bytes, oracle);
    assert_eq!(WriteRequest::decode(&bytes).unwrap(), w);
}

#[test]
fn golden_responses() {
    let r = ReadResponse { dest_addr: 0x10, data: vec![9, 8, 7, 6] };
    assert_eq!(r.encode(), fixture("read_response.bin"));
    let a = WriteAck { chunk: ChunkAddr::new(3, 5) };
    assert_eq!(a.encode().unwrap().to_vec(), fixture("write_ack.bin"));
    let e = ErrorResponse { kind: RequestKind::Read, correlation: 0x10, code: ErrorCode::UnknownRegion };
    assert_eq!(e.encode().to_vec(), fixture("error_response.bin"));
}

#[test]
fn golden_control_messages() {
    let cases = [
        ("control_setup.bin", ControlMessage::Setup { client: 2 }),
        ("control_setup_ack.bin", ControlMessage::SetupAck),
        (
            "control_alloc.bin",
            ControlMessage::AllocRegion {
                client: 2,
                length: 1 << 20,
                chunk_size: 65536,
                writable: true,
                file: Some("edges.bin".into()),
            },
        ),
        ("control_alloc_ack.bin", ControlMessage::AllocAck { region_id: 4, rkey: 0x1234, length: 1 << 20 }),
        ("control_map.bin", ControlMessage::MapRegion { client: 2, region_id: 4, writable: false }),
        ("control_free.bin", ControlMessage::FreeRegion { region_id: 4 }),
        ("control_free_ack.bin", ControlMessage::FreeAck),
        ("control_static_load.bin", ControlMessage::StaticLoad { region_id: 4, first_chunk: 0, chunk_count: 16 }),
        ("control_static_ack.bin", ControlMessage::StaticAck { rkey: 0x2000, length: 1 << 20 }),
        ("control_cache_policy.bin", ControlMessage::CachePolicy { region_id: 4, dynamic: true }),
        ("control_error.bin", ControlMessage::Error { code: ErrorCode::Coherence }),
    ];
    for (file, msg) in cases {
        let golden = fixture(file);
        assert_eq!(msg.encode(), golden, "{file}");
        assert_eq!(ControlMessage::decode(&golden).unwrap(), msg, "{file}");
    }
}

fn arb_read() -> impl Strategy<Value = ReadRequest> {
    (any::<u16>(), 0..=MAX_PAGE_OFFSET, any::<u64>(), any::<u32>(), any::<u32>()).prop_map(
        |(region_id, page_offset, dest_addr, size, dest_rkey)| ReadRequest {
            region_id,
            page_offset,
            dest_addr,
            size,
            dest_rkey,
        },
    )
}

fn arb_write() -> impl Strategy<Value = WriteRequest> {
    (any::<u16>(), 0..=MAX_PAGE_OFFSET, prop::collection::vec(any::<u8>(), 1..300))
        .prop_map(|(r, p, d)| WriteRequest::new(r, p, d))
}

fn arb_control() -> impl Strategy<Value = ControlMessage> {
    let code = prop_oneof![
        Just(ErrorCode::UnknownRegion),
        Just(ErrorCode::OutOfBounds),
        Just(ErrorCode::Coherence),
        Just(ErrorCode::Capacity),
        Just(ErrorCode::FileNotFound),
        Just(ErrorCode::Budget),
        Just(ErrorCode::ShuttingDown),
        Just(ErrorCode::Malformed),
        Just(ErrorCode::Internal),
    ];
    prop_oneof![
        any::<u32>().prop_map(|client| ControlMessage::Setup { client }),
        Just(ControlMessage::SetupAck),
        (any::<u32>(), any::<u64>(), any::<u32>(), any::<bool>(), proptest::option::of("[a-z0-9_./]{0,40}")).prop_map(
            |(client, length, chunk_size, writable, file)| ControlMessage::AllocRegion {
                client,
                length,
                chunk_size,
                writable,
                file
            }
        ),
        (any::<u16>(), any::<u32>(), any::<u64>())
            .prop_map(|(region_id, rkey, length)| ControlMessage::AllocAck { region_id, rkey, length }),
        (any::<u32>(), any::<u16>(), any::<bool>())
            .prop_map(|(client, region_id, writable)| ControlMessage::MapRegion { client, region_id, writable }),
        any::<u16>().prop_map(|region_id| ControlMessage::FreeRegion { region_id }),
        Just(ControlMessage::FreeAck),
        (any::<u16>(), any::<u64>(), any::<u64>()).prop_map(|(region_id, first_chunk, chunk_count)| {
            ControlMessage::StaticLoad { region_id, first_chunk, chunk_count }
        }),
        (any::<u32>(), any::<u64>()).prop_map(|(rkey, length)| ControlMessage::StaticAck { rkey, length }),
        (any::<u16>(), any::<bool>()).prop_map(|(region_id, dynamic)| ControlMessage::CachePolicy { region_id, dynamic }),
        code.prop_map(|code| ControlMessage::Error { code }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn read_round_trip(r in arb_read()) {
        let bytes = r.encode().unwrap();
        prop_assert_eq!(bytes.len(), 24);
        prop_assert_eq!(bytes.to_vec(), read_oracle(&r));
        prop_assert_eq!(ReadRequest::decode(&bytes).unwrap(), r);
    }

    #[test]
    fn write_round_trip(w in arb_write()) {
        let bytes = w.encode().unwrap();
        prop_assert_eq!(bytes.len(), 12 + w.data.len());
        prop_assert_eq!(WriteRequest::decode(&bytes).unwrap(), w);
    }

    #[test]
    fn control_round_trip(m in arb_control()) {
        prop_assert_eq!(ControlMessage::decode(&m.encode()).unwrap(), m);
    }

    #[test]
    fn out_of_range_page_offset_never_truncated(off in (MAX_PAGE_OFFSET + 1)..=u64::MAX, rid in any::<u16>()) {
        let r = ReadRequest { region_id: rid, page_offset: off, dest_addr: 0, size: 1, dest_rkey: 0 };
        prop_assert!(r.encode().is_err());
        prop_assert!(WriteRequest::new(rid, off, vec![1]).encode().is_err());
    }
}
