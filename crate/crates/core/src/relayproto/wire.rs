//! Authenticated framing for the classical channel.
//!
//! ```text
//! +-----------+---------+----------+----------+---------+----------+
//! | total len | version | msg_type | sequence | payload | auth tag |
//! | 4 (BE)    | 1       | 1        | 8 (BE)   | ...     | 32       |
//! +-----------+---------+----------+----------+---------+----------+
//! ```
//!
//! `total len` counts the whole frame including itself. The tag is
//! SHA-256(psk || header || payload) where header is the first 14 bytes.
//! Byte fields inside payloads carry a 2-byte length prefix, lists a
//! 4-byte count.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::keycore::{Block, KEY_BYTES};

pub const WIRE_VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 4 + 1 + 1 + 8;
pub const TAG_LEN: usize = 32;
pub const MIN_FRAME_LEN: usize = HEADER_LEN + TAG_LEN;
pub const MAX_FRAME_LEN: usize = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("frame length {declared} does not match {actual} available bytes")]
    BadLength { declared: usize, actual: usize },
    #[error("unsupported protocol version {0:#04x}")]
    BadVersion(u8),
    #[error("unknown message type {0:#04x}")]
    BadType(u8),
    #[error("authentication tag mismatch")]
    BadAuthTag,
    #[error("sequence {seq} not above last accepted {last}")]
    StaleSequence { seq: u64, last: u64 },
    #[error("malformed payload: {0}")]
    BadPayload(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// Between chain neighbours; carries the relay traffic.
    Relay,
    /// From a node to the network manager; carries stats reports.
    Report,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    DigestMismatch = 1,
    KeyAlreadyUsed = 2,
    UnknownKeyId = 3,
    KeyExhausted = 4,
    Timeout = 5,
    KeyCompromised = 6,
}

impl ErrorCode {
    fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => ErrorCode::DigestMismatch,
            2 => ErrorCode::KeyAlreadyUsed,
            3 => ErrorCode::UnknownKeyId,
            4 => ErrorCode::KeyExhausted,
            5 => ErrorCode::Timeout,
            6 => ErrorCode::KeyCompromised,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub link_index: u8,
    pub available_qk: u64,
    pub used_qk: u64,
    pub compromised_qk: u64,
    pub skr_bps: Option<f64>,
    pub qber_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub node_id: u32,
    pub timestamp_ns: u64,
    pub available_nk: u64,
    pub used_nk: u64,
    pub links: Vec<LinkReport>,
}

impl StatsReport {
    pub fn link(&self, index: u8) -> Option<&LinkReport> {
        self.links.iter().find(|l| l.link_index == index)
    }
}

/// One network key on one hop: only the digest and the ciphertext travel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyHop {
    pub batch_id: u64,
    pub index: u32,
    pub nk_id: u64,
    pub nk_digest: Block,
    pub ciphertext: Block,
    pub qk_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Hello { node_id: u32, channel: ChannelKind },
    StatsReport(StatsReport),
    TransferInit { batch_id: u64, h: u32 },
    KeyHop(KeyHop),
    /// NM to the chain: which network keys of a batch never arrived.
    TransferAck { batch_id: u64, missing_nk_ids: Vec<u64> },
    /// EN to NM: how many keys of a batch arrived, and which indices did not.
    TransferComplete { batch_id: u64, received: u32, missing: Vec<u32> },
    Error { batch_id: u64, index: u32, nk_id: u64, code: ErrorCode },
}

impl Payload {
    pub fn msg_type(&self) -> u8 {
        match self {
            Payload::Hello { .. } => 1,
            Payload::StatsReport(_) => 2,
            Payload::TransferInit { .. } => 3,
            Payload::KeyHop(_) => 4,
            Payload::TransferAck { .. } => 5,
            Payload::TransferComplete { .. } => 6,
            Payload::Error { .. } => 7,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Payload::Hello { .. } => "hello",
            Payload::StatsReport(_) => "stats_report",
            Payload::TransferInit { .. } => "transfer_init",
            Payload::KeyHop(_) => "key_hop",
            Payload::TransferAck { .. } => "transfer_ack",
            Payload::TransferComplete { .. } => "transfer_complete",
            Payload::Error { .. } => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub sequence: u64,
    pub payload: Payload,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u16).to_be_bytes());
    out.extend_from_slice(b);
}

fn put_opt_f64(out: &mut Vec<u8>, v: Option<f64>) {
    match v {
        Some(f) => {
            out.push(1);
            out.extend_from_slice(&f.to_bits().to_be_bytes());
        }
        None => out.push(0),
    }
}

fn encode_payload(p: &Payload) -> Vec<u8> {
    let mut out = Vec::new();
    match p {
        Payload::Hello { node_id, channel } => {
            out.extend_from_slice(&node_id.to_be_bytes());
            out.push(match channel {
                ChannelKind::Relay => 0,
                ChannelKind::Report => 1,
            });
        }
        Payload::StatsReport(r) => {
            out.extend_from_slice(&r.node_id.to_be_bytes());
            out.extend_from_slice(&r.timestamp_ns.to_be_bytes());
            out.extend_from_slice(&r.available_nk.to_be_bytes());
            out.extend_from_slice(&r.used_nk.to_be_bytes());
            out.extend_from_slice(&(r.links.len() as u32).to_be_bytes());
            for l in &r.links {
                out.push(l.link_index);
                out.extend_from_slice(&l.available_qk.to_be_bytes());
                out.extend_from_slice(&l.used_qk.to_be_bytes());
                out.extend_from_slice(&l.compromised_qk.to_be_bytes());
                put_opt_f64(&mut out, l.skr_bps);
                put_opt_f64(&mut out, l.qber_pct);
            }
        }
        Payload::TransferInit { batch_id, h } => {
            out.extend_from_slice(&batch_id.to_be_bytes());
            out.extend_from_slice(&h.to_be_bytes());
        }
        Payload::KeyHop(k) => {
            out.extend_from_slice(&k.batch_id.to_be_bytes());
            out.extend_from_slice(&k.index.to_be_bytes());
            out.extend_from_slice(&k.nk_id.to_be_bytes());
            put_bytes(&mut out, &k.nk_digest);
            put_bytes(&mut out, &k.ciphertext);
            out.extend_from_slice(&k.qk_id.to_be_bytes());
        }
        Payload::TransferAck { batch_id, missing_nk_ids } => {
            out.extend_from_slice(&batch_id.to_be_bytes());
            out.extend_from_slice(&(missing_nk_ids.len() as u32).to_be_bytes());
            for id in missing_nk_ids {
                out.extend_from_slice(&id.to_be_bytes());
            }
        }
        Payload::TransferComplete { batch_id, received, missing } => {
            out.extend_from_slice(&batch_id.to_be_bytes());
            out.extend_from_slice(&received.to_be_bytes());
            out.extend_from_slice(&(missing.len() as u32).to_be_bytes());
            for i in missing {
                out.extend_from_slice(&i.to_be_bytes());
            }
        }
        Payload::Error { batch_id, index, nk_id, code } => {
            out.extend_from_slice(&batch_id.to_be_bytes());
            out.extend_from_slice(&index.to_be_bytes());
            out.extend_from_slice(&nk_id.to_be_bytes());
            out.push(*code as u8);
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::BadPayload(format!("need {n} bytes, {} left", self.buf.len())));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn opt_f64(&mut self) -> Result<Option<f64>, WireError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(f64::from_bits(self.u64()?))),
            b => Err(WireError::BadPayload(format!("bad option flag {b}"))),
        }
    }

    fn block(&mut self) -> Result<Block, WireError> {
        let n = u16::from_be_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        if n != KEY_BYTES {
            return Err(WireError::BadPayload(format!("expected {KEY_BYTES}-byte field, got {n}")));
        }
        Ok(self.take(n)?.try_into().expect("32 bytes"))
    }

    /// List count, bounded by what the remaining bytes could hold.
    fn count(&mut self, item_len: usize) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(item_len) > self.buf.len() {
            return Err(WireError::BadPayload(format!("list of {n} items exceeds payload")));
        }
        Ok(n)
    }
}

fn decode_payload(msg_type: u8, bytes: &[u8]) -> Result<Payload, WireError> {
    let mut c = Cursor { buf: bytes };
    let p = match msg_type {
        1 => {
            let node_id = c.u32()?;
            let channel = match c.u8()? {
                0 => ChannelKind::Relay,
                1 => ChannelKind::Report,
                b => return Err(WireError::BadPayload(format!("bad channel kind {b}"))),
            };
            Payload::Hello { node_id, channel }
        }
        2 => {
            let node_id = c.u32()?;
            let timestamp_ns = c.u64()?;
            let available_nk = c.u64()?;
            let used_nk = c.u64()?;
            let n = c.count(1 + 24 + 2)?;
            let mut links = Vec::with_capacity(n);
            for _ in 0..n {
                links.push(LinkReport {
                    link_index: c.u8()?,
                    available_qk: c.u64()?,
                    used_qk: c.u64()?,
                    compromised_qk: c.u64()?,
                    skr_bps: c.opt_f64()?,
                    qber_pct: c.opt_f64()?,
                });
            }
            Payload::StatsReport(StatsReport { node_id, timestamp_ns, available_nk, used_nk, links })
        }
        3 => Payload::TransferInit { batch_id: c.u64()?, h: c.u32()? },
        4 => Payload::KeyHop(KeyHop {
            batch_id: c.u64()?,
            index: c.u32()?,
            nk_id: c.u64()?,
            nk_digest: c.block()?,
            ciphertext: c.block()?,
            qk_id: c.u64()?,
        }),
        5 => {
            let batch_id = c.u64()?;
            let n = c.count(8)?;
            let missing_nk_ids = (0..n).map(|_| c.u64()).collect::<Result<_, _>>()?;
            Payload::TransferAck { batch_id, missing_nk_ids }
        }
        6 => {
            let batch_id = c.u64()?;
            let received = c.u32()?;
            let n = c.count(4)?;
            let missing = (0..n).map(|_| c.u32()).collect::<Result<_, _>>()?;
            Payload::TransferComplete { batch_id, received, missing }
        }
        7 => {
            let batch_id = c.u64()?;
            let index = c.u32()?;
            let nk_id = c.u64()?;
            let b = c.u8()?;
            let code = ErrorCode::from_u8(b).ok_or_else(|| WireError::BadPayload(format!("bad error code {b}")))?;
            Payload::Error { batch_id, index, nk_id, code }
        }
        other => return Err(WireError::BadType(other)),
    };
    if !c.buf.is_empty() {
        return Err(WireError::BadPayload(format!("{} trailing bytes", c.buf.len())));
    }
    Ok(p)
}

fn auth_tag(psk: &Block, header_and_payload: &[u8]) -> Block {
    let mut h = Sha256::new();
    h.update(psk);
    h.update(header_and_payload);
    h.finalize().into()
}

fn tags_equal(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

pub fn encode_wire(msg: &WireMessage, psk: &Block) -> Vec<u8> {
    let payload = encode_payload(&msg.payload);
    let total = HEADER_LEN + payload.len() + TAG_LEN;
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&(total as u32).to_be_bytes());
    out.push(WIRE_VERSION);
    out.push(msg.payload.msg_type());
    out.extend_from_slice(&msg.sequence.to_be_bytes());
    out.extend_from_slice(&payload);
    let tag = auth_tag(psk, &out);
    out.extend_from_slice(&tag);
    out
}

/// Total frame length announced by a 4-byte prefix, if plausible.
pub fn frame_len(prefix: [u8; 4]) -> Result<usize, WireError> {
    let n = u32::from_be_bytes(prefix) as usize;
    if (MIN_FRAME_LEN..=MAX_FRAME_LEN).contains(&n) {
        Ok(n)
    } else {
        Err(WireError::BadLength { declared: n, actual: 0 })
    }
}

/// Verifies length, version and tag, then parses the payload. Sequence
/// freshness is the [`Channel`]'s job.
pub fn decode_wire(bytes: &[u8], psk: &Block) -> Result<WireMessage, WireError> {
    if bytes.len() < MIN_FRAME_LEN {
        let declared = bytes.get(..4).map_or(0, |b| u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize);
        return Err(WireError::BadLength { declared, actual: bytes.len() });
    }
    let declared = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if declared != bytes.len() {
        return Err(WireError::BadLength { declared, actual: bytes.len() });
    }
    let (body, tag) = bytes.split_at(bytes.len() - TAG_LEN);
    if !tags_equal(&auth_tag(psk, body), tag) {
        return Err(WireError::BadAuthTag);
    }
    if body[4] != WIRE_VERSION {
        return Err(WireError::BadVersion(body[4]));
    }
    let sequence = u64::from_be_bytes(body[6..14].try_into().expect("8 bytes"));
    let payload = decode_payload(body[5], &body[HEADER_LEN..])?;
    Ok(WireMessage { sequence, payload })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub sent: u64,
    pub accepted: u64,
    pub bad_auth: u64,
    pub stale: u64,
    pub malformed: u64,
}

/// Sequence state of one directed conversation with a peer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelState {
    pub next_send: u64,
    pub last_recv: u64,
    pub stats: ChannelStats,
}

/// One authenticated conversation with a peer. Sequences start at 1.
#[derive(Debug, Clone)]
pub struct Channel {
    psk: Block,
    state: ChannelState,
}

impl Channel {
    pub fn new(psk: Block) -> Self {
        Self::resume(psk, ChannelState { next_send: 1, ..ChannelState::default() })
    }

    pub fn resume(psk: Block, state: ChannelState) -> Self {
        Self { psk, state }
    }

    pub fn psk(&self) -> &Block {
        &self.psk
    }

    pub fn state(&self) -> &ChannelState {
        &self.state
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.state.stats
    }

    pub fn seal(&mut self, payload: Payload) -> Vec<u8> {
        let msg = WireMessage { sequence: self.state.next_send, payload };
        self.state.next_send += 1;
        self.state.stats.sent += 1;
        encode_wire(&msg, &self.psk)
    }

    /// Decodes and enforces strictly increasing sequence numbers. Every
    /// rejection is counted.
    pub fn open(&mut self, bytes: &[u8]) -> Result<WireMessage, WireError> {
        let result = decode_wire(bytes, &self.psk).and_then(|m| {
            if m.sequence <= self.state.last_recv {
                Err(WireError::StaleSequence { seq: m.sequence, last: self.state.last_recv })
            } else {
                Ok(m)
            }
        });
        let stats = &mut self.state.stats;
        match &result {
            Ok(m) => {
                self.state.last_recv = m.sequence;
                stats.accepted += 1;
            }
            Err(WireError::BadAuthTag) => stats.bad_auth += 1,
            Err(WireError::StaleSequence { .. }) => stats.stale += 1,
            Err(_) => stats.malformed += 1,
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PSK: Block = [7u8; 32];

    fn hop() -> Payload {
        Payload::KeyHop(KeyHop { batch_id: 3, index: 1, nk_id: 99, nk_digest: [1; 32], ciphertext: [2; 32], qk_id: 17 })
    }

    #[test]
    fn header_layout() {
        let bytes = encode_wire(&WireMessage { sequence: 0x0102, payload: Payload::TransferInit { batch_id: 5, h: 40 } }, &PSK);
        assert_eq!(bytes.len(), 14 + 12 + 32);
        assert_eq!(&bytes[..4], &(58u32).to_be_bytes());
        assert_eq!(bytes[4], 0x01);
        assert_eq!(bytes[5], 3);
        assert_eq!(&bytes[6..14], &[0, 0, 0, 0, 0, 0, 1, 2]);
        assert_eq!(&bytes[14..22], &5u64.to_be_bytes());
        assert_eq!(&bytes[22..26], &40u32.to_be_bytes());
        let mut h = Sha256::new();
        h.update(PSK);
        h.update(&bytes[..26]);
        assert_eq!(&bytes[26..], h.finalize().as_slice());
    }

    #[test]
    fn byte_fields_are_length_prefixed() {
        let bytes = encode_wire(&WireMessage { sequence: 1, payload: hop() }, &PSK);
        // batch 8 + index 4 + nk_id 8, then the digest's prefix
        assert_eq!(&bytes[34..36], &[0, 32]);
        assert_eq!(&bytes[36..68], &[1; 32]);
        assert_eq!(&bytes[68..70], &[0, 32]);
    }

    #[test]
    fn flipped_bit_rejected_as_bad_tag() {
        let bytes = encode_wire(&WireMessage { sequence: 1, payload: hop() }, &PSK);
        for i in 4..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x01;
            assert_eq!(decode_wire(&b, &PSK), Err(WireError::BadAuthTag), "byte {i}");
        }
        assert_eq!(decode_wire(&bytes, &[8u8; 32]), Err(WireError::BadAuthTag));
    }

    #[test]
    fn length_checks() {
        let bytes = encode_wire(&WireMessage { sequence: 1, payload: hop() }, &PSK);
        assert!(matches!(decode_wire(&bytes[..bytes.len() - 1], &PSK), Err(WireError::BadLength { .. })));
        assert!(matches!(decode_wire(&bytes[..10], &PSK), Err(WireError::BadLength { .. })));
        assert!(frame_len([0, 0, 0, 3]).is_err());
        assert_eq!(frame_len([0, 0, 0, 46]), Ok(46));
    }

    #[test]
    fn replay_is_stale() {
        let mut tx = Channel::new(PSK);
        let mut rx = Channel::new(PSK);
        let first = tx.seal(hop());
        let second = tx.seal(hop());
        assert_eq!(rx.open(&first).unwrap().sequence, 1);
        assert_eq!(rx.open(&second).unwrap().sequence, 2);
        assert_eq!(rx.open(&first), Err(WireError::StaleSequence { seq: 1, last: 2 }));
        assert_eq!(rx.stats().stale, 1);
        assert_eq!(rx.stats().accepted, 2);
    }

    #[test]
    fn authenticated_unknown_type_is_bad_type() {
        let mut raw = encode_wire(&WireMessage { sequence: 1, payload: Payload::TransferInit { batch_id: 1, h: 1 } }, &PSK);
        raw[5] = 0x42;
        let body_len = raw.len() - TAG_LEN;
        let tag = auth_tag(&PSK, &raw[..body_len]);
        raw[body_len..].copy_from_slice(&tag);
        assert_eq!(decode_wire(&raw, &PSK), Err(WireError::BadType(0x42)));
    }
}
