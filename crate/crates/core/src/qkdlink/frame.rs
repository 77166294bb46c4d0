//! QIX-like serial frame.
//!
//! ```text
//! +-------+---------+--------+----------+--------+-------+
//! | magic | version | key_id | key      | status | crc32 |
//! | 3     | 1       | 4 (BE) | 32       | 1      | 4 (BE)|
//! +-------+---------+--------+----------+--------+-------+
//! ```
//!
//! Magic is `QIX`, version `0x01`, status `0x00` secure / `0x01`
//! compromised. The CRC (IEEE) covers version through status.

use thiserror::Error;

use crate::keycore::{Block, KEY_BYTES};

pub const QIX_MAGIC: [u8; 3] = [0x51, 0x49, 0x58];
pub const QIX_VERSION: u8 = 0x01;
pub const QIX_FRAME_LEN: usize = 3 + 1 + 4 + KEY_BYTES + 1 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QixStatus {
    Secure,
    Compromised,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QixFrame {
    pub key_id: u32,
    pub key: Block,
    pub status: QixStatus,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame does not start with QIX magic")]
    BadMagic,
    #[error("unsupported frame version {0:#04x}")]
    BadVersion(u8),
    #[error("unknown status byte {0:#04x}")]
    BadStatus(u8),
    #[error("crc mismatch")]
    BadCrc,
    #[error("need {0} more bytes")]
    Truncated(usize),
}

pub fn encode_qix_frame(frame: &QixFrame) -> [u8; QIX_FRAME_LEN] {
    let mut out = [0u8; QIX_FRAME_LEN];
    out[..3].copy_from_slice(&QIX_MAGIC);
    out[3] = QIX_VERSION;
    out[4..8].copy_from_slice(&frame.key_id.to_be_bytes());
    out[8..40].copy_from_slice(&frame.key);
    out[40] = match frame.status {
        QixStatus::Secure => 0x00,
        QixStatus::Compromised => 0x01,
    };
    let crc = crc32fast::hash(&out[3..41]);
    out[41..].copy_from_slice(&crc.to_be_bytes());
    out
}

/// Decodes one frame at the start of `bytes`, returning it with the number
/// of bytes consumed.
pub fn parse_qix_frame(bytes: &[u8]) -> Result<(QixFrame, usize), FrameError> {
    let magic_seen = bytes.len().min(3);
    if bytes[..magic_seen] != QIX_MAGIC[..magic_seen] {
        return Err(FrameError::BadMagic);
    }
    if bytes.len() < QIX_FRAME_LEN {
        return Err(FrameError::Truncated(QIX_FRAME_LEN - bytes.len()));
    }
    let crc = u32::from_be_bytes(bytes[41..45].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[3..41]) != crc {
        return Err(FrameError::BadCrc);
    }
    if bytes[3] != QIX_VERSION {
        return Err(FrameError::BadVersion(bytes[3]));
    }
    let status = match bytes[40] {
        0x00 => QixStatus::Secure,
        0x01 => QixStatus::Compromised,
        other => return Err(FrameError::BadStatus(other)),
    };
    let frame = QixFrame {
        key_id: u32::from_be_bytes(bytes[4..8].try_into().expect("4 bytes")),
        key: bytes[8..40].try_into().expect("32 bytes"),
        status,
    };
    Ok((frame, QIX_FRAME_LEN))
}

/// Offset of the next possible frame start after a bad frame at position 0.
pub(crate) fn resync_offset(bytes: &[u8]) -> usize {
    (1..bytes.len())
        .find(|&i| {
            let tail = &bytes[i..];
            let n = tail.len().min(3);
            tail[..n] == QIX_MAGIC[..n]
        })
        .unwrap_or(bytes.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_is_bit_exact() {
        let frame = QixFrame { key_id: 0x01020304, key: [0xab; 32], status: QixStatus::Compromised };
        let bytes = encode_qix_frame(&frame);
        assert_eq!(bytes.len(), 45);
        assert_eq!(&bytes[..4], &[0x51, 0x49, 0x58, 0x01]);
        assert_eq!(&bytes[4..8], &[1, 2, 3, 4]);
        assert_eq!(bytes[40], 0x01);
        let crc = crc32fast::hash(&bytes[3..41]);
        assert_eq!(&bytes[41..], &crc.to_be_bytes());
    }

    #[test]
    fn secure_frame_parses() {
        let frame = QixFrame { key_id: 9, key: [1; 32], status: QixStatus::Secure };
        let (got, used) = parse_qix_frame(&encode_qix_frame(&frame)).unwrap();
        assert_eq!(got, frame);
        assert_eq!(used, QIX_FRAME_LEN);
    }

    #[test]
    fn roundtrip_random_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let mut key = [0u8; 32];
            rng.fill(&mut key);
            let status = if rng.random_bool(0.5) { QixStatus::Secure } else { QixStatus::Compromised };
            let frame = QixFrame { key_id: rng.random(), key, status };
            assert_eq!(parse_qix_frame(&encode_qix_frame(&frame)).unwrap().0, frame);
        }
    }

    #[test]
    fn flipped_crc_detected_and_next_frame_recovers() {
        let a = encode_qix_frame(&QixFrame { key_id: 1, key: [3; 32], status: QixStatus::Secure });
        let b = encode_qix_frame(&QixFrame { key_id: 2, key: [4; 32], status: QixStatus::Secure });
        let mut stream = a.to_vec();
        stream[43] ^= 0x10;
        stream.extend_from_slice(&b);
        assert_eq!(parse_qix_frame(&stream), Err(FrameError::BadCrc));
        let skip = resync_offset(&stream);
        assert_eq!(skip, QIX_FRAME_LEN);
        assert_eq!(parse_qix_frame(&stream[skip..]).unwrap().0.key_id, 2);
    }

    #[test]
    fn garbage_and_short_input() {
        assert_eq!(parse_qix_frame(b"xyz"), Err(FrameError::BadMagic));
        assert_eq!(parse_qix_frame(b"QI"), Err(FrameError::Truncated(43)));
        assert_eq!(parse_qix_frame(b"QIX\x01"), Err(FrameError::Truncated(41)));
        assert_eq!(resync_offset(b"..QIX"), 2);
        assert_eq!(resync_offset(b"....Q"), 4);
        assert_eq!(resync_offset(b"...."), 4);
    }
}
