//! Delivery media and the watcher that turns their changes into key records.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::UNIX_EPOCH;

use serde::{Deserialize, Serialize};

use super::frame::{parse_qix_frame, resync_offset, FrameError, QixFrame, QixStatus};
use super::profile::DeliveryMode;
use crate::keycore::{sha256, Block, KeyRecord, KeyTable, KEY_BYTES};

/// Link-quality figures a vendor system exposes next to its key output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkStatus {
    pub skr_bps: Option<f64>,
    pub qber_pct: Option<f64>,
}

/// Where a QKD system leaves its keys: a serial byte log or a key file.
pub trait FeedMedium: Send {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()>;
    /// Atomically replaces the whole content.
    fn replace(&mut self, bytes: &[u8]) -> io::Result<()>;
    /// Current length and modification stamp.
    fn stat(&self) -> io::Result<(u64, u64)>;
    fn read_from(&self, offset: u64) -> io::Result<Vec<u8>>;
    fn set_status(&mut self, status: LinkStatus) -> io::Result<()>;
    fn status(&self) -> io::Result<Option<LinkStatus>>;
}

#[derive(Debug, Default)]
struct MemoryState {
    bytes: Vec<u8>,
    generation: u64,
    status: Option<LinkStatus>,
}

/// In-process medium; clones share the same content.
#[derive(Debug, Clone, Default)]
pub struct MemoryMedium {
    inner: Arc<Mutex<MemoryState>>,
}

impl MemoryMedium {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, MemoryState> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn snapshot(&self) -> Vec<u8> {
        self.lock().bytes.clone()
    }

    /// XORs `mask` into the byte at `offset`, simulating line noise.
    pub fn corrupt(&self, offset: usize, mask: u8) {
        let mut s = self.lock();
        if let Some(b) = s.bytes.get_mut(offset) {
            *b ^= mask;
            s.generation += 1;
        }
    }
}

impl FeedMedium for MemoryMedium {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        let mut s = self.lock();
        s.bytes.extend_from_slice(bytes);
        s.generation += 1;
        Ok(())
    }

    fn replace(&mut self, bytes: &[u8]) -> io::Result<()> {
        let mut s = self.lock();
        s.bytes = bytes.to_vec();
        s.generation += 1;
        Ok(())
    }

    fn stat(&self) -> io::Result<(u64, u64)> {
        let s = self.lock();
        Ok((s.bytes.len() as u64, s.generation))
    }

    fn read_from(&self, offset: u64) -> io::Result<Vec<u8>> {
        let s = self.lock();
        Ok(s.bytes.get(offset as usize..).unwrap_or_default().to_vec())
    }

    fn set_status(&mut self, status: LinkStatus) -> io::Result<()> {
        self.lock().status = Some(status);
        Ok(())
    }

    fn status(&self) -> io::Result<Option<LinkStatus>> {
        Ok(self.lock().status)
    }
}

/// Key file on disk. Link status lives in a `<file>.status.json` sidecar.
#[derive(Debug, Clone)]
pub struct FileMedium {
    path: PathBuf,
}

impl FileMedium {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn sidecar(&self) -> PathBuf {
        let mut p = self.path.clone().into_os_string();
        p.push(".status.json");
        p.into()
    }

    fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
        let mut tmp = path.to_path_buf().into_os_string();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)
    }
}

impl FeedMedium for FileMedium {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(bytes)?;
        f.flush()
    }

    fn replace(&mut self, bytes: &[u8]) -> io::Result<()> {
        Self::write_atomic(&self.path, bytes)
    }

    fn stat(&self) -> io::Result<(u64, u64)> {
        match fs::metadata(&self.path) {
            Ok(m) => {
                let stamp = m
                    .modified()
                    .ok()
                    .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
                    .map(|d| d.as_nanos() as u64)
                    .unwrap_or(0);
                Ok((m.len(), stamp))
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok((0, 0)),
            Err(e) => Err(e),
        }
    }

    fn read_from(&self, offset: u64) -> io::Result<Vec<u8>> {
        match fs::read(&self.path) {
            Ok(bytes) => Ok(bytes.get(offset as usize..).unwrap_or_default().to_vec()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e),
        }
    }

    fn set_status(&mut self, status: LinkStatus) -> io::Result<()> {
        let json = serde_json::to_vec(&status).map_err(io::Error::other)?;
        Self::write_atomic(&self.sidecar(), &json)
    }

    fn status(&self) -> io::Result<Option<LinkStatus>> {
        match fs::read(self.sidecar()) {
            Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(io::Error::other),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// What the watcher knew about a medium after its last poll.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedState {
    pub mode: DeliveryMode,
    /// Bytes consumed (files: prefix covered by `prefix_digest`; stream: read offset).
    pub consumed: u64,
    /// Length and stamp seen on the last poll, for the cheap no-change check.
    pub seen_len: u64,
    pub stamp: u64,
    pub prefix_digest: Block,
}

impl FeedState {
    pub fn new(mode: DeliveryMode) -> Self {
        Self { mode, consumed: 0, seen_len: 0, stamp: 0, prefix_digest: sha256(&[]), }
    }
}

/// One look at a medium. For files `bytes` is the whole content; for the
/// packet stream it holds the bytes after the previous read offset.
#[derive(Debug, Clone)]
pub struct Observation {
    pub len: u64,
    pub stamp: u64,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UpdateKind {
    NoChange,
    Appended(Vec<u8>),
    Rewritten(Vec<u8>),
    Packets(Vec<QixFrame>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Detection {
    pub kind: UpdateKind,
    pub next: FeedState,
    pub bad_frames: u64,
    pub skipped_bytes: u64,
}

/// Classifies a change between the previous state and a new observation.
pub fn detect_update(prev: &FeedState, obs: &Observation) -> Detection {
    let mut next = prev.clone();
    next.seen_len = obs.len;
    next.stamp = obs.stamp;
    if prev.mode == DeliveryMode::PacketStream {
        return detect_packets(prev, obs, next);
    }
    let content = &obs.bytes;
    let kind = if (content.len() as u64) < prev.consumed
        || sha256(&content[..prev.consumed as usize]) != prev.prefix_digest
    {
        UpdateKind::Rewritten(content.clone())
    } else if content.len() as u64 == prev.consumed {
        UpdateKind::NoChange
    } else {
        UpdateKind::Appended(content[prev.consumed as usize..].to_vec())
    };
    if kind != UpdateKind::NoChange {
        next.consumed = content.len() as u64;
        next.prefix_digest = sha256(content);
    }
    Detection { kind, next, bad_frames: 0, skipped_bytes: 0 }
}

fn detect_packets(prev: &FeedState, obs: &Observation, mut next: FeedState) -> Detection {
    let bytes = &obs.bytes;
    let mut frames = Vec::new();
    let (mut pos, mut bad_frames, mut skipped) = (0usize, 0u64, 0u64);
    while pos < bytes.len() {
        match parse_qix_frame(&bytes[pos..]) {
            Ok((frame, used)) => {
                frames.push(frame);
                pos += used;
            }
            Err(FrameError::Truncated(_)) => break,
            Err(_) => {
                bad_frames += 1;
                let skip = resync_offset(&bytes[pos..]);
                skipped += skip as u64;
                pos += skip;
            }
        }
    }
    next.consumed = prev.consumed + pos as u64;
    let kind = if frames.is_empty() { UpdateKind::NoChange } else { UpdateKind::Packets(frames) };
    Detection { kind, next, bad_frames, skipped_bytes: skipped }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedCounters {
    pub polls: u64,
    pub keys_ingested: u64,
    pub compromised: u64,
    pub bad_lines: u64,
    pub bad_frames: u64,
    pub skipped_bytes: u64,
    pub rewrites: u64,
}

/// Watches one end's medium and feeds new keys into that end's table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedReader {
    state: FeedState,
    /// Incomplete trailing line of a key file.
    carry: Vec<u8>,
    /// Complete lines consumed from the current file.
    watermark: u64,
    counters: FeedCounters,
}

impl FeedReader {
    pub fn new(mode: DeliveryMode) -> Self {
        Self { state: FeedState::new(mode), carry: Vec::new(), watermark: 0, counters: FeedCounters::default() }
    }

    pub fn state(&self) -> &FeedState {
        &self.state
    }

    pub fn counters(&self) -> &FeedCounters {
        &self.counters
    }

    pub fn watermark(&self) -> u64 {
        self.watermark
    }

    fn observe(&self, medium: &dyn FeedMedium) -> io::Result<Option<Observation>> {
        let (len, stamp) = medium.stat()?;
        if self.state.mode == DeliveryMode::PacketStream {
            if len <= self.state.consumed {
                return Ok(None);
            }
            let bytes = medium.read_from(self.state.consumed)?;
            return Ok(Some(Observation { len, stamp, bytes }));
        }
        if len == self.state.seen_len && stamp == self.state.stamp {
            return Ok(None);
        }
        let bytes = medium.read_from(0)?;
        Ok(Some(Observation { len: bytes.len() as u64, stamp, bytes }))
    }

    /// Checks the medium and ingests whatever is new. Corrupt input only
    /// bumps counters.
    pub fn poll(&mut self, medium: &dyn FeedMedium, table: &mut KeyTable) -> io::Result<Vec<KeyRecord>> {
        self.counters.polls += 1;
        let Some(obs) = self.observe(medium)? else {
            return Ok(Vec::new());
        };
        let det = detect_update(&self.state, &obs);
        self.state = det.next;
        self.counters.bad_frames += det.bad_frames;
        self.counters.skipped_bytes += det.skipped_bytes;
        let mut out = Vec::new();
        match det.kind {
            UpdateKind::NoChange => {}
            UpdateKind::Packets(frames) => {
                for frame in frames {
                    let recs = table.ingest_key(&frame.key);
                    if frame.status == QixStatus::Compromised {
                        for r in &recs {
                            table.mark_compromised(r.id()).expect("record just ingested");
                            self.counters.compromised += 1;
                        }
                    }
                    out.extend(recs.into_iter().map(|r| table.get(r.id()).expect("present").clone()));
                }
            }
            UpdateKind::Appended(bytes) => {
                let mut buf = std::mem::take(&mut self.carry);
                buf.extend_from_slice(&bytes);
                let keys = self.split_lines(&buf);
                self.watermark += keys.len() as u64;
                for key in keys.into_iter().flatten() {
                    out.extend(table.ingest_key(&key));
                }
            }
            UpdateKind::Rewritten(content) => {
                self.counters.rewrites += 1;
                self.carry.clear();
                let keys = self.split_lines(&content);
                // A rewrite-mode file is a superset of what was read before;
                // an append-mode file that got replaced starts over.
                let skip = match self.state.mode {
                    DeliveryMode::RewriteFile => self.watermark as usize,
                    _ => 0,
                };
                let total = keys.len() as u64;
                for key in keys.into_iter().skip(skip).flatten() {
                    out.extend(table.ingest_key(&key));
                }
                self.watermark = match self.state.mode {
                    DeliveryMode::RewriteFile => total.max(self.watermark),
                    _ => total,
                };
            }
        }
        self.counters.keys_ingested += out.len() as u64;
        Ok(out)
    }

    /// Parses complete lines, keeping an unterminated tail in `carry`.
    /// Returns one entry per line; malformed lines are `None`.
    fn split_lines(&mut self, buf: &[u8]) -> Vec<Option<Block>> {
        let end = buf.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        self.carry = buf[end..].to_vec();
        let mut lines: Vec<&[u8]> = buf[..end].split(|&b| b == b'\n').collect();
        lines.pop();
        lines
            .into_iter()
            .map(|line| {
                let key = parse_key_line(line);
                if key.is_none() {
                    self.counters.bad_lines += 1;
                }
                key
            })
            .collect()
    }
}

fn parse_key_line(line: &[u8]) -> Option<Block> {
    if line.len() != KEY_BYTES * 2 || !line.iter().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        return None;
    }
    let mut key = [0u8; KEY_BYTES];
    hex::decode_to_slice(line, &mut key).ok()?;
    Some(key)
}

/// Key-file line for one key: 64 lowercase hex characters and a newline.
pub(crate) fn key_line(key: &Block) -> String {
    let mut s = hex::encode(key);
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keycore::TableScope;
    use crate::qkdlink::frame::{encode_qix_frame, QIX_FRAME_LEN};

    fn file_state(content: &[u8]) -> FeedState {
        FeedState {
            mode: DeliveryMode::AppendFile,
            consumed: content.len() as u64,
            seen_len: content.len() as u64,
            stamp: 1,
            prefix_digest: sha256(content),
        }
    }

    fn obs(bytes: &[u8]) -> Observation {
        Observation { len: bytes.len() as u64, stamp: 2, bytes: bytes.to_vec() }
    }

    #[test]
    fn same_content_is_no_change() {
        let content = vec![7u8; 100];
        let det = detect_update(&file_state(&content), &obs(&content));
        assert_eq!(det.kind, UpdateKind::NoChange);
    }

    #[test]
    fn grown_file_is_appended() {
        let old = vec![7u8; 100];
        let mut new = old.clone();
        new.extend_from_slice(&[9u8; 60]);
        let det = detect_update(&file_state(&old), &obs(&new));
        assert_eq!(det.kind, UpdateKind::Appended(vec![9u8; 60]));
        assert_eq!(det.next.consumed, 160);
    }

    #[test]
    fn same_length_different_content_is_rewritten() {
        let old = vec![7u8; 100];
        let mut new = old.clone();
        new[50] = 8;
        // lengths match, only the prefix digest tells them apart
        assert_eq!(sha256(&old) == sha256(&new), false);
        let det = detect_update(&file_state(&old), &obs(&new));
        assert_eq!(det.kind, UpdateKind::Rewritten(new));
    }

    #[test]
    fn shrunk_file_is_rewritten() {
        let old = vec![7u8; 100];
        let det = detect_update(&file_state(&old), &obs(&old[..40]));
        assert!(matches!(det.kind, UpdateKind::Rewritten(_)));
    }

    fn key(i: u8) -> Block {
        [i; KEY_BYTES]
    }

    #[test]
    fn append_file_ingests_new_lines_only() {
        let mut medium = MemoryMedium::new();
        let mut reader = FeedReader::new(DeliveryMode::AppendFile);
        let mut table = KeyTable::new(TableScope::QuantumLink(2));
        assert!(reader.poll(&medium, &mut table).unwrap().is_empty());
        medium.append((key_line(&key(1)) + &key_line(&key(2))).as_bytes()).unwrap();
        assert_eq!(reader.poll(&medium, &mut table).unwrap().len(), 2);
        assert!(reader.poll(&medium, &mut table).unwrap().is_empty());
        medium.append(key_line(&key(3)).as_bytes()).unwrap();
        let got = reader.poll(&medium, &mut table).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].bits(), &key(3));
        assert_eq!(got[0].id(), 2);
    }

    #[test]
    fn partial_line_waits_for_rest() {
        let mut medium = MemoryMedium::new();
        let mut reader = FeedReader::new(DeliveryMode::AppendFile);
        let mut table = KeyTable::new(TableScope::QuantumLink(2));
        let line = key_line(&key(4));
        medium.append(&line.as_bytes()[..30]).unwrap();
        assert!(reader.poll(&medium, &mut table).unwrap().is_empty());
        medium.append(&line.as_bytes()[30..]).unwrap();
        let got = reader.poll(&medium, &mut table).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].bits(), &key(4));
    }

    #[test]
    fn rewrite_superset_ingests_only_delta() {
        let mut medium = MemoryMedium::new();
        let mut reader = FeedReader::new(DeliveryMode::RewriteFile);
        let mut table = KeyTable::new(TableScope::QuantumLink(3));
        medium.replace((key_line(&key(1)) + &key_line(&key(2))).as_bytes()).unwrap();
        assert_eq!(reader.poll(&medium, &mut table).unwrap().len(), 2);
        medium
            .replace((key_line(&key(1)) + &key_line(&key(2)) + &key_line(&key(3))).as_bytes())
            .unwrap();
        let got = reader.poll(&medium, &mut table).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].bits(), &key(3));
        assert_eq!(reader.watermark(), 3);
    }

    #[test]
    fn replaced_append_file_starts_over() {
        let mut medium = MemoryMedium::new();
        let mut reader = FeedReader::new(DeliveryMode::AppendFile);
        let mut table = KeyTable::new(TableScope::QuantumLink(2));
        medium.append(key_line(&key(1)).as_bytes()).unwrap();
        reader.poll(&medium, &mut table).unwrap();
        medium.replace(key_line(&key(9)).as_bytes()).unwrap();
        let got = reader.poll(&medium, &mut table).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].bits(), &key(9));
    }

    #[test]
    fn malformed_line_counted_and_skipped() {
        let mut medium = MemoryMedium::new();
        let mut reader = FeedReader::new(DeliveryMode::AppendFile);
        let mut table = KeyTable::new(TableScope::QuantumLink(2));
        let text = key_line(&key(1)) + "zz-not-a-key\n" + &key_line(&key(0xab)).to_uppercase();
        medium.append(text.as_bytes()).unwrap();
        assert_eq!(reader.poll(&medium, &mut table).unwrap().len(), 1);
        assert_eq!(reader.counters().bad_lines, 2);
    }

    #[test]
    fn packet_stream_skips_corrupt_frame() {
        let mut medium = MemoryMedium::new();
        let mut reader = FeedReader::new(DeliveryMode::PacketStream);
        let mut table = KeyTable::new(TableScope::QuantumLink(1));
        for (id, status) in [(0, QixStatus::Secure), (1, QixStatus::Secure), (2, QixStatus::Compromised)] {
            medium.append(&encode_qix_frame(&QixFrame { key_id: id, key: key(id as u8), status })).unwrap();
        }
        medium.corrupt(QIX_FRAME_LEN + 10, 0x01);
        let got = reader.poll(&medium, &mut table).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].bits(), &key(0));
        assert_eq!(got[1].bits(), &key(2));
        assert_eq!(got[1].status(), crate::keycore::KeyStatus::Compromised);
        assert_eq!(reader.counters().bad_frames, 1);
        assert_eq!(table.available(), 1);
    }

    #[test]
    fn packet_split_across_polls() {
        let mut medium = MemoryMedium::new();
        let mut reader = FeedReader::new(DeliveryMode::PacketStream);
        let mut table = KeyTable::new(TableScope::QuantumLink(1));
        let frame = encode_qix_frame(&QixFrame { key_id: 0, key: key(5), status: QixStatus::Secure });
        medium.append(&frame[..20]).unwrap();
        assert!(reader.poll(&medium, &mut table).unwrap().is_empty());
        medium.append(&frame[20..]).unwrap();
        assert_eq!(reader.poll(&medium, &mut table).unwrap().len(), 1);
    }

    #[test]
    fn file_medium_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut medium = FileMedium::new(dir.path().join("keys.txt"));
        assert_eq!(medium.stat().unwrap(), (0, 0));
        assert_eq!(medium.status().unwrap(), None);
        let mut reader = FeedReader::new(DeliveryMode::RewriteFile);
        let mut table = KeyTable::new(TableScope::QuantumLink(3));
        medium.replace(key_line(&key(1)).as_bytes()).unwrap();
        medium.set_status(LinkStatus { skr_bps: Some(1892.0), qber_pct: Some(1.4) }).unwrap();
        assert_eq!(reader.poll(&medium, &mut table).unwrap().len(), 1);
        medium.replace((key_line(&key(1)) + &key_line(&key(2))).as_bytes()).unwrap();
        assert_eq!(reader.poll(&medium, &mut table).unwrap().len(), 1);
        assert_eq!(medium.status().unwrap().unwrap().qber_pct, Some(1.4));
        let mut append = FileMedium::new(dir.path().join("stream.bin"));
        append.append(b"abc").unwrap();
        append.append(b"def").unwrap();
        assert_eq!(append.read_from(2).unwrap(), b"cdef");
    }
}
