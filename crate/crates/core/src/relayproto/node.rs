//! The per-node reactor. It owns the node's key tables, link feeds and
//! channels, consumes one input at a time and returns the messages to send.
//! The simulator and the socket driver both drive this same type.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::policy::{nm_trigger, TransferPolicy};
use super::role::{NodeKind, NodeRole};
use super::wire::{decode_wire, Channel, ChannelKind, ChannelState, ErrorCode, KeyHop, LinkReport, Payload, StatsReport};
use crate::keycore::{sha256, Block, KeyError, KeyStatus, KeyTable, NetworkKeySource, TableScope};
use crate::qkdlink::{DeliveryMode, FeedMedium, FeedReader, LinkStatus};
use crate::telemetry::{SeriesPoint, TelemetryStore};

/// Position in the chain: 0 is the network manager, `n_links` the edge node.
pub type NodeId = u32;
/// Virtual time in microseconds.
pub type Micros = u64;

pub const SECOND: Micros = 1_000_000;

/// Display name of node `k`: NM, TN1, TN2, ..., EN.
pub fn node_name(k: NodeId, n_links: u8) -> String {
    if k == 0 {
        "NM".to_string()
    } else if k == n_links as NodeId {
        "EN".to_string()
    } else {
        format!("TN{k}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTiming {
    pub poll_period_us: Micros,
    pub report_period_us: Micros,
    /// Reports older than this are not trusted for triggering.
    pub stale_after_us: Micros,
    /// EN gives up waiting for missing hops of a batch.
    pub en_batch_timeout_us: Micros,
    /// NM gives up waiting for a TransferComplete.
    pub nm_batch_timeout_us: Micros,
    /// A relay drops a hop it could not process for this long.
    pub hold_timeout_us: Micros,
}

impl Default for NodeTiming {
    fn default() -> Self {
        Self {
            poll_period_us: SECOND,
            report_period_us: SECOND,
            stale_after_us: 3 * SECOND,
            en_batch_timeout_us: 90 * SECOND,
            nm_batch_timeout_us: 300 * SECOND,
            hold_timeout_us: 60 * SECOND,
        }
    }
}

/// Everything a node needs to know about itself and its peers.
#[derive(Debug, Clone)]
pub struct NodeSetup {
    pub id: NodeId,
    pub n_links: u8,
    pub policy: TransferPolicy,
    pub timing: NodeTiming,
    /// Seed of the NM's network-key source; ignored elsewhere.
    pub nk_seed: Block,
    /// Authentication key of the relay channel over link `n`, indexed `n - 1`.
    pub relay_psks: Vec<Block>,
    /// Authentication key of node `k`'s reporting channel, indexed `k`.
    pub report_psks: Vec<Block>,
}

impl NodeSetup {
    pub fn role(&self) -> NodeRole {
        NodeRole::in_chain(self.id as usize, self.n_links as usize)
    }

    pub fn name(&self) -> String {
        node_name(self.id, self.n_links)
    }
}

/// A link end: the node's copy of that link's key table and the feed
/// the local QKD system fills.
pub struct LinkEnd {
    pub link: u8,
    table: KeyTable,
    reader: FeedReader,
    medium: Box<dyn FeedMedium>,
    status: LinkStatus,
}

impl LinkEnd {
    pub fn new(link: u8, mode: DeliveryMode, medium: Box<dyn FeedMedium>) -> Self {
        Self {
            link,
            table: KeyTable::new(TableScope::QuantumLink(link)),
            reader: FeedReader::new(mode),
            medium,
            status: LinkStatus::default(),
        }
    }

    pub fn table(&self) -> &KeyTable {
        &self.table
    }

    pub fn reader(&self) -> &FeedReader {
        &self.reader
    }

    fn report(&self) -> LinkReport {
        LinkReport {
            link_index: self.link,
            available_qk: self.table.available() as u64,
            used_qk: self.table.count(KeyStatus::Used) as u64,
            compromised_qk: self.table.count(KeyStatus::Compromised) as u64,
            skr_bps: self.status.skr_bps,
            qber_pct: self.status.qber_pct,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyOp {
    Encrypt,
    Decrypt,
}

/// One consumption of a link key, for the offline single-use audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageEvent {
    pub time_us: Micros,
    pub node: String,
    pub scope: String,
    pub key_id: u64,
    pub op: KeyOp,
    pub batch_id: u64,
    pub index: u32,
}

/// One sealed frame as it left the node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireLogEntry {
    pub time_us: Micros,
    pub from: String,
    pub to: String,
    pub channel: ChannelKind,
    pub msg: String,
    pub frame_hex: String,
}

/// A message the node wants delivered, not yet sealed.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub to: NodeId,
    pub kind: ChannelKind,
    pub payload: Payload,
}

#[derive(Debug, Clone)]
pub enum Input {
    /// Poll the link feeds, expire timers and, at the NM, evaluate the trigger.
    Poll,
    /// Emit a stats report.
    Report,
    Wire { from: NodeId, kind: ChannelKind, bytes: Vec<u8> },
    /// The reporting connection to the NM went away or came back.
    ReportLink { up: bool },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCounters {
    pub polls: u64,
    pub poll_errors: u64,
    pub reports_sent: u64,
    pub reports_buffered: u64,
    pub digest_mismatches: u64,
    pub key_errors: u64,
    pub duplicate_hops: u64,
    pub late_hops: u64,
    pub held_hops: u64,
    pub abandoned_hops: u64,
    pub hop_errors_received: u64,
    pub unknown_peer: u64,
    pub unexpected: u64,
    pub rejected_frames: u64,
    pub telemetry_rejected: u64,
}

/// What the NM decided at one trigger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerRecord {
    pub time_us: Micros,
    pub batch_id: u64,
    pub h: u32,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub batch_id: u64,
    pub h: u32,
    pub received: u32,
    pub missing: u32,
    pub triggered_us: Micros,
    pub completed_us: Micros,
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct InFlight {
    batch_id: u64,
    h: u32,
    started: Micros,
    nk_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NmState {
    source_counter: u64,
    next_batch_id: u64,
    in_flight: Option<InFlight>,
    reports: BTreeMap<NodeId, StatsReport>,
    last_completion: Micros,
    transfers_completed: u64,
    keys_failed: u64,
    triggers: Vec<TriggerRecord>,
    outcomes: Vec<BatchOutcome>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct HeldHop {
    hop: KeyHop,
    since: Micros,
    /// Set once decrypted and verified; waits for a right-link key.
    nk: Option<Block>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct EnBatch {
    h: Option<u32>,
    started: Micros,
    received: BTreeSet<u32>,
    failed: BTreeSet<u32>,
    done: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct RelayState {
    seen: BTreeSet<(u64, u32)>,
    held: VecDeque<HeldHop>,
    closed: BTreeSet<u64>,
    batches: BTreeMap<u64, EnBatch>,
}

/// Test hooks: corrupt the ciphertext of selected outgoing hops.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeFaults {
    pub tamper: BTreeSet<(u64, u32)>,
}

pub struct Node {
    setup: NodeSetup,
    name: String,
    role: NodeRole,
    now: Micros,
    left: Option<LinkEnd>,
    right: Option<LinkEnd>,
    nk: KeyTable,
    source: Option<NetworkKeySource>,
    channels: BTreeMap<(NodeId, ChannelKind), Channel>,
    nm: Option<NmState>,
    relay: RelayState,
    report_up: bool,
    report_buffer: VecDeque<StatsReport>,
    draining: bool,
    faults: NodeFaults,
    telemetry: TelemetryStore,
    usage: Vec<UsageEvent>,
    wire_log: Vec<WireLogEntry>,
    counters: NodeCounters,
}

enum Step {
    Done,
    Blocked(HeldHop),
}

fn error_code(e: &KeyError) -> ErrorCode {
    match e {
        KeyError::KeyExhausted(_) => ErrorCode::KeyExhausted,
        KeyError::KeyAlreadyUsed(_) => ErrorCode::KeyAlreadyUsed,
        KeyError::KeyCompromised(_) => ErrorCode::KeyCompromised,
        _ => ErrorCode::UnknownKeyId,
    }
}

impl Node {
    /// Builds a node. `left` / `right` are the link ends matching its role.
    pub fn new(setup: NodeSetup, left: Option<LinkEnd>, right: Option<LinkEnd>) -> Self {
        let role = setup.role();
        let id = setup.id;
        let mut channels = BTreeMap::new();
        if let Some(n) = role.left_link {
            channels.insert((id - 1, ChannelKind::Relay), Channel::new(setup.relay_psks[n as usize - 1]));
        }
        if let Some(n) = role.right_link {
            channels.insert((id + 1, ChannelKind::Relay), Channel::new(setup.relay_psks[n as usize - 1]));
        }
        if role.kind == NodeKind::NetworkManager {
            for k in 1..=setup.n_links as NodeId {
                channels.insert((k, ChannelKind::Report), Channel::new(setup.report_psks[k as usize]));
            }
        } else {
            channels.insert((0, ChannelKind::Report), Channel::new(setup.report_psks[id as usize]));
        }
        let is_nm = role.kind == NodeKind::NetworkManager;
        Self {
            name: setup.name(),
            role,
            now: 0,
            left,
            right,
            nk: KeyTable::new(TableScope::NetworkKeys),
            source: is_nm.then(|| NetworkKeySource::new(setup.nk_seed)),
            channels,
            nm: is_nm.then(|| NmState {
                source_counter: 0,
                next_batch_id: 1,
                in_flight: None,
                reports: BTreeMap::new(),
                last_completion: 0,
                transfers_completed: 0,
                keys_failed: 0,
                triggers: Vec::new(),
                outcomes: Vec::new(),
            }),
            relay: RelayState::default(),
            report_up: true,
            report_buffer: VecDeque::new(),
            draining: false,
            faults: NodeFaults::default(),
            telemetry: TelemetryStore::new(),
            usage: Vec::new(),
            wire_log: Vec::new(),
            counters: NodeCounters::default(),
            setup,
        }
    }

    pub fn id(&self) -> NodeId {
        self.setup.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> NodeRole {
        self.role
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn left(&self) -> Option<&LinkEnd> {
        self.left.as_ref()
    }

    pub fn right(&self) -> Option<&LinkEnd> {
        self.right.as_ref()
    }

    pub fn link_end(&self, link: u8) -> Option<&LinkEnd> {
        [self.left.as_ref(), self.right.as_ref()].into_iter().flatten().find(|e| e.link == link)
    }

    pub fn network_keys(&self) -> &KeyTable {
        &self.nk
    }

    pub fn counters(&self) -> &NodeCounters {
        &self.counters
    }

    pub fn telemetry(&self) -> &TelemetryStore {
        &self.telemetry
    }

    pub fn telemetry_mut(&mut self) -> &mut TelemetryStore {
        &mut self.telemetry
    }

    pub fn replace_telemetry(&mut self, store: TelemetryStore) {
        self.telemetry = store;
    }

    pub fn faults_mut(&mut self) -> &mut NodeFaults {
        &mut self.faults
    }

    /// Stop starting new transfers; in-flight traffic still completes.
    pub fn set_draining(&mut self, draining: bool) {
        self.draining = draining;
    }

    pub fn triggers(&self) -> &[TriggerRecord] {
        self.nm.as_ref().map_or(&[], |n| &n.triggers)
    }

    pub fn outcomes(&self) -> &[BatchOutcome] {
        self.nm.as_ref().map_or(&[], |n| &n.outcomes)
    }

    pub fn batch_in_flight(&self) -> bool {
        self.nm.as_ref().is_some_and(|n| n.in_flight.is_some())
    }

    /// Hops waiting at this node for a key.
    pub fn held_hops(&self) -> usize {
        self.relay.held.len()
    }

    pub fn buffered_reports(&self) -> usize {
        self.report_buffer.len()
    }

    pub fn channel_states(&self) -> impl Iterator<Item = (&(NodeId, ChannelKind), &ChannelState)> {
        self.channels.iter().map(|(k, c)| (k, c.state()))
    }

    pub fn take_usage(&mut self) -> Vec<UsageEvent> {
        std::mem::take(&mut self.usage)
    }

    pub fn take_wire_log(&mut self) -> Vec<WireLogEntry> {
        std::mem::take(&mut self.wire_log)
    }

    /// Finds which peer and channel a frame belongs to by trying each
    /// channel's key. Used to classify new inbound connections.
    pub fn identify(&self, frame: &[u8]) -> Option<(NodeId, ChannelKind)> {
        self.channels.iter().find_map(|(key, ch)| decode_wire(frame, ch.psk()).ok().map(|_| *key))
    }

    /// Seals a message on its channel and logs the frame.
    pub fn seal(&mut self, env: &Envelope) -> Option<Vec<u8>> {
        let ch = self.channels.get_mut(&(env.to, env.kind))?;
        let bytes = ch.seal(env.payload.clone());
        self.wire_log.push(WireLogEntry {
            time_us: self.now,
            from: self.name.clone(),
            to: node_name(env.to, self.setup.n_links),
            channel: env.kind,
            msg: env.payload.type_name().to_string(),
            frame_hex: hex::encode(&bytes),
        });
        Some(bytes)
    }

    pub fn hello(&self, to: NodeId, kind: ChannelKind) -> Envelope {
        Envelope { to, kind, payload: Payload::Hello { node_id: self.setup.id, channel: kind } }
    }

    /// Processes one input at virtual time `now`.
    pub fn handle(&mut self, now: Micros, input: Input) -> Vec<Envelope> {
        self.now = self.now.max(now);
        let mut out = Vec::new();
        match input {
            Input::Poll => {
                self.poll_feeds();
                self.expire(&mut out);
                self.flush_held(&mut out);
                if self.nm.is_some() {
                    self.nm_maybe_trigger(&mut out);
                }
            }
            Input::Report => self.report_tick(&mut out),
            Input::Wire { from, kind, bytes } => self.receive(from, kind, &bytes, &mut out),
            Input::ReportLink { up } => {
                self.report_up = up;
                if up {
                    self.flush_reports(&mut out);
                }
            }
        }
        out
    }

    fn ts(&self) -> u64 {
        self.now * 1_000
    }

    fn record(&mut self, point: SeriesPoint) {
        if self.telemetry.record(point).is_err() {
            self.counters.telemetry_rejected += 1;
        }
    }

    /// Post-event sample of one link pool.
    fn pool_point(&mut self, link: u8, consumed_batch: Option<u64>) {
        let Some(end) = self.link_end(link) else { return };
        let t = end.table();
        let mut p = SeriesPoint::new("pool", self.ts())
            .tag("node", &self.name)
            .tag("link", link)
            .field("available_qk", t.available())
            .field("used_qk", t.count(KeyStatus::Used))
            .field("compromised_qk", t.count(KeyStatus::Compromised));
        if let Some(b) = consumed_batch {
            p = p.field("consumed_batch", b);
        }
        self.record(p);
    }

    fn poll_feeds(&mut self) {
        self.counters.polls += 1;
        let mut changed = Vec::new();
        for end in [self.left.as_mut(), self.right.as_mut()].into_iter().flatten() {
            match end.reader.poll(end.medium.as_ref(), &mut end.table) {
                Ok(new) if !new.is_empty() => changed.push(end.link),
                Ok(_) => {}
                Err(_) => self.counters.poll_errors += 1,
            }
            match end.medium.status() {
                Ok(Some(s)) => end.status = s,
                Ok(None) => {}
                Err(_) => self.counters.poll_errors += 1,
            }
        }
        for link in changed {
            self.pool_point(link, None);
        }
    }

    fn log_use(&mut self, scope: TableScope, key_id: u64, op: KeyOp, hop: &KeyHop) {
        self.usage.push(UsageEvent {
            time_us: self.now,
            node: self.name.clone(),
            scope: scope.to_string(),
            key_id,
            op,
            batch_id: hop.batch_id,
            index: hop.index,
        });
    }

    fn left_id(&self) -> NodeId {
        self.setup.id - 1
    }

    fn right_id(&self) -> NodeId {
        self.setup.id + 1
    }

    fn send_relay(&self, out: &mut Vec<Envelope>, to: NodeId, payload: Payload) {
        out.push(Envelope { to, kind: ChannelKind::Relay, payload });
    }

    fn nm_maybe_trigger(&mut self, out: &mut Vec<Envelope>) {
        let Some(nm) = self.nm.as_ref() else { return };
        if self.draining || nm.in_flight.is_some() {
            return;
        }
        let Some(first) = self.right.as_ref() else { return };
        let mut counts = vec![first.table.available()];
        for link in 2..=self.setup.n_links {
            let reporter = (link - 1) as NodeId;
            let Some(rep) = nm.reports.get(&reporter) else { return };
            let at = rep.timestamp_ns / 1_000;
            if at + self.setup.timing.stale_after_us < self.now || at < nm.last_completion {
                return;
            }
            match rep.link(link) {
                Some(l) => counts.push(l.available_qk as usize),
                None => return,
            }
        }
        if let Some(h) = nm_trigger(&counts, &self.setup.policy) {
            self.start_transfer(h, counts, out);
        }
    }

    fn start_transfer(&mut self, h: usize, counts: Vec<usize>, out: &mut Vec<Envelope>) {
        let right_id = self.right_id();
        let (Some(right), Some(nm), Some(source)) = (self.right.as_mut(), self.nm.as_mut(), self.source.as_mut()) else {
            return;
        };
        if right.table.available() < h || h == 0 {
            self.counters.key_errors += 1;
            return;
        }
        let batch_id = nm.next_batch_id;
        nm.next_batch_id += 1;
        let nks = source.draw(h);
        nm.source_counter = source.counter();
        let mut hops = Vec::with_capacity(h);
        for (i, rec) in nks.iter().enumerate() {
            let (mut ct, qk_id) = right.table.otp_encrypt(rec.bits()).expect("availability checked");
            if self.faults.tamper.contains(&(batch_id, i as u32)) {
                ct[0] ^= 0x01;
            }
            hops.push(KeyHop { batch_id, index: i as u32, nk_id: rec.id(), nk_digest: *rec.digest(), ciphertext: ct, qk_id });
        }
        nm.in_flight = Some(InFlight {
            batch_id,
            h: h as u32,
            started: self.now,
            nk_ids: nks.iter().map(|r| r.id()).collect(),
        });
        nm.triggers.push(TriggerRecord {
            time_us: self.now,
            batch_id,
            h: h as u32,
            counts: counts.iter().map(|&c| c as u64).collect(),
        });
        for rec in &nks {
            if self.nk.insert(rec.id(), *rec.bits()).is_err() {
                self.counters.key_errors += 1;
            }
        }
        self.send_relay(out, right_id, Payload::TransferInit { batch_id, h: h as u32 });
        let link = self.role.right_link.expect("NM has a right link");
        for hop in hops {
            self.log_use(TableScope::QuantumLink(link), hop.qk_id, KeyOp::Encrypt, &hop);
            self.send_relay(out, right_id, Payload::KeyHop(hop));
        }
        let p = SeriesPoint::new("transfer", self.ts())
            .tag("node", &self.name)
            .field("batch_id", batch_id)
            .field("h", h)
            .field("min_count", counts.iter().copied().min().unwrap_or(0));
        self.record(p);
        self.pool_point(link, Some(batch_id));
    }

    fn receive(&mut self, from: NodeId, kind: ChannelKind, bytes: &[u8], out: &mut Vec<Envelope>) {
        let Some(ch) = self.channels.get_mut(&(from, kind)) else {
            self.counters.unknown_peer += 1;
            return;
        };
        let msg = match ch.open(bytes) {
            Ok(m) => m,
            Err(_) => {
                self.counters.rejected_frames += 1;
                return;
            }
        };
        let from_left = self.role.left_link.is_some() && from == self.left_id() && kind == ChannelKind::Relay;
        let from_right = self.role.right_link.is_some() && from == self.right_id() && kind == ChannelKind::Relay;
        match msg.payload {
            Payload::Hello { .. } => {}
            Payload::StatsReport(r) if kind == ChannelKind::Report && self.nm.is_some() && r.node_id == from => {
                self.nm_on_report(from, r)
            }
            Payload::TransferInit { batch_id, h } if from_left => self.on_transfer_init(batch_id, h, out),
            Payload::KeyHop(hop) if from_left => self.on_key_hop(hop, out),
            Payload::TransferAck { batch_id, missing_nk_ids } if from_left => {
                self.on_ack(batch_id, missing_nk_ids, out)
            }
            Payload::TransferComplete { batch_id, received, missing } if from_right => {
                self.on_complete(batch_id, received, missing, out)
            }
            Payload::Error { batch_id, index, nk_id, code } if from_right => {
                self.counters.hop_errors_received += 1;
                let _ = self.nk.mark_compromised(nk_id);
                if self.role.left_link.is_some() {
                    let to = self.left_id();
                    self.send_relay(out, to, Payload::Error { batch_id, index, nk_id, code });
                }
            }
            Payload::Error { batch_id, index, nk_id, code } if from_left => {
                self.counters.hop_errors_received += 1;
                if self.role.kind == NodeKind::EdgeNode {
                    let b = self.relay.batches.entry(batch_id).or_insert_with(|| EnBatch { started: self.now, ..EnBatch::default() });
                    b.failed.insert(index);
                    self.en_check_complete(batch_id, false, out);
                } else {
                    let to = self.right_id();
                    self.send_relay(out, to, Payload::Error { batch_id, index, nk_id, code });
                }
            }
            _ => self.counters.unexpected += 1,
        }
    }

    fn nm_on_report(&mut self, from: NodeId, r: StatsReport) {
        let node = node_name(from, self.setup.n_links);
        let mut points = Vec::new();
        for l in &r.links {
            points.push(
                SeriesPoint::new("report", r.timestamp_ns)
                    .tag("node", &node)
                    .tag("link", l.link_index)
                    .field("available_qk", l.available_qk)
                    .field("used_qk", l.used_qk)
                    .field("compromised_qk", l.compromised_qk)
                    .opt_field("skr_bps", l.skr_bps)
                    .opt_field("qber_pct", l.qber_pct),
            );
        }
        points.push(
            SeriesPoint::new("report_nk", r.timestamp_ns)
                .tag("node", &node)
                .field("available_nk", r.available_nk)
                .field("used_nk", r.used_nk)
                .field("received_ns", self.ts()),
        );
        for p in points {
            self.record(p);
        }
        let nm = self.nm.as_mut().expect("checked by caller");
        let newer = nm.reports.get(&from).is_none_or(|old| old.timestamp_ns <= r.timestamp_ns);
        if newer {
            nm.reports.insert(from, r);
        }
    }

    fn on_transfer_init(&mut self, batch_id: u64, h: u32, out: &mut Vec<Envelope>) {
        if self.role.kind == NodeKind::EdgeNode {
            let now = self.now;
            let b = self.relay.batches.entry(batch_id).or_insert_with(|| EnBatch { started: now, ..EnBatch::default() });
            b.h = Some(h);
            self.en_check_complete(batch_id, false, out);
        } else {
            let to = self.right_id();
            self.send_relay(out, to, Payload::TransferInit { batch_id, h });
        }
    }

    fn on_key_hop(&mut self, hop: KeyHop, out: &mut Vec<Envelope>) {
        let closed = self.relay.closed.contains(&hop.batch_id)
            || self.relay.batches.get(&hop.batch_id).is_some_and(|b| b.done);
        if closed {
            self.counters.late_hops += 1;
            return;
        }
        if !self.relay.seen.insert((hop.batch_id, hop.index)) {
            self.counters.duplicate_hops += 1;
            return;
        }
        if self.role.kind == NodeKind::EdgeNode {
            let now = self.now;
            self.relay.batches.entry(hop.batch_id).or_insert_with(|| EnBatch { started: now, ..EnBatch::default() });
        }
        self.relay.held.push_back(HeldHop { hop, since: self.now, nk: None });
        self.flush_held(out);
        self.counters.held_hops = self.counters.held_hops.max(self.relay.held.len() as u64);
    }

    fn flush_held(&mut self, out: &mut Vec<Envelope>) {
        while let Some(h) = self.relay.held.pop_front() {
            if let Step::Blocked(h) = self.process_hop(h, out) {
                self.relay.held.push_front(h);
                break;
            }
        }
    }

    /// Reports a hop that cannot be delivered: upstream always, downstream
    /// from a relay so the EN can close the batch; the EN just records it.
    fn fail_hop(&mut self, hop: &KeyHop, code: ErrorCode, out: &mut Vec<Envelope>) {
        let err = Payload::Error { batch_id: hop.batch_id, index: hop.index, nk_id: hop.nk_id, code };
        let left = self.left_id();
        self.send_relay(out, left, err.clone());
        if self.role.kind == NodeKind::EdgeNode {
            if let Some(b) = self.relay.batches.get_mut(&hop.batch_id) {
                b.failed.insert(hop.index);
            }
            self.en_check_complete(hop.batch_id, false, out);
        } else {
            let right = self.right_id();
            self.send_relay(out, right, err);
        }
    }

    fn process_hop(&mut self, mut held: HeldHop, out: &mut Vec<Envelope>) -> Step {
        let hop = held.hop.clone();
        let nk = match held.nk {
            Some(nk) => nk,
            None => {
                let left = self.left.as_mut().expect("relay nodes have a left link");
                if hop.qk_id >= left.table.next_id() {
                    // key not ingested here yet
                    return Step::Blocked(held);
                }
                let scope = left.table.scope();
                let link = left.link;
                let nk = match left.table.otp_decrypt(&hop.ciphertext, hop.qk_id) {
                    Ok(nk) => nk,
                    Err(e) => {
                        self.counters.key_errors += 1;
                        self.fail_hop(&hop, error_code(&e), out);
                        return Step::Done;
                    }
                };
                self.log_use(scope, hop.qk_id, KeyOp::Decrypt, &hop);
                self.pool_point(link, Some(hop.batch_id));
                if sha256(&nk) != hop.nk_digest {
                    self.counters.digest_mismatches += 1;
                    self.fail_hop(&hop, ErrorCode::DigestMismatch, out);
                    return Step::Done;
                }
                held.nk = Some(nk);
                nk
            }
        };
        if self.role.kind == NodeKind::EdgeNode {
            if self.nk.insert(hop.nk_id, nk).is_err() {
                self.counters.key_errors += 1;
            }
            if let Some(b) = self.relay.batches.get_mut(&hop.batch_id) {
                b.received.insert(hop.index);
            }
            self.en_check_complete(hop.batch_id, false, out);
            return Step::Done;
        }
        let right = self.right.as_mut().expect("trusted nodes have a right link");
        let (mut ct, qk_id) = match right.table.otp_encrypt(&nk) {
            Ok(v) => v,
            Err(KeyError::KeyExhausted(_)) => return Step::Blocked(held),
            Err(e) => {
                self.counters.key_errors += 1;
                self.fail_hop(&hop, error_code(&e), out);
                return Step::Done;
            }
        };
        let scope = right.table.scope();
        let link = right.link;
        if self.faults.tamper.contains(&(hop.batch_id, hop.index)) {
            ct[0] ^= 0x01;
        }
        self.log_use(scope, qk_id, KeyOp::Encrypt, &hop);
        if self.nk.insert(hop.nk_id, nk).is_err() {
            self.counters.key_errors += 1;
        }
        let to = self.right_id();
        self.send_relay(out, to, Payload::KeyHop(KeyHop { ciphertext: ct, qk_id, ..hop.clone() }));
        self.pool_point(link, Some(hop.batch_id));
        Step::Done
    }

    fn en_check_complete(&mut self, batch_id: u64, force: bool, out: &mut Vec<Envelope>) {
        let Some(b) = self.relay.batches.get_mut(&batch_id) else { return };
        if b.done {
            return;
        }
        let Some(h) = b.h else {
            if force {
                b.done = true;
            }
            return;
        };
        if !force && b.received.len() + b.failed.len() < h as usize {
            return;
        }
        b.done = true;
        let missing: Vec<u32> = (0..h).filter(|i| !b.received.contains(i)).collect();
        let received = b.received.len() as u32;
        let to = self.left_id();
        self.send_relay(out, to, Payload::TransferComplete { batch_id, received, missing });
        // drop anything of this batch still waiting
        self.relay.held.retain(|x| x.hop.batch_id != batch_id);
    }

    fn on_complete(&mut self, batch_id: u64, received: u32, missing: Vec<u32>, out: &mut Vec<Envelope>) {
        if self.nm.is_none() {
            let to = self.left_id();
            self.send_relay(out, to, Payload::TransferComplete { batch_id, received, missing });
            return;
        }
        let nm = self.nm.as_mut().expect("checked");
        match &nm.in_flight {
            Some(f) if f.batch_id == batch_id => {}
            _ => {
                self.counters.unexpected += 1;
                return;
            }
        }
        let indices: Vec<usize> = missing.iter().map(|&i| i as usize).collect();
        self.close_batch(received, &indices, false, out);
    }

    /// Ends the NM's in-flight batch: burns the network keys that did not
    /// arrive and tells the chain which ones they were.
    fn close_batch(&mut self, received: u32, missing: &[usize], timed_out: bool, out: &mut Vec<Envelope>) {
        let right = self.right_id();
        let nm = self.nm.as_mut().expect("NM only");
        let Some(f) = nm.in_flight.take() else { return };
        let missing_ids: Vec<u64> = missing.iter().filter_map(|&i| f.nk_ids.get(i).copied()).collect();
        nm.transfers_completed += 1;
        nm.keys_failed += missing_ids.len() as u64;
        nm.last_completion = self.now;
        nm.outcomes.push(BatchOutcome {
            batch_id: f.batch_id,
            h: f.h,
            received,
            missing: missing_ids.len() as u32,
            triggered_us: f.started,
            completed_us: self.now,
            timed_out,
        });
        let (completed, failed) = (nm.transfers_completed, nm.keys_failed);
        for id in &missing_ids {
            let _ = self.nk.mark_compromised(*id);
        }
        self.send_relay(out, right, Payload::TransferAck { batch_id: f.batch_id, missing_nk_ids: missing_ids.clone() });
        let p = SeriesPoint::new("transfer_outcome", self.ts())
            .tag("node", &self.name)
            .field("batch_id", f.batch_id)
            .field("h", f.h as u64)
            .field("received", received as u64)
            .field("keys_failed", missing_ids.len())
            .field("transfers_completed", completed)
            .field("keys_failed_total", failed);
        self.record(p);
    }

    fn on_ack(&mut self, batch_id: u64, missing_nk_ids: Vec<u64>, out: &mut Vec<Envelope>) {
        for id in &missing_nk_ids {
            if self.nk.get(*id).is_some() {
                let _ = self.nk.mark_compromised(*id);
            }
        }
        self.relay.closed.insert(batch_id);
        self.relay.held.retain(|x| x.hop.batch_id != batch_id);
        if let Some(b) = self.relay.batches.get_mut(&batch_id) {
            b.done = true;
        }
        if self.role.kind == NodeKind::TrustedNode {
            let to = self.right_id();
            self.send_relay(out, to, Payload::TransferAck { batch_id, missing_nk_ids });
        }
    }

    fn expire(&mut self, out: &mut Vec<Envelope>) {
        let timing = self.setup.timing;
        while let Some(front) = self.relay.held.front() {
            if self.now.saturating_sub(front.since) <= timing.hold_timeout_us {
                break;
            }
            let h = self.relay.held.pop_front().expect("front exists");
            self.counters.abandoned_hops += 1;
            let code = if h.nk.is_some() { ErrorCode::KeyExhausted } else { ErrorCode::Timeout };
            self.fail_hop(&h.hop, code, out);
        }
        if self.role.kind == NodeKind::EdgeNode {
            let due: Vec<u64> = self
                .relay
                .batches
                .iter()
                .filter(|(_, b)| !b.done && self.now.saturating_sub(b.started) > timing.en_batch_timeout_us)
                .map(|(id, _)| *id)
                .collect();
            for id in due {
                self.en_check_complete(id, true, out);
            }
        }
        let nm_due = self
            .nm
            .as_ref()
            .and_then(|n| n.in_flight.as_ref())
            .filter(|f| self.now.saturating_sub(f.started) > timing.nm_batch_timeout_us)
            .map(|f| f.h as usize);
        if let Some(h) = nm_due {
            let all: Vec<usize> = (0..h).collect();
            self.close_batch(0, &all, true, out);
        }
    }

    fn stats_report(&self) -> StatsReport {
        StatsReport {
            node_id: self.setup.id,
            timestamp_ns: self.ts(),
            available_nk: self.nk.available() as u64,
            used_nk: self.nk.count(KeyStatus::Used) as u64,
            links: [self.left.as_ref(), self.right.as_ref()].into_iter().flatten().map(LinkEnd::report).collect(),
        }
    }

    fn report_tick(&mut self, out: &mut Vec<Envelope>) {
        let r = self.stats_report();
        let mut points: Vec<SeriesPoint> = r
            .links
            .iter()
            .map(|l| {
                SeriesPoint::new("keys", r.timestamp_ns)
                    .tag("node", &self.name)
                    .tag("link", l.link_index)
                    .field("available_qk", l.available_qk)
                    .field("used_qk", l.used_qk)
                    .field("compromised_qk", l.compromised_qk)
                    .opt_field("skr_bps", l.skr_bps)
                    .opt_field("qber_pct", l.qber_pct)
            })
            .collect();
        let mut nk = SeriesPoint::new("network_keys", r.timestamp_ns)
            .tag("node", &self.name)
            .field("available_nk", r.available_nk)
            .field("used_nk", r.used_nk)
            .field("compromised_nk", self.nk.count(KeyStatus::Compromised));
        if let Some(nm) = &self.nm {
            nk = nk.field("transfers_completed", nm.transfers_completed).field("keys_failed", nm.keys_failed);
        }
        points.push(nk);
        for p in points {
            self.record(p);
        }
        if self.nm.is_some() {
            return;
        }
        self.report_buffer.push_back(r);
        if self.report_up {
            self.flush_reports(out);
        } else {
            self.counters.reports_buffered += 1;
        }
    }

    fn flush_reports(&mut self, out: &mut Vec<Envelope>) {
        while let Some(r) = self.report_buffer.pop_front() {
            self.counters.reports_sent += 1;
            out.push(Envelope { to: 0, kind: ChannelKind::Report, payload: Payload::StatsReport(r) });
        }
    }

    /// Serializable copy of all durable state.
    pub fn snapshot(&self) -> NodeSnapshot {
        let end = |e: &LinkEnd| LinkEndSnapshot {
            table_hex: hex::encode(e.table.to_bytes()),
            reader: e.reader.clone(),
            status: e.status,
        };
        NodeSnapshot {
            now: self.now,
            left: self.left.as_ref().map(end),
            right: self.right.as_ref().map(end),
            nk_hex: hex::encode(self.nk.to_bytes()),
            channels: self.channels.iter().map(|((p, k), c)| (*p, *k, c.state().clone())).collect(),
            nm: self.nm.clone(),
            relay: self.relay.clone(),
            report_up: self.report_up,
            report_buffer: self.report_buffer.iter().cloned().collect(),
            counters: self.counters.clone(),
        }
    }

    /// Reinstates state saved by [`Node::snapshot`]. Outgoing sequence
    /// numbers jump ahead so frames sent after the snapshot was taken can
    /// never make the peer reject the restarted node as a replayer.
    pub fn restore(&mut self, snap: NodeSnapshot) -> Result<(), KeyError> {
        const SEQUENCE_GAP: u64 = 1 << 20;
        fn load(end: &mut LinkEnd, s: LinkEndSnapshot) -> Result<(), KeyError> {
            let bytes = hex::decode(&s.table_hex).map_err(|e| KeyError::Corrupt(e.to_string()))?;
            end.table = KeyTable::from_bytes(&bytes)?;
            end.reader = s.reader;
            end.status = s.status;
            Ok(())
        }
        if let (Some(end), Some(s)) = (self.left.as_mut(), snap.left) {
            load(end, s)?;
        }
        if let (Some(end), Some(s)) = (self.right.as_mut(), snap.right) {
            load(end, s)?;
        }
        let nk = hex::decode(&snap.nk_hex).map_err(|e| KeyError::Corrupt(e.to_string()))?;
        self.nk = KeyTable::from_bytes(&nk)?;
        for (peer, kind, mut state) in snap.channels {
            if let Some(ch) = self.channels.get_mut(&(peer, kind)) {
                state.next_send += SEQUENCE_GAP;
                *ch = Channel::resume(*ch.psk(), state);
            }
        }
        if let (Some(nm), Some(source)) = (snap.nm, self.source.as_mut()) {
            *source = NetworkKeySource::with_counter(self.setup.nk_seed, nm.source_counter);
            self.nm = Some(nm);
        }
        self.now = snap.now;
        self.relay = snap.relay;
        self.report_up = snap.report_up;
        self.report_buffer = snap.report_buffer.into();
        self.counters = snap.counters;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkEndSnapshot {
    table_hex: String,
    reader: FeedReader,
    status: LinkStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeSnapshot {
    now: Micros,
    left: Option<LinkEndSnapshot>,
    right: Option<LinkEndSnapshot>,
    nk_hex: String,
    channels: Vec<(NodeId, ChannelKind, ChannelState)>,
    nm: Option<NmState>,
    relay: RelayState,
    report_up: bool,
    report_buffer: Vec<StatsReport>,
    counters: NodeCounters,
}
