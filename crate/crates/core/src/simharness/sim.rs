//! Single-threaded discrete-event run of a whole chain on a virtual clock.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::scenario::{secs_to_us, Fault, OutageScope, Scenario};
use crate::keycore::{Block, KeyStatus, KeyTable};
use crate::qkdlink::{FeedMedium, LinkEmulator, MemoryMedium};
use crate::relayproto::{
    BatchOutcome, ChannelKind, ChannelStats, Envelope, Input, KeyOp, LinkEnd, Micros, Node, NodeCounters, NodeId,
    NodeSetup, TriggerRecord, UsageEvent, WireLogEntry, SECOND,
};
use crate::telemetry::{summarize, SeriesPoint, TelemetryStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invariant violated at t = {time_s} s: {what}")]
    Invariant { time_s: f64, what: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Period of the consistency checkpoints, in virtual seconds.
    pub checkpoint_s: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { checkpoint_s: 60.0 }
    }
}

/// Deterministic per-channel authentication key.
pub fn derive_psk(seed: u64, label: &str, index: u32) -> Block {
    let mut h = Sha256::new();
    h.update(b"qkd-relay-psk");
    h.update(label.as_bytes());
    h.update(seed.to_be_bytes());
    h.update(index.to_be_bytes());
    h.finalize().into()
}

pub fn derive_nk_seed(seed: u64) -> Block {
    let mut h = Sha256::new();
    h.update(b"qkd-relay-network-keys");
    h.update(seed.to_be_bytes());
    h.finalize().into()
}

/// Setup of node `k` for a scenario; shared by sim and real mode.
pub fn node_setup(s: &Scenario, k: NodeId) -> NodeSetup {
    let n = s.n_links();
    NodeSetup {
        id: k,
        n_links: n,
        policy: s.policy,
        timing: s.timing,
        nk_seed: derive_nk_seed(s.seed),
        relay_psks: (1..=n as u32).map(|l| derive_psk(s.seed, "relay", l)).collect(),
        report_psks: (0..=n as u32).map(|k| derive_psk(s.seed, "report", k)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSummary {
    pub index: u8,
    pub protocol: String,
    pub cycles: u64,
    pub delivered_keys: u64,
    pub skr_bps: Option<Stat>,
    pub qber_pct: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub name: String,
    pub nk_records: usize,
    pub nk_available: usize,
    pub nk_compromised: usize,
    /// Digest over ids and bits of the non-compromised network keys.
    pub nk_set_digest: String,
    pub table_digests: BTreeMap<String, String>,
    pub counters: NodeCounters,
    pub channels: BTreeMap<String, ChannelStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub duration_s: f64,
    /// Intact network keys held by the EN at the end of the scenario window.
    pub nk_at_en: u64,
    /// `nk_at_en / duration_s`, keys per second.
    pub nk_rate: f64,
    /// Same count after in-flight traffic drained.
    pub nk_at_en_final: u64,
    pub quiesced: bool,
    pub tampered_hops: u64,
    pub corrupted_frames: u64,
    pub links: Vec<LinkSummary>,
    pub nodes: Vec<NodeSummary>,
    pub triggers: Vec<TriggerRecord>,
    pub outcomes: Vec<BatchOutcome>,
    pub event_counts: BTreeMap<String, u64>,
}

impl RunSummary {
    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable")))
    }

    pub fn keys_failed(&self) -> u64 {
        self.outcomes.iter().map(|o| o.missing as u64).sum()
    }
}

/// Final key tables of one node.
#[derive(Debug, Clone)]
pub struct NodeTables {
    pub name: String,
    pub nk: KeyTable,
    pub links: Vec<KeyTable>,
}

#[derive(Debug)]
pub struct SimReport {
    pub summary: RunSummary,
    pub telemetry: TelemetryStore,
    pub usage: Vec<UsageEvent>,
    pub wire_log: Vec<WireLogEntry>,
    pub tables: Vec<NodeTables>,
}

impl SimReport {
    pub fn node(&self, name: &str) -> Option<&NodeTables> {
        self.tables.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Class {
    LinkCycle,
    Outage,
    Deliver,
    Poll,
    Report,
}

#[derive(Debug)]
enum Event {
    LinkCycle(usize),
    OutageStart(usize),
    OutageEnd(usize),
    Deliver { from: NodeId, to: NodeId, kind: ChannelKind, bytes: Vec<u8> },
    Poll(NodeId),
    Report(NodeId),
}

struct Sim<'a> {
    sc: &'a Scenario,
    queue: BTreeMap<(Micros, Class, u64), Event>,
    seq: u64,
    now: Micros,
    nodes: Vec<Node>,
    emulators: Vec<LinkEmulator>,
    relay_down: BTreeMap<(NodeId, NodeId), u32>,
    report_down: BTreeMap<NodeId, u32>,
    held: BTreeMap<(NodeId, NodeId), Vec<(NodeId, NodeId, ChannelKind, Vec<u8>)>>,
    frame_counts: BTreeMap<(NodeId, NodeId), u64>,
    corrupt: Vec<(NodeId, NodeId, u64)>,
    corrupted: u64,
    telemetry: TelemetryStore,
    usage: Vec<UsageEvent>,
    wire_log: Vec<WireLogEntry>,
    counts: BTreeMap<String, u64>,
}

fn pair(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    (a.min(b), a.max(b))
}

impl<'a> Sim<'a> {
    fn new(sc: &'a Scenario) -> Self {
        let n = sc.n_links() as usize;
        let mut left_media: Vec<Option<MemoryMedium>> = vec![None; n + 1];
        let mut right_media: Vec<Option<MemoryMedium>> = vec![None; n + 1];
        let mut emulators = Vec::new();
        for p in &sc.links {
            let l = p.link_index as usize;
            let (a, b) = (MemoryMedium::new(), MemoryMedium::new());
            // node l-1 holds the left end of link l, node l the right end
            right_media[l - 1] = Some(a.clone());
            left_media[l] = Some(b.clone());
            let media: Vec<Box<dyn FeedMedium>> = vec![Box::new(a), Box::new(b)];
            emulators.push(LinkEmulator::new(p.clone(), LinkEmulator::seed_for(sc.seed, p.link_index), media));
        }
        let nodes = (0..=n)
            .map(|k| {
                let setup = node_setup(sc, k as NodeId);
                let role = setup.role();
                let end = |link: Option<u8>, m: &mut Option<MemoryMedium>| {
                    link.map(|l| {
                        let mode = sc.links[l as usize - 1].delivery;
                        LinkEnd::new(l, mode, Box::new(m.take().expect("one medium per end")))
                    })
                };
                let left = end(role.left_link, &mut left_media[k]);
                let right = end(role.right_link, &mut right_media[k]);
                Node::new(setup, left, right)
            })
            .collect();
        let mut sim = Sim {
            sc,
            queue: BTreeMap::new(),
            seq: 0,
            now: 0,
            nodes,
            emulators,
            relay_down: BTreeMap::new(),
            report_down: BTreeMap::new(),
            held: BTreeMap::new(),
            frame_counts: BTreeMap::new(),
            corrupt: Vec::new(),
            corrupted: 0,
            telemetry: TelemetryStore::new(),
            usage: Vec::new(),
            wire_log: Vec::new(),
            counts: BTreeMap::new(),
        };
        for f in &sc.faults {
            match *f {
                Fault::TamperHop { node, batch, index } => {
                    sim.nodes[node as usize].faults_mut().tamper.insert((batch, index));
                }
                Fault::CorruptFrame { from, to, nth } => sim.corrupt.push((from, to, nth)),
            }
        }
        sim
    }

    fn schedule(&mut self, t: Micros, class: Class, ev: Event) {
        self.seq += 1;
        self.queue.insert((t, class, self.seq), ev);
    }

    fn schedule_if_in_run(&mut self, t: Micros, class: Class, ev: Event) {
        if t <= self.sc.duration_us() {
            self.schedule(t, class, ev);
        }
    }

    fn bump(&mut self, what: &str) {
        *self.counts.entry(what.to_string()).or_default() += 1;
    }

    fn seed_events(&mut self) {
        for i in 0..self.emulators.len() {
            let t = secs_to_us(self.emulators[i].next_cycle_time());
            self.schedule_if_in_run(t, Class::LinkCycle, Event::LinkCycle(i));
        }
        for (i, o) in self.sc.outages.iter().enumerate() {
            // a zero-length outage has no effect by definition
            if o.end_s > o.start_s {
                self.schedule(secs_to_us(o.start_s), Class::Outage, Event::OutageStart(i));
                self.schedule(secs_to_us(o.end_s), Class::Outage, Event::OutageEnd(i));
            }
        }
        let t = self.sc.timing;
        for k in 0..self.nodes.len() as NodeId {
            self.schedule_if_in_run(t.poll_period_us, Class::Poll, Event::Poll(k));
            self.schedule_if_in_run(t.report_period_us, Class::Report, Event::Report(k));
        }
    }

    fn dispatch(&mut self, from: NodeId, envs: Vec<Envelope>) {
        for env in envs {
            let Some(mut bytes) = self.nodes[from as usize].seal(&env) else { continue };
            let to = env.to;
            if env.kind == ChannelKind::Relay {
                let c = self.frame_counts.entry((from, to)).or_default();
                *c += 1;
                let n = *c;
                if self.corrupt.iter().any(|&(f, t, nth)| f == from && t == to && nth == n) {
                    let mid = bytes.len() / 2;
                    bytes[mid] ^= 0x04;
                    self.corrupted += 1;
                }
                if self.relay_down.get(&pair(from, to)).copied().unwrap_or(0) > 0 {
                    self.held.entry(pair(from, to)).or_default().push((from, to, env.kind, bytes));
                    continue;
                }
            }
            let t = self.now + self.sc.hop_delay_us();
            self.schedule(t, Class::Deliver, Event::Deliver { from, to, kind: env.kind, bytes });
        }
        let node = &mut self.nodes[from as usize];
        self.usage.extend(node.take_usage());
        self.wire_log.extend(node.take_wire_log());
    }

    fn handle(&mut self, k: NodeId, input: Input) {
        let out = self.nodes[k as usize].handle(self.now, input);
        self.dispatch(k, out);
    }

    fn outage(&mut self, i: usize, start: bool) {
        let o = self.sc.outages[i].clone();
        match o.scope {
            OutageScope::Relay => {
                let key = pair(o.nodes[0], o.nodes[1]);
                let c = self.relay_down.entry(key).or_default();
                if start {
                    *c += 1;
                } else {
                    *c -= 1;
                    if *c == 0 {
                        let t = self.now + self.sc.hop_delay_us();
                        for (from, to, kind, bytes) in self.held.remove(&key).unwrap_or_default() {
                            self.schedule(t, Class::Deliver, Event::Deliver { from, to, kind, bytes });
                        }
                    }
                }
            }
            OutageScope::Report => {
                for k in o.nodes {
                    let c = self.report_down.entry(k).or_default();
                    let edge = if start {
                        *c += 1;
                        *c == 1
                    } else {
                        *c -= 1;
                        *c == 0
                    };
                    if edge {
                        self.handle(k, Input::ReportLink { up: !start });
                    }
                }
            }
        }
    }

    fn link_cycle(&mut self, i: usize) {
        let em = &mut self.emulators[i];
        let cycle = em.run_cycle(&self.sc.disturbances);
        let link = em.profile().link_index;
        let p = SeriesPoint::new("link", self.now * 1_000)
            .tag("link", link)
            .field("skr_bps", cycle.skr_bps)
            .field("qber_pct", cycle.qber_pct)
            .field("key_bits", cycle.key_bits.len())
            .field("keys_total", em.delivered_keys());
        let next = secs_to_us(em.next_cycle_time());
        let _ = self.telemetry.record(p);
        self.schedule_if_in_run(next, Class::LinkCycle, Event::LinkCycle(i));
    }

    fn violation(&self, what: String) -> SimError {
        SimError::Invariant { time_s: self.now as f64 / SECOND as f64, what }
    }

    fn checkpoint(&self) -> Result<(), SimError> {
        for node in &self.nodes {
            let tables = std::iter::once(node.network_keys())
                .chain(node.left().map(LinkEnd::table))
                .chain(node.right().map(LinkEnd::table));
            for t in tables {
                if let Some(r) = t.records().iter().find(|r| !r.is_intact()) {
                    return Err(self.violation(format!("{} {}: record {} fails its digest", node.name(), t.scope(), r.id())));
                }
            }
        }
        // both ends of a link agree on every id they both hold
        for k in 1..self.nodes.len() {
            let (a, b) = (&self.nodes[k - 1], &self.nodes[k]);
            let (Some(ra), Some(lb)) = (a.right(), b.left()) else { continue };
            let (ta, tb) = (ra.table(), lb.table());
            let common = ta.len().min(tb.len());
            for (x, y) in ta.records()[..common].iter().zip(&tb.records()[..common]) {
                if x.id() != y.id() || x.bits() != y.bits() {
                    return Err(self.violation(format!("link {} ends disagree on key {}", ra.link, x.id())));
                }
            }
        }
        let r = self.sc.policy.reserve() as u64;
        let t = self.sc.policy.threshold() as u64;
        for trig in self.nodes[0].triggers() {
            let min = trig.counts.iter().copied().min().unwrap_or(0);
            if min < t || trig.h as u64 != min - r {
                return Err(self.violation(format!("batch {} started with h = {} from counts {:?}", trig.batch_id, trig.h, trig.counts)));
            }
        }
        Ok(())
    }

    fn en_intact(&self) -> u64 {
        let t = self.nodes.last().expect("nodes").network_keys();
        (t.len() - t.count(KeyStatus::Compromised)) as u64
    }

    fn run(mut self, opts: &SimOptions) -> Result<SimReport, SimError> {
        self.seed_events();
        let duration = self.sc.duration_us();
        let step = secs_to_us(opts.checkpoint_s).max(1);
        let mut next_check = step;
        let mut nk_at_en = None;
        while let Some(((t, _, _), ev)) = self.queue.pop_first() {
            if t > duration && nk_at_en.is_none() {
                nk_at_en = Some(self.en_intact());
                for n in &mut self.nodes {
                    n.set_draining(true);
                }
            }
            while t > next_check && next_check <= duration {
                self.checkpoint()?;
                next_check += step;
            }
            self.now = t;
            match ev {
                Event::LinkCycle(i) => {
                    self.bump("link_cycle");
                    self.link_cycle(i);
                }
                Event::OutageStart(i) => {
                    self.bump("outage_start");
                    self.outage(i, true);
                }
                Event::OutageEnd(i) => {
                    self.bump("outage_end");
                    self.outage(i, false);
                }
                Event::Deliver { from, to, kind, bytes } => {
                    self.bump("deliver");
                    self.handle(to, Input::Wire { from, kind, bytes });
                }
                Event::Poll(k) => {
                    self.bump("poll");
                    self.handle(k, Input::Poll);
                    let next = t + self.sc.timing.poll_period_us;
                    self.schedule_if_in_run(next, Class::Poll, Event::Poll(k));
                }
                Event::Report(k) => {
                    self.bump("report");
                    self.handle(k, Input::Report);
                    let next = t + self.sc.timing.report_period_us;
                    self.schedule_if_in_run(next, Class::Report, Event::Report(k));
                }
            }
        }
        let nk_at_en = nk_at_en.unwrap_or_else(|| self.en_intact());
        self.checkpoint()?;
        self.finish(nk_at_en)
    }

    fn finish(mut self, nk_at_en: u64) -> Result<SimReport, SimError> {
        let quiesced = !self.nodes[0].batch_in_flight()
            && self.nodes.iter().all(|n| n.held_hops() == 0 && n.buffered_reports() == 0)
            && self.held.values().all(Vec::is_empty);
        if quiesced {
            let digests: Vec<Block> = self.nodes.iter().map(|n| n.network_keys().key_set_digest()).collect();
            if digests.iter().any(|d| *d != digests[0]) {
                return Err(self.violation("network key sets differ between nodes after quiescing".to_string()));
            }
        }
        if self.sc.faults.is_empty() {
            self.check_consumption()?;
        }
        let bad_auth: u64 = self
            .nodes
            .iter()
            .flat_map(|n| n.channel_states().map(|(_, s)| s.stats.bad_auth))
            .sum();
        if bad_auth != self.corrupted {
            return Err(self.violation(format!("{bad_auth} frames failed authentication, {} were corrupted", self.corrupted)));
        }
        for n in &self.nodes {
            if n.counters().telemetry_rejected > 0 {
                return Err(self.violation(format!("{} produced out-of-order telemetry", n.name())));
            }
        }

        let mut links = Vec::new();
        for em in &self.emulators {
            let p = em.profile();
            let key = crate::telemetry::SeriesKey::new("link", &[("link", &p.link_index.to_string())]);
            let stat = |field: &str| {
                summarize(&self.telemetry.values(&key, field)).ok().map(|s| Stat { mean: s.mean, std: s.std, n: s.n })
            };
            links.push(LinkSummary {
                index: p.link_index,
                protocol: p.protocol.name().to_string(),
                cycles: em.cycles(),
                delivered_keys: em.delivered_keys(),
                skr_bps: stat("skr_bps"),
                qber_pct: stat("qber_pct"),
            });
        }
        let n_links = self.sc.n_links();
        let mut nodes = Vec::new();
        let mut tables = Vec::new();
        for n in &self.nodes {
            let nk = n.network_keys();
            let mut table_digests = BTreeMap::new();
            table_digests.insert(nk.scope().to_string(), hex::encode(nk.digest()));
            let mut link_tables = Vec::new();
            for end in [n.left(), n.right()].into_iter().flatten() {
                table_digests.insert(end.table().scope().to_string(), hex::encode(end.table().digest()));
                link_tables.push(end.table().clone());
            }
            nodes.push(NodeSummary {
                name: n.name().to_string(),
                nk_records: nk.len(),
                nk_available: nk.available(),
                nk_compromised: nk.count(KeyStatus::Compromised),
                nk_set_digest: hex::encode(nk.key_set_digest()),
                table_digests,
                counters: n.counters().clone(),
                channels: n
                    .channel_states()
                    .map(|((peer, kind), s)| {
                        let kind = match kind {
                            ChannelKind::Relay => "relay",
                            ChannelKind::Report => "report",
                        };
                        (format!("{kind}:{}", crate::relayproto::node_name(*peer, n_links)), s.stats.clone())
                    })
                    .collect(),
            });
            tables.push(NodeTables { name: n.name().to_string(), nk: nk.clone(), links: link_tables });
        }
        let tampered_hops = self.sc.faults.iter().filter(|f| matches!(f, Fault::TamperHop { .. })).count() as u64;
        let summary = RunSummary {
            scenario: self.sc.name.clone(),
            seed: self.sc.seed,
            duration_s: self.sc.duration_s,
            nk_at_en,
            nk_rate: if self.sc.duration_s > 0.0 { nk_at_en as f64 / self.sc.duration_s } else { 0.0 },
            nk_at_en_final: self.en_intact(),
            quiesced,
            tampered_hops,
            corrupted_frames: self.corrupted,
            links,
            nodes,
            triggers: self.nodes[0].triggers().to_vec(),
            outcomes: self.nodes[0].outcomes().to_vec(),
            event_counts: self.counts.clone(),
        };
        let mut telemetry = std::mem::take(&mut self.telemetry);
        for n in &mut self.nodes {
            let store = std::mem::take(n.telemetry_mut());
            telemetry.absorb(store);
        }
        Ok(SimReport { summary, telemetry, usage: self.usage, wire_log: self.wire_log, tables })
    }

    /// Each completed clean batch used exactly `h` keys of every link.
    fn check_consumption(&self) -> Result<(), SimError> {
        let mut used: BTreeMap<(u64, String), u32> = BTreeMap::new();
        for u in self.usage.iter().filter(|u| u.op == KeyOp::Encrypt) {
            *used.entry((u.batch_id, u.scope.clone())).or_default() += 1;
        }
        for o in self.nodes[0].outcomes().iter().filter(|o| o.missing == 0 && !o.timed_out) {
            for l in 1..=self.sc.n_links() {
                let scope = format!("qk{l}");
                let n = used.get(&(o.batch_id, scope.clone())).copied().unwrap_or(0);
                if n != o.h {
                    return Err(self.violation(format!("batch {} used {n} {scope} keys for h = {}", o.batch_id, o.h)));
                }
            }
        }
        Ok(())
    }
}

/// Runs a scenario to completion. Identical inputs give identical reports.
pub fn run_sim(scenario: &Scenario, opts: &SimOptions) -> Result<SimReport, SimError> {
    Sim::new(scenario).run(opts)
}
