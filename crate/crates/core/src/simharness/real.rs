//! Real mode: one node per process, classical channels over TCP, link
//! emulators writing key files, virtual time derived from a shared epoch.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use super::bundle::{TABLE_DIR, USAGE_DIR, WIRE_DIR};
use super::scenario::{load_scenario, secs_to_us, Scenario};
use super::sim::node_setup;
use crate::keycore::{Block, KeyError, KEY_BYTES};
use crate::qkdlink::{DeliveryMode, FeedMedium, FileMedium, LinkEmulator};
use crate::relayproto::{
    frame_len, node_name, BatchOutcome, ChannelKind, Envelope, Input, LinkEnd, Micros, Node, NodeCounters, NodeId,
    NodeKind, NodeSnapshot, TransferPolicy, TriggerRecord,
};
use crate::telemetry::TelemetryStore;

#[derive(Debug, Error)]
pub enum NodeRunError {
    #[error("invalid node configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error("saved state unusable: {0}")]
    State(String),
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> NodeRunError {
    let context = context.into();
    move |source| NodeRunError::Io { context, source }
}

/// Resolved settings of one real-mode node process.
#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub node_id: NodeId,
    pub kind: NodeKind,
    pub scenario: Scenario,
    pub listen_addr: String,
    pub left_peer: Option<String>,
    pub right_peer: Option<String>,
    pub nm_addr: Option<String>,
    pub relay_psks: Vec<Block>,
    pub report_psks: Vec<Block>,
    pub policy: TransferPolicy,
    pub feed_dir: PathBuf,
    pub state_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Wall-clock instant (ms since the Unix epoch) of virtual time zero.
    pub epoch_ms: u64,
    /// Wall seconds to keep serving the network after the scenario ends.
    pub drain_s: f64,
}

fn psk(e: &mut Vec<String>, what: &str, v: &Value) -> Option<Block> {
    let bytes = v.as_str().and_then(|s| hex::decode(s).ok());
    match bytes {
        Some(b) if b.len() == KEY_BYTES => Some(b.try_into().expect("32 bytes")),
        _ => {
            e.push(format!("{what}: expected {} hex characters", KEY_BYTES * 2));
            None
        }
    }
}

fn psk_list(e: &mut Vec<String>, t: &Table, key: &str) -> Vec<Block> {
    match t.get(key) {
        Some(Value::Array(a)) => a.iter().enumerate().filter_map(|(i, v)| psk(e, &format!("psk.{key}[{i}]"), v)).collect(),
        _ => {
            e.push(format!("psk: missing list `{key}`"));
            Vec::new()
        }
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl NodeConfig {
    /// Reads a node configuration file. Relative paths inside it resolve
    /// against the working directory.
    pub fn load(path: &Path) -> Result<Self, NodeRunError> {
        let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        Self::parse(&text, Path::new(""))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, NodeRunError> {
        let root: Table = text.parse().map_err(|e| NodeRunError::Config(vec![format!("not valid TOML: {e}")]))?;
        let mut e = Vec::new();
        let allowed = [
            "role",
            "node_id",
            "scenario",
            "listen_addr",
            "left_peer",
            "right_peer",
            "nm_addr",
            "feed_dir",
            "state_dir",
            "out_dir",
            "drain_s",
            "psk",
            "policy",
        ];
        for k in root.keys() {
            if !allowed.contains(&k.as_str()) {
                e.push(format!("unknown key `{k}`"));
            }
        }
        let s = |e: &mut Vec<String>, k: &str, req: bool| match root.get(k) {
            Some(Value::String(v)) => Some(v.clone()),
            Some(_) => {
                e.push(format!("`{k}` must be a string"));
                None
            }
            None => {
                if req {
                    e.push(format!("missing required field `{k}`"));
                }
                None
            }
        };
        let kind = s(&mut e, "role", true).and_then(|r| {
            NodeKind::parse(&r).or_else(|| {
                e.push(format!("unknown role `{r}`"));
                None
            })
        });
        let node_id = match root.get("node_id") {
            Some(Value::Integer(i)) if *i >= 0 => Some(*i as NodeId),
            _ => {
                e.push("`node_id` must be a non-negative integer".to_string());
                None
            }
        };
        let scenario_path = s(&mut e, "scenario", true).map(|p| base.join(p));
        let listen_addr = s(&mut e, "listen_addr", true);
        let left_peer = s(&mut e, "left_peer", false);
        let right_peer = s(&mut e, "right_peer", false);
        let nm_addr = s(&mut e, "nm_addr", false);
        let dir = |e: &mut Vec<String>, k: &str, default: &str| base.join(s(e, k, false).unwrap_or_else(|| default.to_string()));
        let feed_dir = dir(&mut e, "feed_dir", "feeds");
        let state_dir = dir(&mut e, "state_dir", "state");
        let out_dir = dir(&mut e, "out_dir", "out");
        let drain_s = root.get("drain_s").and_then(|v| v.as_float().or(v.as_integer().map(|i| i as f64))).unwrap_or(2.0);

        let (mut relay_psks, mut report_psks) = (Vec::new(), Vec::new());
        match root.get("psk") {
            Some(Value::Table(t)) => {
                relay_psks = psk_list(&mut e, t, "relay");
                report_psks = psk_list(&mut e, t, "report");
            }
            _ => e.push("missing [psk] table".to_string()),
        }
        let mut policy = None;
        if let Some(v) = root.get("policy") {
            let th = v.get("threshold").and_then(Value::as_integer);
            let re = v.get("reserve").and_then(Value::as_integer);
            match (th, re) {
                (Some(th), Some(re)) if th >= 0 && re >= 0 => match TransferPolicy::new(th as usize, re as usize) {
                    Ok(p) => policy = Some(p),
                    Err(err) => e.push(format!("policy: {err}")),
                },
                _ => e.push("policy: needs integer `threshold` and `reserve`".to_string()),
            }
        }
        let scenario = match &scenario_path {
            Some(p) => match fs::read_to_string(p) {
                Ok(text) => match load_scenario(&text) {
                    Ok(sc) => Some(sc),
                    Err(errs) => {
                        e.extend(errs.into_iter().map(|x| format!("scenario {}: {x}", p.display())));
                        None
                    }
                },
                Err(err) => {
                    e.push(format!("scenario {}: {err}", p.display()));
                    None
                }
            },
            None => None,
        };
        if let (Some(sc), Some(id), Some(kind)) = (&scenario, node_id, kind) {
            let n = sc.n_links() as usize;
            if id as usize > n {
                e.push(format!("node_id {id} outside a chain of {} nodes", n + 1));
            } else if sc.nodes[id as usize].kind != kind {
                e.push(format!("role does not match scenario node {id}"));
            }
            if relay_psks.len() != n {
                e.push(format!("psk.relay needs {n} entries"));
            }
            if report_psks.len() != n + 1 {
                e.push(format!("psk.report needs {} entries", n + 1));
            }
            if id > 0 && (left_peer.is_none() || nm_addr.is_none()) {
                e.push("nodes other than the NM need `left_peer` and `nm_addr`".to_string());
            }
        }
        if !e.is_empty() {
            return Err(NodeRunError::Config(e));
        }
        let scenario = scenario.expect("checked");
        Ok(NodeConfig {
            node_id: node_id.expect("checked"),
            kind: kind.expect("checked"),
            policy: policy.unwrap_or(scenario.policy),
            scenario,
            listen_addr: listen_addr.expect("checked"),
            left_peer,
            right_peer,
            nm_addr,
            relay_psks,
            report_psks,
            feed_dir,
            state_dir,
            out_dir,
            epoch_ms: now_ms(),
            drain_s,
        })
    }

    pub fn name(&self) -> String {
        node_name(self.node_id, self.scenario.n_links())
    }
}

/// Renders the configuration file of node `k` for a scenario, with every
/// path placed under `dir`.
pub fn node_config_text(sc: &Scenario, k: NodeId, dir: &Path, scenario_file: &str) -> String {
    use std::fmt::Write as _;
    let setup = node_setup(sc, k);
    let addr = |i: usize| sc.nodes.get(i).and_then(|n| n.listen_addr.clone()).unwrap_or_else(|| format!("127.0.0.1:{}", 7400 + i));
    let role = match sc.nodes[k as usize].kind {
        NodeKind::NetworkManager => "nm",
        NodeKind::TrustedNode => "tn",
        NodeKind::EdgeNode => "en",
    };
    let name = node_name(k, sc.n_links());
    let mut o = String::new();
    let p = |x: &str| dir.join(x).to_string_lossy().replace('\\', "/");
    let _ = writeln!(o, "role = {role:?}\nnode_id = {k}\nscenario = {:?}", p(scenario_file));
    let _ = writeln!(o, "listen_addr = {:?}", addr(k as usize));
    if k > 0 {
        let _ = writeln!(o, "left_peer = {:?}\nnm_addr = {:?}", addr(k as usize - 1), addr(0));
    }
    if (k as usize) < sc.nodes.len() - 1 {
        let _ = writeln!(o, "right_peer = {:?}", addr(k as usize + 1));
    }
    let _ = writeln!(o, "feed_dir = {:?}\nstate_dir = {:?}\nout_dir = {:?}", p("feeds"), p(&format!("state/{name}")), p("out"));
    let _ = writeln!(o, "\n[policy]\nthreshold = {}\nreserve = {}", sc.policy.threshold(), sc.policy.reserve());
    let list = |v: &[Block]| v.iter().map(|b| format!("{:?}", hex::encode(b))).collect::<Vec<_>>().join(",\n  ");
    let _ = writeln!(o, "\n[psk]\nrelay = [\n  {}\n]\nreport = [\n  {}\n]", list(&setup.relay_psks), list(&setup.report_psks));
    o
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRunSummary {
    pub node: String,
    pub epoch_ms: u64,
    pub virtual_end_s: f64,
    pub resumed: bool,
    pub nk_records: usize,
    pub nk_set_digest: String,
    pub triggers: Vec<TriggerRecord>,
    pub outcomes: Vec<BatchOutcome>,
    pub counters: NodeCounters,
}

#[derive(Serialize, Deserialize)]
struct SavedState {
    epoch_ms: u64,
    emulator_cycles: Vec<(u8, u64)>,
    node: NodeSnapshot,
}

enum NetEvent {
    Dialed { conn: u64, peer: NodeId, kind: ChannelKind, writer: Sender<Vec<u8>> },
    Accepted { conn: u64, writer: Sender<Vec<u8>> },
    Frame { conn: u64, bytes: Vec<u8> },
    Closed { conn: u64 },
}

fn read_frame(stream: &mut TcpStream) -> io::Result<Vec<u8>> {
    let mut prefix = [0u8; 4];
    stream.read_exact(&mut prefix)?;
    let n = frame_len(prefix).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let mut frame = vec![0u8; n];
    frame[..4].copy_from_slice(&prefix);
    stream.read_exact(&mut frame[4..])?;
    Ok(frame)
}

/// Starts reader and writer threads for a connected socket. Returns the
/// writer queue and the reader's join handle.
fn spawn_io(
    stream: TcpStream,
    conn: u64,
    tx: Sender<NetEvent>,
    announce: impl FnOnce(Sender<Vec<u8>>) -> NetEvent,
) -> io::Result<thread::JoinHandle<()>> {
    stream.set_nodelay(true)?;
    let mut reader = stream.try_clone()?;
    let mut writer = stream;
    let (wtx, wrx) = mpsc::channel::<Vec<u8>>();
    let closer = tx.clone();
    thread::spawn(move || {
        for bytes in wrx {
            if writer.write_all(&bytes).is_err() {
                let _ = writer.shutdown(Shutdown::Both);
                let _ = closer.send(NetEvent::Closed { conn });
                return;
            }
        }
    });
    let _ = tx.send(announce(wtx));
    Ok(thread::spawn(move || {
        loop {
            match read_frame(&mut reader) {
                Ok(bytes) => {
                    if tx.send(NetEvent::Frame { conn, bytes }).is_err() {
                        break;
                    }
                }
                Err(_) => break,
            }
        }
        // a bad length prefix means we lost framing: drop the connection
        let _ = reader.shutdown(Shutdown::Both);
        let _ = tx.send(NetEvent::Closed { conn });
    }))
}

struct ConnIds(Arc<std::sync::atomic::AtomicU64>);

impl ConnIds {
    fn next(&self) -> u64 {
        self.0.fetch_add(1, Ordering::Relaxed)
    }
}

fn spawn_listener(listener: TcpListener, tx: Sender<NetEvent>, ids: Arc<std::sync::atomic::AtomicU64>, stop: Arc<AtomicBool>) {
    thread::spawn(move || {
        let _ = listener.set_nonblocking(true);
        while !stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nonblocking(false);
                    let conn = ConnIds(ids.clone()).next();
                    let _ = spawn_io(stream, conn, tx.clone(), |writer| NetEvent::Accepted { conn, writer });
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                Err(_) => thread::sleep(Duration::from_millis(20)),
            }
        }
    });
}

/// Keeps one outgoing connection alive, reconnecting with bounded
/// exponential backoff.
fn spawn_dialer(
    addr: String,
    peer: NodeId,
    kind: ChannelKind,
    tx: Sender<NetEvent>,
    ids: Arc<std::sync::atomic::AtomicU64>,
    stop: Arc<AtomicBool>,
) {
    thread::spawn(move || {
        let mut backoff = Duration::from_millis(25);
        while !stop.load(Ordering::Relaxed) {
            match TcpStream::connect(&addr) {
                Ok(stream) => {
                    backoff = Duration::from_millis(25);
                    let conn = ConnIds(ids.clone()).next();
                    match spawn_io(stream, conn, tx.clone(), |writer| NetEvent::Dialed { conn, peer, kind, writer }) {
                        Ok(reader) => {
                            let _ = reader.join();
                        }
                        Err(_) => thread::sleep(backoff),
                    }
                }
                Err(_) => {
                    thread::sleep(backoff);
                    backoff = (backoff * 2).min(Duration::from_secs(2));
                }
            }
        }
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Local {
    LinkCycle(usize),
    Poll,
    Report,
}

impl Local {
    fn class(self) -> u8 {
        match self {
            Local::LinkCycle(_) => 0,
            Local::Poll => 3,
            Local::Report => 4,
        }
    }
}

struct Conn {
    peer: Option<(NodeId, ChannelKind)>,
    writer: Sender<Vec<u8>>,
}

struct Driver {
    cfg: NodeConfig,
    node: Node,
    emulators: Vec<LinkEmulator>,
    schedule: BTreeMap<(Micros, u8, u64), Local>,
    seq: u64,
    conns: HashMap<u64, Conn>,
    routes: BTreeMap<(NodeId, ChannelKind), u64>,
    pending: BTreeMap<(NodeId, ChannelKind), VecDeque<Envelope>>,
    usage_out: BufWriter<File>,
    wire_out: BufWriter<File>,
    state_path: PathBuf,
    draining: bool,
}

fn feed_path(dir: &Path, node: &str, link: u8, mode: DeliveryMode) -> PathBuf {
    let ext = match mode {
        DeliveryMode::PacketStream => "bin",
        _ => "keys",
    };
    dir.join(format!("{node}-link{link}.{ext}"))
}

fn append_file(path: &Path, truncate: bool) -> Result<BufWriter<File>, NodeRunError> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(io_err(format!("creating {}", p.display())))?;
    }
    let f = OpenOptions::new()
        .create(true)
        .append(!truncate)
        .write(true)
        .truncate(truncate)
        .open(path)
        .map_err(io_err(format!("opening {}", path.display())))?;
    Ok(BufWriter::new(f))
}

impl Driver {
    fn vnow(&self) -> Micros {
        let wall = now_ms() as f64 - self.cfg.epoch_ms as f64;
        (wall.max(0.0) * 1_000.0 * self.cfg.scenario.time_compression) as Micros
    }

    /// Wall-clock ms at which virtual time `t` is reached.
    fn wall_at(&self, t: Micros) -> f64 {
        self.cfg.epoch_ms as f64 + t as f64 / 1_000.0 / self.cfg.scenario.time_compression
    }

    fn push(&mut self, t: Micros, ev: Local) {
        if t <= self.cfg.scenario.duration_us() {
            self.seq += 1;
            self.schedule.insert((t, ev.class(), self.seq), ev);
        }
    }

    fn save_state(&self) -> Result<(), NodeRunError> {
        let state = SavedState {
            epoch_ms: self.cfg.epoch_ms,
            emulator_cycles: self.emulators.iter().map(|e| (e.profile().link_index, e.cycles())).collect(),
            node: self.node.snapshot(),
        };
        let tmp = self.state_path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(&state).expect("serializable")).map_err(io_err("writing state"))?;
        fs::rename(&tmp, &self.state_path).map_err(io_err("replacing state"))
    }

    fn flush_logs(&mut self) -> Result<(), NodeRunError> {
        for u in self.node.take_usage() {
            writeln!(self.usage_out, "{}", serde_json::to_string(&u).expect("serializable")).map_err(io_err("usage log"))?;
        }
        for w in self.node.take_wire_log() {
            writeln!(self.wire_out, "{}", serde_json::to_string(&w).expect("serializable")).map_err(io_err("wire log"))?;
        }
        self.usage_out.flush().map_err(io_err("usage log"))?;
        self.wire_out.flush().map_err(io_err("wire log"))
    }

    fn send(&mut self, env: Envelope) {
        let key = (env.to, env.kind);
        if let Some(conn) = self.routes.get(&key).and_then(|c| self.conns.get(c)) {
            let writer = conn.writer.clone();
            if let Some(bytes) = self.node.seal(&env) {
                if writer.send(bytes).is_ok() {
                    return;
                }
            }
        }
        self.pending.entry(key).or_default().push_back(env);
    }

    /// Runs one reactor step and ships its output. State hits the disk
    /// before anything leaves, so a crash never forgets a spent key.
    fn step(&mut self, input: Input) -> Result<(), NodeRunError> {
        let now = self.vnow().max(self.node.now());
        let out = self.node.handle(now, input);
        self.save_state()?;
        for env in out {
            self.send(env);
        }
        self.flush_logs()
    }

    fn run_due(&mut self) -> Result<(), NodeRunError> {
        let now = self.vnow();
        while let Some((&(t, _, _), &ev)) = self.schedule.first_key_value() {
            if t > now {
                break;
            }
            self.schedule.pop_first();
            match ev {
                Local::LinkCycle(i) => {
                    let em = &mut self.emulators[i];
                    em.run_cycle(&self.cfg.scenario.disturbances);
                    let next = secs_to_us(em.next_cycle_time());
                    self.push(next, Local::LinkCycle(i));
                }
                Local::Poll => {
                    let out = self.node.handle(t, Input::Poll);
                    self.save_state()?;
                    for env in out {
                        self.send(env);
                    }
                    self.flush_logs()?;
                    self.push(t + self.cfg.scenario.timing.poll_period_us, Local::Poll);
                }
                Local::Report => {
                    let out = self.node.handle(t, Input::Report);
                    for env in out {
                        self.send(env);
                    }
                    self.flush_logs()?;
                    self.push(t + self.cfg.scenario.timing.report_period_us, Local::Report);
                }
            }
        }
        if !self.draining && now > self.cfg.scenario.duration_us() {
            self.draining = true;
            self.node.set_draining(true);
        }
        Ok(())
    }

    fn bind(&mut self, conn: u64, key: (NodeId, ChannelKind)) -> Result<(), NodeRunError> {
        self.routes.insert(key, conn);
        if let Some(c) = self.conns.get_mut(&conn) {
            c.peer = Some(key);
        }
        let queued: Vec<Envelope> = self.pending.remove(&key).map(Vec::from).unwrap_or_default();
        for env in queued {
            self.send(env);
        }
        if key == (0, ChannelKind::Report) && self.cfg.node_id != 0 {
            self.step(Input::ReportLink { up: true })?;
        }
        self.flush_logs()
    }

    fn on_net(&mut self, ev: NetEvent) -> Result<(), NodeRunError> {
        match ev {
            NetEvent::Dialed { conn, peer, kind, writer } => {
                self.conns.insert(conn, Conn { peer: None, writer });
                let hello = self.node.hello(peer, kind);
                if let Some(bytes) = self.node.seal(&hello) {
                    let _ = self.conns[&conn].writer.send(bytes);
                }
                self.bind(conn, (peer, kind))?;
            }
            NetEvent::Accepted { conn, writer } => {
                self.conns.insert(conn, Conn { peer: None, writer });
            }
            NetEvent::Frame { conn, bytes } => {
                let Some(c) = self.conns.get(&conn) else { return Ok(()) };
                let key = match c.peer {
                    Some(k) => k,
                    None => match self.node.identify(&bytes) {
                        Some(k) => {
                            self.bind(conn, k)?;
                            k
                        }
                        None => return Ok(()),
                    },
                };
                self.run_due()?;
                self.step(Input::Wire { from: key.0, kind: key.1, bytes })?;
            }
            NetEvent::Closed { conn } => {
                if let Some(c) = self.conns.remove(&conn) {
                    if let Some(key) = c.peer {
                        if self.routes.get(&key) == Some(&conn) {
                            self.routes.remove(&key);
                            if key == (0, ChannelKind::Report) && self.cfg.node_id != 0 {
                                self.step(Input::ReportLink { up: false })?;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn finish(&mut self, resumed: bool) -> Result<NodeRunSummary, NodeRunError> {
        self.flush_logs()?;
        self.save_state()?;
        let name = self.cfg.name();
        let out = &self.cfg.out_dir;
        let tables = out.join(TABLE_DIR);
        fs::create_dir_all(&tables).map_err(io_err("creating table dir"))?;
        let nk = self.node.network_keys();
        fs::write(tables.join(format!("{name}-nk.qkt")), nk.to_bytes()).map_err(io_err("writing tables"))?;
        for end in [self.node.left(), self.node.right()].into_iter().flatten() {
            let t = end.table();
            fs::write(tables.join(format!("{name}-{}.qkt", t.scope())), t.to_bytes()).map_err(io_err("writing tables"))?;
        }
        let summary = NodeRunSummary {
            node: name.clone(),
            epoch_ms: self.cfg.epoch_ms,
            virtual_end_s: self.vnow() as f64 / 1e6,
            resumed,
            nk_records: nk.len(),
            nk_set_digest: hex::encode(nk.key_set_digest()),
            triggers: self.node.triggers().to_vec(),
            outcomes: self.node.outcomes().to_vec(),
            counters: self.node.counters().clone(),
        };
        let text = serde_json::to_string_pretty(&summary).expect("serializable") + "\n";
        fs::write(out.join(format!("report-{name}.json")), text).map_err(io_err("writing report"))?;
        Ok(summary)
    }
}

/// Runs one node until the scenario's virtual duration has elapsed plus a
/// short drain. State saved under `state_dir` with the same epoch is
/// resumed, so a killed process can be restarted mid-run.
pub fn run_node(cfg: NodeConfig) -> Result<NodeRunSummary, NodeRunError> {
    let sc = cfg.scenario.clone();
    let name = cfg.name();
    let k = cfg.node_id;
    for d in [&cfg.feed_dir, &cfg.state_dir, &cfg.out_dir] {
        fs::create_dir_all(d).map_err(io_err(format!("creating {}", d.display())))?;
    }
    let state_path = cfg.state_dir.join(format!("{name}.json"));
    let saved: Option<SavedState> = fs::read(&state_path)
        .ok()
        .and_then(|b| serde_json::from_slice::<SavedState>(&b).ok())
        .filter(|s| s.epoch_ms == cfg.epoch_ms);
    let resumed = saved.is_some();

    let mut setup = node_setup(&sc, k);
    setup.policy = cfg.policy;
    setup.relay_psks = cfg.relay_psks.clone();
    setup.report_psks = cfg.report_psks.clone();
    let role = setup.role();
    let mut emulators = Vec::new();
    let mut end = |link: Option<u8>| -> Result<Option<LinkEnd>, NodeRunError> {
        let Some(l) = link else { return Ok(None) };
        let profile = sc.links[l as usize - 1].clone();
        let path = feed_path(&cfg.feed_dir, &name, l, profile.delivery);
        if !resumed {
            for p in [path.clone(), path.with_extension("status.json")] {
                match fs::remove_file(&p) {
                    Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(io_err(format!("removing {}", p.display()))(e)),
                    _ => {}
                }
            }
        }
        let sink: Box<dyn FeedMedium> = Box::new(FileMedium::new(&path));
        emulators.push(LinkEmulator::new(profile.clone(), LinkEmulator::seed_for(sc.seed, l), vec![sink]));
        Ok(Some(LinkEnd::new(l, profile.delivery, Box::new(FileMedium::new(&path)))))
    };
    let left = end(role.left_link)?;
    let right = end(role.right_link)?;
    let mut node = Node::new(setup, left, right);
    let lp = cfg.out_dir.join("telemetry").join(format!("{name}.lp"));
    node.replace_telemetry(TelemetryStore::new().with_log(Box::new(append_file(&lp, !resumed)?)));
    if let Some(s) = saved {
        for (link, cycles) in &s.emulator_cycles {
            if let Some(em) = emulators.iter_mut().find(|e| e.profile().link_index == *link) {
                for _ in 0..*cycles {
                    em.replay_cycle(&sc.disturbances);
                }
            }
        }
        node.restore(s.node).map_err(|e: KeyError| NodeRunError::State(e.to_string()))?;
    }

    let usage_out = append_file(&cfg.out_dir.join(USAGE_DIR).join(format!("{name}.jsonl")), !resumed)?;
    let wire_out = append_file(&cfg.out_dir.join(WIRE_DIR).join(format!("{name}.jsonl")), !resumed)?;
    let listener = TcpListener::bind(&cfg.listen_addr).map_err(io_err(format!("binding {}", cfg.listen_addr)))?;
    let (tx, rx): (Sender<NetEvent>, Receiver<NetEvent>) = mpsc::channel();
    let ids = Arc::new(std::sync::atomic::AtomicU64::new(1));
    let stop = Arc::new(AtomicBool::new(false));
    spawn_listener(listener, tx.clone(), ids.clone(), stop.clone());
    if k > 0 {
        let left = cfg.left_peer.clone().expect("validated");
        let nm = cfg.nm_addr.clone().expect("validated");
        spawn_dialer(left, k - 1, ChannelKind::Relay, tx.clone(), ids.clone(), stop.clone());
        spawn_dialer(nm, 0, ChannelKind::Report, tx.clone(), ids.clone(), stop.clone());
    }
    drop(tx);

    let mut d = Driver {
        node,
        emulators,
        schedule: BTreeMap::new(),
        seq: 0,
        conns: HashMap::new(),
        routes: BTreeMap::new(),
        pending: BTreeMap::new(),
        usage_out,
        wire_out,
        state_path,
        draining: false,
        cfg,
    };
    if k > 0 {
        // reports queue locally until the NM connection is up
        let out = d.node.handle(d.node.now(), Input::ReportLink { up: false });
        debug_assert!(out.is_empty());
    }
    let start = d.node.now();
    let t = sc.timing;
    for i in 0..d.emulators.len() {
        let next = secs_to_us(d.emulators[i].next_cycle_time());
        d.push(next, Local::LinkCycle(i));
    }
    let first = |period: Micros| (start / period + 1) * period;
    d.push(first(t.poll_period_us), Local::Poll);
    d.push(first(t.report_period_us), Local::Report);

    let end_wall = d.wall_at(sc.duration_us()) + d.cfg.drain_s * 1_000.0;
    loop {
        d.run_due()?;
        let wall = now_ms() as f64;
        if wall >= end_wall {
            break;
        }
        let next_local = d.schedule.first_key_value().map_or(end_wall, |(&(t, _, _), _)| d.wall_at(t));
        let wait = (next_local.min(end_wall) - wall).clamp(0.0, 250.0);
        match rx.recv_timeout(Duration::from_micros((wait * 1_000.0) as u64)) {
            Ok(ev) => d.on_net(ev)?,
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => thread::sleep(Duration::from_millis(wait as u64)),
        }
    }
    stop.store(true, Ordering::Relaxed);
    d.finish(resumed)
}
