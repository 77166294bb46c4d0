//! Scenario files: TOML describing the chain, its links, scripted
//! disturbances, classical outages and injected faults.
//!
//! ```toml
//! name = "example"
//! duration_s = 600
//! seed = 7
//! time_compression = 1.0   # optional, >= 1, real mode only
//! per_hop_delay_s = 0.05   # optional
//!
//! [policy]                 # optional, defaults T = 60, R = 20
//! threshold = 60
//! reserve = 20
//!
//! [timing]                 # optional, seconds
//! poll_period_s = 1
//! report_period_s = 1
//!
//! [[nodes]]                # chain order: NM, TN..., EN
//! name = "NM"
//! role = "nm"
//! listen_addr = "127.0.0.1:7400"   # optional, real mode
//!
//! [[links]]
//! index = 1
//! profile = "table1"       # start from a built-in profile, then override
//! delivery = "packet_stream"
//!
//! [[disturbances]]
//! link = 2
//! start_s = 100
//! end_s = 200
//! qber_add_pct = 4.0
//! skr_scale = 0.6
//!
//! [[outages]]
//! scope = "report"         # or "relay"
//! nodes = ["TN1", "TN2", "EN"]
//! start_s = 300
//! end_s = 360
//!
//! [[faults]]
//! kind = "tamper_hop"      # or "corrupt_frame"
//! node = "NM"
//! batch = 2
//! index = 0
//! ```

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::qkdlink::{DeliveryMode, DisturbanceWindow, LinkProfile, Protocol};
use crate::relayproto::{validate_chain, NodeKind, NodeRole, NodeTiming, TransferPolicy, SECOND};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub kind: NodeKind,
    pub listen_addr: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutageScope {
    /// Reporting connection of a node to the NM.
    Report,
    /// Relay connection between two adjacent nodes.
    Relay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outage {
    pub scope: OutageScope,
    /// Chain positions. Report: every listed node loses its NM link.
    /// Relay: exactly two adjacent nodes.
    pub nodes: Vec<u32>,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Fault {
    /// `node` flips a ciphertext bit of hop (`batch`, `index`) before sealing.
    TamperHop { node: u32, batch: u64, index: u32 },
    /// The `nth` (1-based) relay frame from `from` to `to` gets a bit flipped
    /// in transit.
    CorruptFrame { from: u32, to: u32, nth: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub duration_s: f64,
    pub seed: u64,
    pub time_compression: f64,
    pub per_hop_delay_s: f64,
    pub policy: TransferPolicy,
    pub timing: NodeTiming,
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkProfile>,
    pub disturbances: Vec<DisturbanceWindow>,
    pub outages: Vec<Outage>,
    pub faults: Vec<Fault>,
}

pub const DEFAULT_HOP_DELAY_S: f64 = 0.05;

const BUNDLED: &[(&str, &str)] = &[
    ("epb_table1", include_str!("../../scenarios/epb_table1.toml")),
    ("epb_day1_outages", include_str!("../../scenarios/epb_day1_outages.toml")),
    ("epb_day2_wind", include_str!("../../scenarios/epb_day2_wind.toml")),
    ("tamper_hop", include_str!("../../scenarios/tamper_hop.toml")),
];

/// Names of the scenarios shipped with the library.
pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

/// Source text of a bundled scenario.
pub fn bundled_text(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn bundled(name: &str) -> Option<Scenario> {
    bundled_text(name).map(|t| load_scenario(t).expect("bundled scenarios are valid"))
}

impl Scenario {
    pub fn n_links(&self) -> u8 {
        self.links.len() as u8
    }

    pub fn node_index(&self, name: &str) -> Option<u32> {
        self.nodes.iter().position(|n| n.name == name).map(|i| i as u32)
    }

    pub fn duration_us(&self) -> u64 {
        secs_to_us(self.duration_s)
    }

    pub fn hop_delay_us(&self) -> u64 {
        secs_to_us(self.per_hop_delay_s)
    }
}

pub fn secs_to_us(s: f64) -> u64 {
    (s * 1e6).round().max(0.0) as u64
}

/// Collects problems instead of stopping at the first.
struct Errors {
    list: Vec<String>,
}

impl Errors {
    fn push(&mut self, msg: impl Into<String>) {
        self.list.push(msg.into());
    }

    fn unknown_keys(&mut self, where_: &str, t: &Table, allowed: &[&str]) {
        for k in t.keys() {
            if !allowed.contains(&k.as_str()) {
                self.push(format!("{where_}: unknown key `{k}`"));
            }
        }
    }

    fn num(&mut self, where_: &str, t: &Table, key: &str, required: bool) -> Option<f64> {
        match t.get(key) {
            Some(Value::Float(f)) => Some(*f),
            Some(Value::Integer(i)) => Some(*i as f64),
            Some(_) => {
                self.push(format!("{where_}: `{key}` must be a number"));
                None
            }
            None => {
                if required {
                    self.push(format!("{where_}: missing required field `{key}`"));
                }
                None
            }
        }
    }

    fn int(&mut self, where_: &str, t: &Table, key: &str, required: bool) -> Option<u64> {
        match t.get(key) {
            Some(Value::Integer(i)) if *i >= 0 => Some(*i as u64),
            Some(_) => {
                self.push(format!("{where_}: `{key}` must be a non-negative integer"));
                None
            }
            None => {
                if required {
                    self.push(format!("{where_}: missing required field `{key}`"));
                }
                None
            }
        }
    }

    fn string(&mut self, where_: &str, t: &Table, key: &str, required: bool) -> Option<String> {
        match t.get(key) {
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => {
                self.push(format!("{where_}: `{key}` must be a string"));
                None
            }
            None => {
                if required {
                    self.push(format!("{where_}: missing required field `{key}`"));
                }
                None
            }
        }
    }

    fn tables<'a>(&mut self, t: &'a Table, key: &str, required: bool) -> Vec<&'a Table> {
        match t.get(key) {
            Some(Value::Array(items)) => items
                .iter()
                .enumerate()
                .filter_map(|(i, v)| match v {
                    Value::Table(t) => Some(t),
                    _ => {
                        self.push(format!("{key}[{i}] must be a table"));
                        None
                    }
                })
                .collect(),
            Some(_) => {
                self.push(format!("`{key}` must be an array of tables ([[{key}]])"));
                Vec::new()
            }
            None => {
                if required {
                    self.push(format!("missing required field `{key}`"));
                }
                Vec::new()
            }
        }
    }
}

fn parse_link(e: &mut Errors, i: usize, t: &Table) -> Option<LinkProfile> {
    let w = format!("links[{i}]");
    e.unknown_keys(
        &w,
        t,
        &[
            "index",
            "profile",
            "protocol",
            "length_km",
            "loss_db",
            "skr_mean_bps",
            "skr_std_bps",
            "qber_mean_pct",
            "qber_std_pct",
            "compromise_threshold_pct",
            "delivery",
            "cycle_period_s",
            "phase_s",
        ],
    );
    let index = e.int(&w, t, "index", true)?;
    if index == 0 || index > 255 {
        e.push(format!("{w}: index must be in 1..=255"));
        return None;
    }
    let base = match e.string(&w, t, "profile", false).as_deref() {
        Some("table1") => match LinkProfile::table1(index as u8) {
            Some(p) => Some(p),
            None => {
                e.push(format!("{w}: no table1 profile for link {index}"));
                return None;
            }
        },
        Some(other) => {
            e.push(format!("{w}: unknown profile `{other}`"));
            return None;
        }
        None => None,
    };
    let required = base.is_none();
    let mut num = |key: &str, fallback: Option<f64>| e.num(&w, t, key, required && fallback.is_none()).or(fallback);
    let b = base.as_ref();
    let length_km = num("length_km", b.map(|p| p.length_km));
    let loss_db = num("loss_db", b.map(|p| p.loss_db));
    let skr_mean_bps = num("skr_mean_bps", b.map(|p| p.skr_mean_bps));
    let skr_std_bps = num("skr_std_bps", b.map(|p| p.skr_std_bps));
    let qber_mean_pct = num("qber_mean_pct", b.map(|p| p.qber_mean_pct));
    let qber_std_pct = num("qber_std_pct", b.map(|p| p.qber_std_pct));
    let threshold = num("compromise_threshold_pct", Some(b.map_or(13.0, |p| p.compromise_threshold_pct)));
    let cycle_period_s = num("cycle_period_s", b.map(|p| p.cycle_period_s));
    let phase_s = e.num(&w, t, "phase_s", false).or(b.map(|p| p.phase_s)).or(cycle_period_s);

    let protocol = match e.string(&w, t, "protocol", required) {
        Some(s) => Protocol::parse(&s).or_else(|| {
            e.push(format!("{w}: unknown protocol `{s}`"));
            None
        }),
        None => b.map(|p| p.protocol),
    };
    let delivery = match e.string(&w, t, "delivery", required) {
        Some(s) => DeliveryMode::parse(&s).or_else(|| {
            e.push(format!("{w}: unknown delivery `{s}` (packet_stream, append_file, rewrite_file)"));
            None
        }),
        None => b.map(|p| p.delivery),
    };
    let p = LinkProfile {
        link_index: index as u8,
        protocol: protocol?,
        length_km: length_km?,
        loss_db: loss_db?,
        skr_mean_bps: skr_mean_bps?,
        skr_std_bps: skr_std_bps?,
        qber_mean_pct: qber_mean_pct?,
        qber_std_pct: qber_std_pct?,
        compromise_threshold_pct: threshold?,
        delivery: delivery?,
        cycle_period_s: cycle_period_s?,
        phase_s: phase_s?,
    };
    for msg in p.validate() {
        e.push(format!("{w}: {msg}"));
    }
    Some(p)
}

fn parse_timing(e: &mut Errors, t: &Table) -> NodeTiming {
    let mut timing = NodeTiming::default();
    e.unknown_keys(
        "timing",
        t,
        &[
            "poll_period_s",
            "report_period_s",
            "stale_after_s",
            "en_batch_timeout_s",
            "nm_batch_timeout_s",
            "hold_timeout_s",
        ],
    );
    let fields: [(&str, &mut u64); 6] = [
        ("poll_period_s", &mut timing.poll_period_us),
        ("report_period_s", &mut timing.report_period_us),
        ("stale_after_s", &mut timing.stale_after_us),
        ("en_batch_timeout_s", &mut timing.en_batch_timeout_us),
        ("nm_batch_timeout_s", &mut timing.nm_batch_timeout_us),
        ("hold_timeout_s", &mut timing.hold_timeout_us),
    ];
    for (key, slot) in fields {
        if let Some(v) = e.num("timing", t, key, false) {
            if v > 0.0 {
                *slot = secs_to_us(v);
            } else {
                e.push(format!("timing: `{key}` must be > 0"));
            }
        }
    }
    if timing.poll_period_us == 0 || timing.report_period_us == 0 {
        e.push("timing: periods must be at least 1 us");
    }
    timing
}

/// Parses and validates a scenario, reporting every problem found.
pub fn load_scenario(text: &str) -> Result<Scenario, Vec<String>> {
    let root: Table = match text.parse() {
        Ok(t) => t,
        Err(err) => return Err(vec![format!("not valid TOML: {err}")]),
    };
    let mut e = Errors { list: Vec::new() };
    let top = "scenario";
    e.unknown_keys(
        top,
        &root,
        &[
            "name",
            "duration_s",
            "seed",
            "time_compression",
            "per_hop_delay_s",
            "policy",
            "timing",
            "nodes",
            "links",
            "disturbances",
            "outages",
            "faults",
        ],
    );
    let name = e.string(top, &root, "name", false).unwrap_or_else(|| "unnamed".to_string());
    let duration_s = e.num(top, &root, "duration_s", true);
    if duration_s.is_some_and(|d| !(d >= 0.0)) {
        e.push("scenario: duration_s must be >= 0");
    }
    let seed = e.int(top, &root, "seed", true);
    let time_compression = e.num(top, &root, "time_compression", false).unwrap_or(1.0);
    if !(time_compression >= 1.0) {
        e.push("scenario: time_compression must be >= 1");
    }
    let per_hop_delay_s = e.num(top, &root, "per_hop_delay_s", false).unwrap_or(DEFAULT_HOP_DELAY_S);
    if !(per_hop_delay_s >= 0.0) {
        e.push("scenario: per_hop_delay_s must be >= 0");
    }

    let mut policy = TransferPolicy::default();
    match root.get("policy") {
        Some(Value::Table(t)) => {
            e.unknown_keys("policy", t, &["threshold", "reserve"]);
            let th = e.int("policy", t, "threshold", true);
            let re = e.int("policy", t, "reserve", true);
            if let (Some(th), Some(re)) = (th, re) {
                match TransferPolicy::new(th as usize, re as usize) {
                    Ok(p) => policy = p,
                    Err(err) => e.push(format!("policy: {err}")),
                }
            }
        }
        Some(_) => e.push("`policy` must be a table"),
        None => {}
    }
    let timing = match root.get("timing") {
        Some(Value::Table(t)) => parse_timing(&mut e, t),
        Some(_) => {
            e.push("`timing` must be a table");
            NodeTiming::default()
        }
        None => NodeTiming::default(),
    };

    let mut nodes = Vec::new();
    for (i, t) in e.tables(&root, "nodes", true).into_iter().enumerate() {
        let w = format!("nodes[{i}]");
        e.unknown_keys(&w, t, &["name", "role", "listen_addr"]);
        let name = e.string(&w, t, "name", true);
        let kind = e.string(&w, t, "role", true).and_then(|r| {
            NodeKind::parse(&r).or_else(|| {
                e.push(format!("{w}: unknown role `{r}` (nm, tn, en)"));
                None
            })
        });
        let listen_addr = e.string(&w, t, "listen_addr", false);
        if let (Some(name), Some(kind)) = (name, kind) {
            nodes.push(NodeSpec { name, kind, listen_addr });
        }
    }
    let mut links = Vec::new();
    for (i, t) in e.tables(&root, "links", true).into_iter().enumerate() {
        if let Some(p) = parse_link(&mut e, i, t) {
            links.push(p);
        }
    }
    links.sort_by_key(|p| p.link_index);
    let indices: Vec<u8> = links.iter().map(|p| p.link_index).collect();
    let expected: Vec<u8> = (1..=links.len() as u8).collect();
    if !links.is_empty() && indices != expected {
        e.push(format!("links: indices must be 1..={} without gaps or repeats, got {indices:?}", links.len()));
    }
    if !nodes.is_empty() && !links.is_empty() {
        if nodes.len() != links.len() + 1 {
            e.push(format!("topology: {} links need {} nodes, got {}", links.len(), links.len() + 1, nodes.len()));
        } else {
            let roles: Vec<NodeRole> = nodes
                .iter()
                .enumerate()
                .map(|(k, n)| {
                    let chain = NodeRole::in_chain(k, links.len());
                    NodeRole { kind: n.kind, ..chain }
                })
                .collect();
            for msg in validate_chain(&roles) {
                e.push(format!("topology: {msg}"));
            }
        }
        let names: BTreeSet<&str> = nodes.iter().map(|n| n.name.as_str()).collect();
        if names.len() != nodes.len() {
            e.push("nodes: names must be unique");
        }
    }
    let node_index = |name: &str| nodes.iter().position(|n| n.name == name).map(|i| i as u32);
    let dur = duration_s.unwrap_or(f64::INFINITY);
    let in_run = |e: &mut Errors, w: &str, start: f64, end: f64| {
        if !(start <= end) {
            e.push(format!("{w}: end_s {end} is before start_s {start}"));
        } else if start < 0.0 || end > dur {
            e.push(format!("{w}: window [{start}, {end}] is outside [0, {dur}]"));
        }
    };

    let mut disturbances = Vec::new();
    for (i, t) in e.tables(&root, "disturbances", false).into_iter().enumerate() {
        let w = format!("disturbances[{i}]");
        e.unknown_keys(&w, t, &["link", "start_s", "end_s", "qber_add_pct", "skr_scale"]);
        let link = e.int(&w, t, "link", true);
        let start = e.num(&w, t, "start_s", true);
        let end = e.num(&w, t, "end_s", true);
        let qber_add_pct = e.num(&w, t, "qber_add_pct", false).unwrap_or(0.0);
        let skr_scale = e.num(&w, t, "skr_scale", false).unwrap_or(1.0);
        let (Some(link), Some(start_s), Some(end_s)) = (link, start, end) else { continue };
        if link == 0 || link as usize > links.len() {
            e.push(format!("{w}: link {link} does not exist"));
            continue;
        }
        in_run(&mut e, &w, start_s, end_s);
        let d = DisturbanceWindow { link_index: link as u8, start_s, end_s, qber_add_pct, skr_scale };
        if start_s < end_s {
            for msg in d.validate() {
                e.push(format!("{w}: {msg}"));
            }
        }
        disturbances.push(d);
    }

    let mut outages = Vec::new();
    for (i, t) in e.tables(&root, "outages", false).into_iter().enumerate() {
        let w = format!("outages[{i}]");
        e.unknown_keys(&w, t, &["scope", "nodes", "start_s", "end_s"]);
        let scope = match e.string(&w, t, "scope", true).as_deref() {
            Some("report") => Some(OutageScope::Report),
            Some("relay") => Some(OutageScope::Relay),
            Some(other) => {
                e.push(format!("{w}: unknown scope `{other}` (report, relay)"));
                None
            }
            None => None,
        };
        let mut ids = Vec::new();
        match t.get("nodes") {
            Some(Value::Array(a)) => {
                for v in a {
                    match v.as_str().and_then(node_index) {
                        Some(k) => ids.push(k),
                        None => e.push(format!("{w}: unknown node {v}")),
                    }
                }
            }
            Some(_) => e.push(format!("{w}: `nodes` must be a list of node names")),
            None => e.push(format!("{w}: missing required field `nodes`")),
        }
        let start = e.num(&w, t, "start_s", true);
        let end = e.num(&w, t, "end_s", true);
        let (Some(scope), Some(start_s), Some(end_s)) = (scope, start, end) else { continue };
        in_run(&mut e, &w, start_s, end_s);
        match scope {
            OutageScope::Relay => {
                if ids.len() != 2 || ids[0].abs_diff(ids[1]) != 1 {
                    e.push(format!("{w}: a relay outage names exactly two adjacent nodes"));
                }
            }
            OutageScope::Report => {
                if ids.contains(&0) {
                    e.push(format!("{w}: the NM has no reporting link of its own"));
                }
            }
        }
        outages.push(Outage { scope, nodes: ids, start_s, end_s });
    }

    let mut faults = Vec::new();
    for (i, t) in e.tables(&root, "faults", false).into_iter().enumerate() {
        let w = format!("faults[{i}]");
        let node_of = |e: &mut Errors, key: &str| {
            let name = e.string(&w, t, key, true)?;
            node_index(&name).or_else(|| {
                e.push(format!("{w}: unknown node `{name}`"));
                None
            })
        };
        match e.string(&w, t, "kind", true).as_deref() {
            Some("tamper_hop") => {
                e.unknown_keys(&w, t, &["kind", "node", "batch", "index"]);
                let node = node_of(&mut e, "node");
                let batch = e.int(&w, t, "batch", true);
                let index = e.int(&w, t, "index", true);
                if let (Some(node), Some(batch), Some(index)) = (node, batch, index) {
                    if node as usize + 1 >= nodes.len() {
                        e.push(format!("{w}: the edge node sends no key hops"));
                    }
                    faults.push(Fault::TamperHop { node, batch, index: index as u32 });
                }
            }
            Some("corrupt_frame") => {
                e.unknown_keys(&w, t, &["kind", "from", "to", "nth"]);
                let from = node_of(&mut e, "from");
                let to = node_of(&mut e, "to");
                let nth = e.int(&w, t, "nth", true);
                if let (Some(from), Some(to), Some(nth)) = (from, to, nth) {
                    if from.abs_diff(to) != 1 || nth == 0 {
                        e.push(format!("{w}: needs adjacent nodes and nth >= 1"));
                    }
                    faults.push(Fault::CorruptFrame { from, to, nth });
                }
            }
            Some(other) => e.push(format!("{w}: unknown fault kind `{other}` (tamper_hop, corrupt_frame)")),
            None => {}
        }
    }

    if !e.list.is_empty() {
        return Err(e.list);
    }
    Ok(Scenario {
        name,
        duration_s: duration_s.expect("checked"),
        seed: seed.expect("checked"),
        time_compression,
        per_hop_delay_s,
        policy,
        timing,
        nodes,
        links,
        disturbances,
        outages,
        faults,
    })
}

/// Renders a scenario back to the file format.
pub fn to_toml(s: &Scenario) -> String {
    use std::fmt::Write as _;
    let mut o = String::new();
    let _ = writeln!(o, "name = {:?}", s.name);
    let _ = writeln!(o, "duration_s = {:?}", s.duration_s);
    let _ = writeln!(o, "seed = {}", s.seed);
    let _ = writeln!(o, "time_compression = {:?}", s.time_compression);
    let _ = writeln!(o, "per_hop_delay_s = {:?}", s.per_hop_delay_s);
    let _ = writeln!(o, "\n[policy]\nthreshold = {}\nreserve = {}", s.policy.threshold(), s.policy.reserve());
    let t = &s.timing;
    let secs = |us: u64| us as f64 / SECOND as f64;
    let _ = writeln!(
        o,
        "\n[timing]\npoll_period_s = {:?}\nreport_period_s = {:?}\nstale_after_s = {:?}\nen_batch_timeout_s = {:?}\nnm_batch_timeout_s = {:?}\nhold_timeout_s = {:?}",
        secs(t.poll_period_us),
        secs(t.report_period_us),
        secs(t.stale_after_us),
        secs(t.en_batch_timeout_us),
        secs(t.nm_batch_timeout_us),
        secs(t.hold_timeout_us)
    );
    for n in &s.nodes {
        let role = match n.kind {
            NodeKind::NetworkManager => "nm",
            NodeKind::TrustedNode => "tn",
            NodeKind::EdgeNode => "en",
        };
        let _ = writeln!(o, "\n[[nodes]]\nname = {:?}\nrole = {:?}", n.name, role);
        if let Some(a) = &n.listen_addr {
            let _ = writeln!(o, "listen_addr = {a:?}");
        }
    }
    for l in &s.links {
        let _ = writeln!(
            o,
            "\n[[links]]\nindex = {}\nprotocol = {:?}\nlength_km = {:?}\nloss_db = {:?}\nskr_mean_bps = {:?}\nskr_std_bps = {:?}\nqber_mean_pct = {:?}\nqber_std_pct = {:?}\ncompromise_threshold_pct = {:?}\ndelivery = {:?}\ncycle_period_s = {:?}\nphase_s = {:?}",
            l.link_index,
            l.protocol.name(),
            l.length_km,
            l.loss_db,
            l.skr_mean_bps,
            l.skr_std_bps,
            l.qber_mean_pct,
            l.qber_std_pct,
            l.compromise_threshold_pct,
            l.delivery.name(),
            l.cycle_period_s,
            l.phase_s
        );
    }
    for d in &s.disturbances {
        let _ = writeln!(
            o,
            "\n[[disturbances]]\nlink = {}\nstart_s = {:?}\nend_s = {:?}\nqber_add_pct = {:?}\nskr_scale = {:?}",
            d.link_index, d.start_s, d.end_s, d.qber_add_pct, d.skr_scale
        );
    }
    for out in &s.outages {
        let names: Vec<String> = out.nodes.iter().map(|&k| format!("{:?}", s.nodes[k as usize].name)).collect();
        let scope = match out.scope {
            OutageScope::Report => "report",
            OutageScope::Relay => "relay",
        };
        let _ = writeln!(
            o,
            "\n[[outages]]\nscope = {scope:?}\nnodes = [{}]\nstart_s = {:?}\nend_s = {:?}",
            names.join(", "),
            out.start_s,
            out.end_s
        );
    }
    for f in &s.faults {
        match f {
            Fault::TamperHop { node, batch, index } => {
                let _ = writeln!(
                    o,
                    "\n[[faults]]\nkind = \"tamper_hop\"\nnode = {:?}\nbatch = {batch}\nindex = {index}",
                    s.nodes[*node as usize].name
                );
            }
            Fault::CorruptFrame { from, to, nth } => {
                let _ = writeln!(
                    o,
                    "\n[[faults]]\nkind = \"corrupt_frame\"\nfrom = {:?}\nto = {:?}\nnth = {nth}",
                    s.nodes[*from as usize].name,
                    s.nodes[*to as usize].name
                );
            }
        }
    }
    o
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_scenario_geometry() {
        let s = bundled("epb_table1").unwrap();
        let geo: Vec<(f64, f64)> = s.links.iter().map(|l| (l.length_km, l.loss_db)).collect();
        assert_eq!(geo, vec![(3.4, 1.3), (10.2, 3.1), (8.3, 2.9)]);
        assert_eq!(s.nodes.len(), 4);
        assert_eq!((s.policy.threshold(), s.policy.reserve()), (60, 20));
    }

    #[test]
    fn all_bundled_parse_and_roundtrip() {
        for name in bundled_names() {
            let s = bundled(name).unwrap();
            let again = load_scenario(&to_toml(&s)).unwrap_or_else(|e| panic!("{name}: {e:?}"));
            assert_eq!(again, s, "{name}");
        }
    }

    #[test]
    fn empty_file_lists_required_fields() {
        let errs = load_scenario("").unwrap_err();
        for f in ["duration_s", "seed", "nodes", "links"] {
            assert!(errs.iter().any(|e| e.contains(f)), "{f} not in {errs:?}");
        }
    }

    #[test]
    fn reversed_window_rejected() {
        let mut text = bundled_text("epb_table1").unwrap().to_string();
        text.push_str("\n[[disturbances]]\nlink = 2\nstart_s = 50\nend_s = 10\n");
        let errs = load_scenario(&text).unwrap_err();
        assert!(errs.iter().any(|e| e.contains("before start_s")), "{errs:?}");
    }

    #[test]
    fn overlapping_windows_allowed() {
        let mut text = bundled_text("epb_table1").unwrap().to_string();
        text.push_str("\n[[disturbances]]\nlink = 2\nstart_s = 10\nend_s = 50\nqber_add_pct = 1\n");
        text.push_str("\n[[disturbances]]\nlink = 2\nstart_s = 20\nend_s = 60\nqber_add_pct = 1\n");
        assert_eq!(load_scenario(&text).unwrap().disturbances.len(), 2);
    }

    #[test]
    fn several_errors_reported_together() {
        let text = r#"
            duration_s = -1
            seed = 1
            colour = "blue"
            [[nodes]]
            name = "NM"
            role = "nm"
            [[nodes]]
            name = "X"
            role = "tn"
            [[links]]
            index = 1
            profile = "table1"
            skr_mean_bps = 0
        "#;
        let errs = load_scenario(text).unwrap_err();
        assert!(errs.len() >= 4, "{errs:?}");
        assert!(errs.iter().any(|e| e.contains("colour")));
        assert!(errs.iter().any(|e| e.contains("duration_s")));
        assert!(errs.iter().any(|e| e.contains("skr_mean_bps")));
        assert!(errs.iter().any(|e| e.contains("edge node")));
    }

    #[test]
    fn outage_validation() {
        let mut text = bundled_text("epb_table1").unwrap().to_string();
        text.push_str("\n[[outages]]\nscope = \"relay\"\nnodes = [\"NM\", \"TN2\"]\nstart_s = 1\nend_s = 2\n");
        text.push_str("\n[[outages]]\nscope = \"report\"\nnodes = [\"ZZ\"]\nstart_s = 1\nend_s = 2\n");
        let errs = load_scenario(&text).unwrap_err();
        assert_eq!(errs.len(), 2, "{errs:?}");
    }
}
