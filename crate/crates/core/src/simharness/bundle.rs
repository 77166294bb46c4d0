//! On-disk output of a run: summary, telemetry, key ledgers, wire logs and
//! key tables. The audit reads the same layout.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use super::sim::{RunSummary, SimReport};
use crate::relayproto::{UsageEvent, WireLogEntry};
use crate::telemetry::{export_csv, export_lines, TelemetryStore};

pub const USAGE_DIR: &str = "usage";
pub const WIRE_DIR: &str = "wire";
pub const TABLE_DIR: &str = "tables";
pub const CSV_DIR: &str = "csv";

/// Human-readable table of the run's headline numbers.
pub fn summary_text(s: &RunSummary) -> String {
    let mut o = String::new();
    let _ = writeln!(o, "scenario {}  seed {}  duration {} s", s.scenario, s.seed, s.duration_s);
    let _ = writeln!(o);
    let _ = writeln!(o, "{:<5} {:<8} {:>7} {:>7} {:>22} {:>18}", "link", "protocol", "cycles", "keys", "SKR bps (mean ± std)", "QBER % (mean ± std)");
    for l in &s.links {
        let fmt = |st: &Option<super::sim::Stat>, prec: usize| match st {
            Some(st) => format!("{:.prec$} ± {:.prec$}", st.mean, st.std),
            None => "-".to_string(),
        };
        let _ = writeln!(
            o,
            "{:<5} {:<8} {:>7} {:>7} {:>22} {:>18}",
            l.index,
            l.protocol,
            l.cycles,
            l.delivered_keys,
            fmt(&l.skr_bps, 1),
            fmt(&l.qber_pct, 2)
        );
    }
    let _ = writeln!(o);
    let hs: Vec<String> = s.triggers.iter().map(|t| t.h.to_string()).collect();
    let _ = writeln!(o, "transfers started {}  completed {}  h = [{}]", s.triggers.len(), s.outcomes.len(), hs.join(", "));
    let _ = writeln!(o, "network keys failed in transfer {}", s.keys_failed());
    let _ = writeln!(o, "network keys at EN {} (after drain {})", s.nk_at_en, s.nk_at_en_final);
    let _ = writeln!(o, "effective network key rate {:.4} keys/s ({:.1} bps)", s.nk_rate, s.nk_rate * 256.0);
    let _ = writeln!(o, "quiesced {}", s.quiesced);
    let _ = writeln!(o, "run digest {}", s.digest());
    o
}

fn jsonl<T: serde::Serialize>(items: &[&T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).expect("serializable") + "\n").collect()
}

fn by_node<'a, T>(items: &'a [T], node: impl Fn(&T) -> &str) -> std::collections::BTreeMap<String, Vec<&'a T>> {
    let mut m: std::collections::BTreeMap<String, Vec<&T>> = std::collections::BTreeMap::new();
    for i in items {
        m.entry(node(i).to_string()).or_default().push(i);
    }
    m
}

pub fn write_usage(dir: &Path, events: &[UsageEvent]) -> io::Result<()> {
    fs::create_dir_all(dir.join(USAGE_DIR))?;
    for (node, evs) in by_node(events, |e| &e.node) {
        fs::write(dir.join(USAGE_DIR).join(format!("{node}.jsonl")), jsonl(&evs))?;
    }
    Ok(())
}

pub fn write_wire(dir: &Path, entries: &[WireLogEntry]) -> io::Result<()> {
    fs::create_dir_all(dir.join(WIRE_DIR))?;
    for (node, evs) in by_node(entries, |e| &e.from) {
        fs::write(dir.join(WIRE_DIR).join(format!("{node}.jsonl")), jsonl(&evs))?;
    }
    Ok(())
}

pub fn write_telemetry(dir: &Path, store: &TelemetryStore, lp_name: &str) -> io::Result<()> {
    fs::write(dir.join(lp_name), export_lines(store.points()))?;
    fs::create_dir_all(dir.join(CSV_DIR))?;
    for key in store.keys() {
        let points: Vec<_> = store.series(key).collect();
        fs::write(dir.join(CSV_DIR).join(format!("{}.csv", key.label())), export_csv(points.iter().copied()))?;
    }
    Ok(())
}

/// Writes the full bundle of a simulated run into `dir`.
pub fn write_bundle(dir: &Path, report: &SimReport, scenario_text: &str) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.txt"), summary_text(&report.summary))?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report.summary).expect("serializable") + "\n")?;
    fs::write(dir.join("scenario.toml"), scenario_text)?;
    write_telemetry(dir, &report.telemetry, "telemetry.lp")?;
    write_usage(dir, &report.usage)?;
    write_wire(dir, &report.wire_log)?;
    fs::create_dir_all(dir.join(TABLE_DIR))?;
    for t in &report.tables {
        fs::write(dir.join(TABLE_DIR).join(format!("{}-nk.qkt", t.name)), t.nk.to_bytes())?;
        for l in &t.links {
            fs::write(dir.join(TABLE_DIR).join(format!("{}-{}.qkt", t.name, l.scope())), l.to_bytes())?;
        }
    }
    Ok(())
}
