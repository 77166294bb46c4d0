//! Offline check of a run's output directory: single use of every link
//! key, no network key in clear on the wire, identical network key sets.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::keycore::{KeyStatus, KeyTable, TableScope};
use crate::relayproto::{UsageEvent, WireLogEntry};
use crate::simharness::{TABLE_DIR, USAGE_DIR, WIRE_DIR};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
    #[error("{0}")]
    Missing(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub nodes: Vec<String>,
    pub usage_events: usize,
    pub frames_scanned: usize,
    /// `node scope key_id` entries used more than once.
    pub reuse: Vec<String>,
    /// Frames carrying a network key verbatim.
    pub cleartext: Vec<String>,
    /// Nodes whose intact network-key set differs from the NM's.
    pub nk_mismatch: Vec<String>,
    /// Network keys lost to detected faults, from the run report.
    pub shortfall: u64,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.reuse.is_empty() && self.cleartext.is_empty() && self.nk_mismatch.is_empty()
    }
}

fn read_dir_sorted(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, AuditError> {
    let rd = fs::read_dir(dir).map_err(|source| AuditError::Io { path: dir.to_path_buf(), source })?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    Ok(out)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, AuditError> {
    let text = fs::read_to_string(path).map_err(|source| AuditError::Io { path: path.to_path_buf(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AuditError::Malformed { path: path.to_path_buf(), line: i + 1, reason: e.to_string() })
        })
        .collect()
}

/// Audits the bundle in `dir` (a simulated run or the shared output
/// directory of a real-mode run).
pub fn audit_dir(dir: &Path) -> Result<AuditReport, AuditError> {
    let mut rep = AuditReport::default();
    let table_dir = dir.join(TABLE_DIR);
    if !table_dir.is_dir() {
        return Err(AuditError::Missing(format!("{} has no {TABLE_DIR}/ directory", dir.display())));
    }

    let mut nk_tables: BTreeMap<String, KeyTable> = BTreeMap::new();
    for path in read_dir_sorted(&table_dir, "qkt")? {
        let bytes = fs::read(&path).map_err(|source| AuditError::Io { path: path.clone(), source })?;
        let table = KeyTable::from_bytes(&bytes)
            .map_err(|e| AuditError::Malformed { path: path.clone(), line: 0, reason: e.to_string() })?;
        if table.scope() == TableScope::NetworkKeys {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let node = stem.strip_suffix("-nk").unwrap_or(stem).to_string();
            nk_tables.insert(node, table);
        }
    }
    if nk_tables.is_empty() {
        return Err(AuditError::Missing("no network-key tables found".to_string()));
    }
    rep.nodes = nk_tables.keys().cloned().collect();
    let reference = nk_tables.get("NM").or_else(|| nk_tables.values().next()).expect("nonempty").key_set_digest();
    for (node, t) in &nk_tables {
        if t.key_set_digest() != reference {
            rep.nk_mismatch.push(format!("{node}: {} intact keys, set differs from NM", t.len() - t.count(KeyStatus::Compromised)));
        }
    }

    let usage_dir = dir.join(USAGE_DIR);
    if usage_dir.is_dir() {
        let mut seen: BTreeMap<(String, String, u64), usize> = BTreeMap::new();
        for path in read_dir_sorted(&usage_dir, "jsonl")? {
            for ev in read_jsonl::<UsageEvent>(&path)? {
                rep.usage_events += 1;
                *seen.entry((ev.node.clone(), ev.scope.clone(), ev.key_id)).or_default() += 1;
            }
        }
        for ((node, scope, id), n) in seen {
            if n > 1 {
                rep.reuse.push(format!("{node} {scope} key {id} used {n} times"));
            }
        }
    }

    let all_nk: HashSet<String> = nk_tables
        .values()
        .flat_map(|t| t.records().iter().map(|r| hex::encode(r.bits())))
        .collect();
    let wire_dir = dir.join(WIRE_DIR);
    if wire_dir.is_dir() {
        for path in read_dir_sorted(&wire_dir, "jsonl")? {
            for entry in read_jsonl::<WireLogEntry>(&path)? {
                rep.frames_scanned += 1;
                let hex = entry.frame_hex.as_str();
                let hit = (0..hex.len().saturating_sub(63)).step_by(2).any(|i| all_nk.contains(&hex[i..i + 64]));
                if hit {
                    rep.cleartext.push(format!("{} -> {} {} at {} us", entry.from, entry.to, entry.msg, entry.time_us));
                }
            }
        }
    }

    let mut counted = BTreeSet::new();
    for path in read_dir_sorted(dir, "json")? {
        let Ok(text) = fs::read_to_string(&path) else { continue };
        let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) else { continue };
        if let Some(outs) = v.get("outcomes").and_then(|o| o.as_array()) {
            for o in outs {
                let batch = o.get("batch_id").and_then(|b| b.as_u64()).unwrap_or(0);
                if counted.insert(batch) {
                    rep.shortfall += o.get("missing").and_then(|m| m.as_u64()).unwrap_or(0);
                }
            }
        }
    }
    Ok(rep)
}
