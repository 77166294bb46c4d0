//! Time-series capture of key counts, link quality and transfer events,
//! with mean ± std reduction and line-protocol / CSV export.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::io::Write;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TelemetryError {
    #[error("point at {timestamp_ns} ns is older than the last point ({last_ns} ns) of its series")]
    OutOfOrder { timestamp_ns: u64, last_ns: u64 },
    #[error("cannot summarize an empty series")]
    Empty,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldValue {
    Int(i64),
    Float(f64),
}

impl FieldValue {
    pub fn as_f64(self) -> f64 {
        match self {
            FieldValue::Int(v) => v as f64,
            FieldValue::Float(v) => v,
        }
    }
}

impl From<f64> for FieldValue {
    fn from(v: f64) -> Self {
        FieldValue::Float(v)
    }
}

impl From<u64> for FieldValue {
    fn from(v: u64) -> Self {
        FieldValue::Int(v as i64)
    }
}

impl From<usize> for FieldValue {
    fn from(v: usize) -> Self {
        FieldValue::Int(v as i64)
    }
}

/// Identity of a series: measurement name plus tag set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SeriesKey {
    pub measurement: String,
    pub tags: BTreeMap<String, String>,
}

impl SeriesKey {
    pub fn new(measurement: &str, tags: &[(&str, &str)]) -> Self {
        Self {
            measurement: measurement.to_string(),
            tags: tags.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// File-name friendly label, e.g. `keys-link=1-node=NM`.
    pub fn label(&self) -> String {
        let mut s = self.measurement.clone();
        for (k, v) in &self.tags {
            let _ = write!(s, "-{k}={v}");
        }
        s.chars().map(|c| if c.is_ascii_alphanumeric() || "-=_.".contains(c) { c } else { '_' }).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPoint {
    pub measurement: String,
    pub tags: BTreeMap<String, String>,
    pub fields: BTreeMap<String, FieldValue>,
    pub timestamp_ns: u64,
}

impl SeriesPoint {
    pub fn new(measurement: &str, timestamp_ns: u64) -> Self {
        Self { measurement: measurement.to_string(), tags: BTreeMap::new(), fields: BTreeMap::new(), timestamp_ns }
    }

    pub fn tag(mut self, key: &str, value: impl ToString) -> Self {
        self.tags.insert(key.to_string(), value.to_string());
        self
    }

    /// Adds a field; non-finite floats are dropped since the line format
    /// cannot carry them.
    pub fn field(mut self, key: &str, value: impl Into<FieldValue>) -> Self {
        let value = value.into();
        if let FieldValue::Float(f) = value {
            if !f.is_finite() {
                return self;
            }
        }
        self.fields.insert(key.to_string(), value);
        self
    }

    pub fn opt_field(self, key: &str, value: Option<f64>) -> Self {
        match value {
            Some(v) => self.field(key, v),
            None => self,
        }
    }

    pub fn key(&self) -> SeriesKey {
        SeriesKey { measurement: self.measurement.clone(), tags: self.tags.clone() }
    }

    pub fn get(&self, field: &str) -> Option<f64> {
        self.fields.get(field).map(|v| v.as_f64())
    }
}

pub const DEFAULT_CAPACITY: usize = 1 << 20;

/// In-memory ring of points per series, with an optional append-only log
/// receiving every accepted point in line format.
pub struct TelemetryStore {
    series: BTreeMap<SeriesKey, VecDeque<SeriesPoint>>,
    capacity: usize,
    rejected: u64,
    log: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for TelemetryStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TelemetryStore")
            .field("series", &self.series.len())
            .field("rejected", &self.rejected)
            .finish_non_exhaustive()
    }
}

impl Default for TelemetryStore {
    fn default() -> Self {
        Self::with_capacity(DEFAULT_CAPACITY)
    }
}

impl TelemetryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self { series: BTreeMap::new(), capacity: capacity.max(1), rejected: 0, log: None }
    }

    pub fn with_log(mut self, log: Box<dyn Write + Send>) -> Self {
        self.log = Some(log);
        self
    }

    /// Appends a point. Points older than the last one of their series are
    /// rejected and counted.
    pub fn record(&mut self, point: SeriesPoint) -> Result<(), TelemetryError> {
        let ring = self.series.entry(point.key()).or_default();
        if let Some(last) = ring.back() {
            if point.timestamp_ns < last.timestamp_ns {
                self.rejected += 1;
                return Err(TelemetryError::OutOfOrder { timestamp_ns: point.timestamp_ns, last_ns: last.timestamp_ns });
            }
        }
        if let Some(log) = self.log.as_mut() {
            // a failing log never blocks in-memory capture
            let _ = log.write_all(format_line(&point).as_bytes());
        }
        if ring.len() == self.capacity {
            ring.pop_front();
        }
        ring.push_back(point);
        Ok(())
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn keys(&self) -> impl Iterator<Item = &SeriesKey> {
        self.series.keys()
    }

    pub fn series(&self, key: &SeriesKey) -> impl Iterator<Item = &SeriesPoint> {
        self.series.get(key).into_iter().flatten()
    }

    /// Every point, grouped by series in key order, oldest first.
    pub fn points(&self) -> impl Iterator<Item = &SeriesPoint> {
        self.series.values().flatten()
    }

    /// Values of one field along a series, skipping points without it.
    pub fn values(&self, key: &SeriesKey, field: &str) -> Vec<f64> {
        self.series(key).filter_map(|p| p.get(field)).collect()
    }

    /// Points of `measurement` whose tags include every pair in `tags`.
    pub fn select<'a>(&'a self, measurement: &'a str, tags: &'a [(&'a str, &'a str)]) -> impl Iterator<Item = &'a SeriesPoint> + 'a {
        self.series
            .iter()
            .filter(move |(k, _)| {
                k.measurement == measurement && tags.iter().all(|(tk, tv)| k.tags.get(*tk).map(String::as_str) == Some(*tv))
            })
            .flat_map(|(_, v)| v.iter())
    }

    pub fn len(&self) -> usize {
        self.series.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Moves all points of `other` in, merging series.
    pub fn absorb(&mut self, other: TelemetryStore) -> u64 {
        let mut rejected = 0;
        for p in other.series.into_values().flatten() {
            if self.record(p).is_err() {
                rejected += 1;
            }
        }
        rejected
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
pub fn summarize(values: &[f64]) -> Result<Summary, TelemetryError> {
    let n = values.len();
    if n == 0 {
        return Err(TelemetryError::Empty);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(Summary { mean, std, n })
}

fn escape(s: &str, special: &[char]) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c == '\\' || special.contains(&c) {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

fn format_value(v: FieldValue) -> String {
    match v {
        FieldValue::Int(i) => format!("{i}i"),
        FieldValue::Float(f) => format!("{f}"),
    }
}

/// One point as `measurement,tag=v field=1i,other=2.5 <ns>\n`. Tags and
/// fields come out in lexicographic key order.
pub fn format_line(p: &SeriesPoint) -> String {
    let mut line = escape(&p.measurement, &[',', ' ']);
    for (k, v) in &p.tags {
        let _ = write!(line, ",{}={}", escape(k, &[',', '=', ' ']), escape(v, &[',', '=', ' ']));
    }
    line.push(' ');
    let fields: Vec<String> = p
        .fields
        .iter()
        .map(|(k, v)| format!("{}={}", escape(k, &[',', '=', ' ']), format_value(*v)))
        .collect();
    line.push_str(&fields.join(","));
    let _ = writeln!(line, " {}", p.timestamp_ns);
    line
}

/// Line-protocol text for a range of points.
pub fn export_lines<'a>(points: impl IntoIterator<Item = &'a SeriesPoint>) -> String {
    points.into_iter().map(format_line).collect()
}

/// Splits on `sep` outside backslash escapes, unescaping the pieces.
fn split_unescaped(s: &str, sep: char) -> Vec<String> {
    let mut parts = vec![String::new()];
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(n) = chars.next() {
                parts.last_mut().expect("nonempty").push(n);
            }
        } else if c == sep {
            parts.push(String::new());
        } else {
            parts.last_mut().expect("nonempty").push(c);
        }
    }
    parts
}

/// Byte offsets of unescaped occurrences of `sep`.
fn unescaped_positions(s: &str, sep: char) -> Vec<usize> {
    let mut out = Vec::new();
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if escaped {
            escaped = false;
        } else if c == '\\' {
            escaped = true;
        } else if c == sep {
            out.push(i);
        }
    }
    out
}

fn split_pairs(s: &str, line: usize) -> Result<Vec<(String, String)>, TelemetryError> {
    let mut out = Vec::new();
    let commas = unescaped_positions(s, ',');
    let mut start = 0;
    for end in commas.into_iter().chain(std::iter::once(s.len())) {
        let piece = &s[start..end];
        start = end + 1;
        let eq = *unescaped_positions(piece, '=')
            .first()
            .ok_or_else(|| TelemetryError::Parse { line, reason: format!("missing '=' in {piece:?}") })?;
        let key = split_unescaped(&piece[..eq], '\u{0}').concat();
        let value = split_unescaped(&piece[eq + 1..], '\u{0}').concat();
        out.push((key, value));
    }
    Ok(out)
}

/// Parses line-protocol text produced by [`export_lines`].
pub fn parse_lines(text: &str) -> Result<Vec<SeriesPoint>, TelemetryError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let err = |reason: &str| TelemetryError::Parse { line, reason: reason.to_string() };
        let spaces = unescaped_positions(raw, ' ');
        if spaces.len() != 2 {
            return Err(err("expected `series fields timestamp`"));
        }
        let (series, fields, ts) = (&raw[..spaces[0]], &raw[spaces[0] + 1..spaces[1]], &raw[spaces[1] + 1..]);
        let commas = unescaped_positions(series, ',');
        let meas_end = commas.first().copied().unwrap_or(series.len());
        let measurement = split_unescaped(&series[..meas_end], '\u{0}').concat();
        if measurement.is_empty() {
            return Err(err("empty measurement"));
        }
        let mut point = SeriesPoint::new(&measurement, ts.parse().map_err(|_| err("bad timestamp"))?);
        if meas_end < series.len() {
            for (k, v) in split_pairs(&series[meas_end + 1..], line)? {
                point.tags.insert(k, v);
            }
        }
        for (k, v) in split_pairs(fields, line)? {
            let value = if let Some(int) = v.strip_suffix('i') {
                FieldValue::Int(int.parse().map_err(|_| err("bad integer field"))?)
            } else {
                FieldValue::Float(v.parse().map_err(|_| err("bad float field"))?)
            };
            point.fields.insert(k, value);
        }
        if point.fields.is_empty() {
            return Err(err("no fields"));
        }
        out.push(point);
    }
    Ok(out)
}

/// CSV for one series: header `timestamp_ns,<fields...>`, one row per point.
pub fn export_csv<'a>(points: impl IntoIterator<Item = &'a SeriesPoint> + Clone) -> String {
    let columns: BTreeSet<&String> = points.clone().into_iter().flat_map(|p| p.fields.keys()).collect();
    let mut out = String::from("timestamp_ns");
    for c in &columns {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for p in points {
        let _ = write!(out, "{}", p.timestamp_ns);
        for c in &columns {
            out.push(',');
            if let Some(v) = p.fields.get(*c) {
                match v {
                    FieldValue::Int(i) => {
                        let _ = write!(out, "{i}");
                    }
                    FieldValue::Float(f) => {
                        let _ = write!(out, "{f}");
                    }
                }
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(t: u64) -> SeriesPoint {
        SeriesPoint::new("keys", t).tag("node", "NM").field("available_qk", 3u64)
    }

    #[test]
    fn in_order_points_stored() {
        let mut s = TelemetryStore::new();
        s.record(pt(1)).unwrap();
        s.record(pt(2)).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn out_of_order_point_rejected() {
        let mut s = TelemetryStore::new();
        s.record(pt(2)).unwrap();
        assert_eq!(s.record(pt(1)), Err(TelemetryError::OutOfOrder { timestamp_ns: 1, last_ns: 2 }));
        assert_eq!(s.rejected(), 1);
        assert_eq!(s.len(), 1);
        // other series are independent
        s.record(pt(1).tag("node", "EN")).unwrap();
    }

    #[test]
    fn ring_drops_oldest() {
        let mut s = TelemetryStore::with_capacity(2);
        for t in 0..5 {
            s.record(pt(t)).unwrap();
        }
        let ts: Vec<u64> = s.points().map(|p| p.timestamp_ns).collect();
        assert_eq!(ts, vec![3, 4]);
    }

    #[test]
    fn log_receives_lines() {
        #[derive(Clone, Default)]
        struct Shared(std::sync::Arc<std::sync::Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
                self.0.lock().unwrap().extend_from_slice(b);
                Ok(b.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let buf = Shared::default();
        let mut s = TelemetryStore::new().with_log(Box::new(buf.clone()));
        s.record(pt(7)).unwrap();
        assert_eq!(String::from_utf8(buf.0.lock().unwrap().clone()).unwrap(), "keys,node=NM available_qk=3i 7\n");
    }

    #[test]
    fn summary_of_constant_series() {
        assert_eq!(summarize(&[5.0, 5.0, 5.0]).unwrap(), Summary { mean: 5.0, std: 0.0, n: 3 });
    }

    #[test]
    fn summary_hand_arithmetic() {
        assert_eq!(summarize(&[1.0, 2.0, 3.0]).unwrap(), Summary { mean: 2.0, std: 1.0, n: 3 });
        assert_eq!(summarize(&[4.0]).unwrap().std, 0.0);
        assert_eq!(summarize(&[]), Err(TelemetryError::Empty));
    }

    #[test]
    fn empty_export_is_empty() {
        assert_eq!(export_lines(std::iter::empty()), "");
    }

    #[test]
    fn single_point_is_one_line() {
        let p = SeriesPoint::new("link", 1_000)
            .tag("link", 2)
            .field("skr_bps", 1310.5)
            .field("key_bits", 6552u64)
            .field("bad", f64::NAN);
        let text = export_lines([&p]);
        assert_eq!(text, "link,link=2 key_bits=6552i,skr_bps=1310.5 1000\n");
        assert_eq!(parse_lines(&text).unwrap(), vec![p]);
    }

    #[test]
    fn escaping_roundtrip() {
        let p = SeriesPoint::new("my meas,x", 5).tag("node name", "a=b,c d").field("f x", -0.25);
        let text = export_lines([&p]);
        assert_eq!(parse_lines(&text).unwrap(), vec![p]);
    }

    #[test]
    fn parse_errors() {
        assert!(parse_lines("keys 5").is_err());
        assert!(parse_lines("keys x=1 notanumber").is_err());
        assert!(parse_lines("keys x=zz 5").is_err());
        assert!(parse_lines("\n# comment\n").unwrap().is_empty());
    }

    #[test]
    fn csv_layout() {
        let a = SeriesPoint::new("keys", 1).field("a", 1u64).field("b", 0.5);
        let b = SeriesPoint::new("keys", 2).field("a", 2u64);
        assert_eq!(export_csv([&a, &b]), "timestamp_ns,a,b\n1,1,0.5\n2,2,\n");
    }

    proptest! {
        #[test]
        fn summary_permutation_invariant(mut v in prop::collection::vec(-1e6f64..1e6, 1..50), seed in any::<u64>()) {
            let s1 = summarize(&v).unwrap();
            let n = v.len();
            v.rotate_left((seed as usize) % n);
            v.reverse();
            let s2 = summarize(&v).unwrap();
            prop_assert!((s1.mean - s2.mean).abs() <= 1e-6 * (1.0 + s1.mean.abs()));
            prop_assert!((s1.std - s2.std).abs() <= 1e-6 * (1.0 + s1.std));
        }

        #[test]
        fn summary_scale_equivariant(v in prop::collection::vec(-1e3f64..1e3, 2..50), k in 0.01f64..100.0) {
            let s = summarize(&v).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
            let t = summarize(&scaled).unwrap();
            prop_assert!((t.mean - k * s.mean).abs() <= 1e-9 * (1.0 + (k * s.mean).abs()) + 1e-9);
            prop_assert!((t.std - k * s.std).abs() <= 1e-9 * (1.0 + k * s.std) + 1e-9);
        }

        #[test]
        fn line_roundtrip(
            meas in "[a-z][a-z _,]{0,8}",
            tag in "[a-zA-Z0-9 =,]{1,8}",
            f in prop::num::f64::NORMAL,
            i in any::<i64>(),
            t in any::<u64>(),
        ) {
            let p = SeriesPoint::new(&meas, t).tag("node", &tag).field("f", f).field("i", FieldValue::Int(i));
            let text = export_lines([&p]);
            let back = parse_lines(&text).unwrap();
            prop_assert_eq!(&back, &vec![p]);
            prop_assert_eq!(export_lines(&back), text);
        }
    }
}
