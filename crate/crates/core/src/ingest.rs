//! Parsing, validation, and normalization of the three log streams.
//!
//! Canonical formats are JSONL (one object per line) and CSV (header row,
//! same field names); the portal stream is JSONL only. Timestamps are UTC
//! epoch seconds — no local-time parsing. Malformed records are never
//! dropped silently: every non-empty input line lands either in the
//! parsed records or in the rejects report, and a file where more than
//! half the records reject is refused outright as a suspected wrong file.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::Timestamp;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read input: {0}")]
    Io(#[from] std::io::Error),
    #[error("suspected wrong file: {rejected} of {total} records rejected (first: {first_reason})")]
    Format {
        rejected: usize,
        total: usize,
        first_reason: String,
    },
    #[error("csv header is missing required column {0:?}")]
    MissingColumn(&'static str),
}

/// On-disk encoding of a log stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    Jsonl,
    Csv,
}

impl LogFormat {
    /// Guess the format from a file extension (`.jsonl`/`.json` or `.csv`).
    pub fn from_path(path: &Path) -> Option<LogFormat> {
        match path.extension()?.to_str()? {
            "jsonl" | "json" => Some(LogFormat::Jsonl),
            "csv" => Some(LogFormat::Csv),
            _ => None,
        }
    }
}

/// Portal-reported plan/quota state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyState {
    /// Stay-active: minimal-rate plan state keeping the subscription alive.
    S1,
    /// Priority (pre-quota) high-speed service.
    S2,
    /// Post-quota throttled service.
    S3,
    /// Residential high-speed service.
    S4,
}

impl PolicyState {
    pub const ALL: [PolicyState; 4] = [
        PolicyState::S1,
        PolicyState::S2,
        PolicyState::S3,
        PolicyState::S4,
    ];

    /// S2 and S4 form the combined high-speed regime.
    pub fn is_high_speed(self) -> bool {
        matches!(self, PolicyState::S2 | PolicyState::S4)
    }
}

impl std::fmt::Display for PolicyState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PolicyState::S1 => "S1",
            PolicyState::S2 => "S2",
            PolicyState::S3 => "S3",
            PolicyState::S4 => "S4",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for PolicyState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "S1" => Ok(PolicyState::S1),
            "S2" => Ok(PolicyState::S2),
            "S3" => Ok(PolicyState::S3),
            "S4" => Ok(PolicyState::S4),
            other => Err(format!("unknown policy state {other:?}")),
        }
    }
}

/// One 1 Hz terminal telemetry record. `downlink_throughput_bps` is the
/// internal downlink indicator the ratio feature compares against
/// user-visible goodput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySample {
    pub ts: Timestamp,
    pub downlink_throughput_bps: f64,
    pub uplink_throughput_bps: f64,
    pub pop_rtt_ms: f64,
    pub pop_loss_fraction: f64,
    pub obstructed: bool,
}

impl TelemetrySample {
    fn validate(&self) -> Result<(), String> {
        require_non_negative("downlink_throughput_bps", self.downlink_throughput_bps)?;
        require_non_negative("uplink_throughput_bps", self.uplink_throughput_bps)?;
        require_non_negative("pop_rtt_ms", self.pop_rtt_ms)?;
        require_fraction("pop_loss_fraction", self.pop_loss_fraction)
    }
}

/// Result of one short ICMP ping train (nominally 4 probes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PingProbe {
    pub ts: Timestamp,
    pub avg_rtt_ms: f64,
    pub loss_fraction: f64,
    pub n_probes: u32,
}

impl PingProbe {
    fn validate(&self) -> Result<(), String> {
        require_non_negative("avg_rtt_ms", self.avg_rtt_ms)?;
        require_fraction("loss_fraction", self.loss_fraction)?;
        if self.n_probes == 0 {
            return Err("n_probes must be positive".into());
        }
        Ok(())
    }
}

/// One active TCP throughput test; `down_mbps` is the user-visible goodput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputTest {
    pub ts: Timestamp,
    pub down_mbps: f64,
    pub up_mbps: f64,
}

impl ThroughputTest {
    fn validate(&self) -> Result<(), String> {
        require_non_negative("down_mbps", self.down_mbps)?;
        require_non_negative("up_mbps", self.up_mbps)
    }
}

/// Cumulative Ethernet interface byte counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfaceCounterSample {
    pub ts: Timestamp,
    pub rx_bytes: u64,
    pub tx_bytes: u64,
}

/// Portal plan/quota event. Quota is optional: not every portal poll
/// exposes the remaining allowance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortalEvent {
    pub ts: Timestamp,
    pub state: PolicyState,
    #[serde(default)]
    pub quota_remaining_gb: Option<f64>,
}

impl PortalEvent {
    fn validate(&self) -> Result<(), String> {
        if let Some(q) = self.quota_remaining_gb {
            require_non_negative("quota_remaining_gb", q)?;
        }
        Ok(())
    }
}

/// Host-side probe record, demultiplexed on the `kind` field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProbeRecord {
    Ping(PingProbe),
    Speedtest(ThroughputTest),
    Iface(IfaceCounterSample),
}

fn require_non_negative(name: &str, value: f64) -> Result<(), String> {
    if !value.is_finite() || value < 0.0 {
        return Err(format!("{name} must be finite and non-negative, got {value}"));
    }
    Ok(())
}

fn require_fraction(name: &str, value: f64) -> Result<(), String> {
    if !value.is_finite() || !(0.0..=1.0).contains(&value) {
        return Err(format!("{name} must be in [0, 1], got {value}"));
    }
    Ok(())
}

/// A line that failed to parse or validate, with enough context to audit
/// the decision later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedLine {
    pub line_number: usize,
    pub raw_line: String,
    pub reason: String,
}

/// Parsed records plus everything that was refused.
#[derive(Debug, Clone)]
pub struct ParseReport<T> {
    pub records: Vec<T>,
    pub rejects: Vec<RejectedLine>,
}

impl<T> Default for ParseReport<T> {
    fn default() -> Self {
        ParseReport {
            records: Vec::new(),
            rejects: Vec::new(),
        }
    }
}

/// Demultiplexed probe log.
#[derive(Debug, Clone, Default)]
pub struct ProbeLog {
    pub pings: Vec<PingProbe>,
    pub speedtests: Vec<ThroughputTest>,
    pub iface: Vec<IfaceCounterSample>,
    pub rejects: Vec<RejectedLine>,
}

fn check_reject_ratio(accepted: usize, rejects: &[RejectedLine]) -> Result<(), IngestError> {
    let total = accepted + rejects.len();
    if total > 0 && rejects.len() * 2 > total {
        return Err(IngestError::Format {
            rejected: rejects.len(),
            total,
            first_reason: rejects.first().map(|r| r.reason.clone()).unwrap_or_default(),
        });
    }
    Ok(())
}

fn read_to_string<R: Read>(mut reader: R) -> Result<String, IngestError> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| {
        IngestError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    })
}

/// Runs `parse` over every non-empty line, splitting the stream into
/// records and rejects.
fn parse_lines<T, F>(text: &str, skip_first: bool, mut parse: F) -> Result<ParseReport<T>, IngestError>
where
    F: FnMut(&str) -> Result<T, String>,
{
    let mut report = ParseReport {
        records: Vec::new(),
        rejects: Vec::new(),
    };
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 && skip_first {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        match parse(line) {
            Ok(record) => report.records.push(record),
            Err(reason) => report.rejects.push(RejectedLine {
                line_number: idx + 1,
                raw_line: line.to_string(),
                reason,
            }),
        }
    }
    check_reject_ratio(report.records.len(), &report.rejects)?;
    Ok(report)
}

fn json_record<T: serde::de::DeserializeOwned>(line: &str) -> Result<T, String> {
    serde_json::from_str(line).map_err(|e| e.to_string())
}

/// Parse a telemetry log into samples, in file order.
pub fn parse_telemetry<R: Read>(
    reader: R,
    format: LogFormat,
) -> Result<ParseReport<TelemetrySample>, IngestError> {
    let text = read_to_string(reader)?;
    match format {
        LogFormat::Jsonl => parse_lines(&text, false, |line| {
            let sample: TelemetrySample = json_record(line)?;
            sample.validate()?;
            Ok(sample)
        }),
        LogFormat::Csv => {
            let header = match text.lines().next() {
                Some(h) => h,
                None => return Ok(ParseReport::default()),
            };
            let cols = HeaderIndex::new(header, TELEMETRY_COLUMNS)?;
            parse_lines(&text, true, |line| {
                let row = cols.row(line)?;
                let sample = TelemetrySample {
                    ts: row.timestamp("ts")?,
                    downlink_throughput_bps: row.f64("downlink_throughput_bps")?,
                    uplink_throughput_bps: row.f64("uplink_throughput_bps")?,
                    pop_rtt_ms: row.f64("pop_rtt_ms")?,
                    pop_loss_fraction: row.f64("pop_loss_fraction")?,
                    obstructed: row.bool("obstructed")?,
                };
                sample.validate()?;
                Ok(sample)
            })
        }
    }
}

/// Parse a probe log and demultiplex it on the record kind.
pub fn parse_probes<R: Read>(reader: R, format: LogFormat) -> Result<ProbeLog, IngestError> {
    let text = read_to_string(reader)?;
    let report: ParseReport<ProbeRecord> = match format {
        LogFormat::Jsonl => parse_lines(&text, false, |line| {
            let record: ProbeRecord = json_record(line)?;
            validate_probe(&record)?;
            Ok(record)
        })?,
        LogFormat::Csv => {
            let header = match text.lines().next() {
                Some(h) => h,
                None => return Ok(ProbeLog::default()),
            };
            let cols = HeaderIndex::new(header, &["kind", "ts"])?;
            parse_lines(&text, true, |line| {
                let row = cols.row(line)?;
                let record = match row.string("kind")?.as_str() {
                    "ping" => ProbeRecord::Ping(PingProbe {
                        ts: row.timestamp("ts")?,
                        avg_rtt_ms: row.f64("avg_rtt_ms")?,
                        loss_fraction: row.f64("loss_fraction")?,
                        n_probes: row.u64("n_probes")? as u32,
                    }),
                    "speedtest" => ProbeRecord::Speedtest(ThroughputTest {
                        ts: row.timestamp("ts")?,
                        down_mbps: row.f64("down_mbps")?,
                        up_mbps: row.f64("up_mbps")?,
                    }),
                    "iface" => ProbeRecord::Iface(IfaceCounterSample {
                        ts: row.timestamp("ts")?,
                        rx_bytes: row.u64("rx_bytes")?,
                        tx_bytes: row.u64("tx_bytes")?,
                    }),
                    other => return Err(format!("unknown probe kind {other:?}")),
                };
                validate_probe(&record)?;
                Ok(record)
            })?
        }
    };

    let mut log = ProbeLog {
        rejects: report.rejects,
        ..ProbeLog::default()
    };
    for record in report.records {
        match record {
            ProbeRecord::Ping(p) => log.pings.push(p),
            ProbeRecord::Speedtest(t) => log.speedtests.push(t),
            ProbeRecord::Iface(c) => log.iface.push(c),
        }
    }
    Ok(log)
}

fn validate_probe(record: &ProbeRecord) -> Result<(), String> {
    match record {
        ProbeRecord::Ping(p) => p.validate(),
        ProbeRecord::Speedtest(t) => t.validate(),
        ProbeRecord::Iface(_) => Ok(()),
    }
}

/// Parse the portal event log (JSONL only).
pub fn parse_portal<R: Read>(reader: R) -> Result<ParseReport<PortalEvent>, IngestError> {
    let text = read_to_string(reader)?;
    parse_lines(&text, false, |line| {
        let event: PortalEvent = json_record(line)?;
        event.validate()?;
        Ok(event)
    })
}

/// Header-indexed access to one CSV data line.
struct HeaderIndex {
    names: Vec<String>,
}

impl HeaderIndex {
    fn new(header_line: &str, required: &[&'static str]) -> Result<Self, IngestError> {
        let names = split_csv(header_line)
            .map_err(|e| IngestError::Format {
                rejected: 1,
                total: 1,
                first_reason: format!("unreadable csv header: {e}"),
            })?
            .into_iter()
            .map(|s| s.trim().to_string())
            .collect::<Vec<_>>();
        for col in required {
            if !names.iter().any(|n| n == col) {
                return Err(IngestError::MissingColumn(col));
            }
        }
        Ok(HeaderIndex { names })
    }

    fn row(&self, line: &str) -> Result<Row<'_>, String> {
        let fields = split_csv(line)?;
        Ok(Row {
            index: self,
            fields,
        })
    }
}

struct Row<'a> {
    index: &'a HeaderIndex,
    fields: Vec<String>,
}

impl Row<'_> {
    fn string(&self, name: &str) -> Result<String, String> {
        let pos = self
            .index
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| format!("missing column {name:?}"))?;
        self.fields
            .get(pos)
            .cloned()
            .ok_or_else(|| format!("row too short: no value for {name:?}"))
    }

    fn f64(&self, name: &str) -> Result<f64, String> {
        let raw = self.string(name)?;
        raw.trim()
            .parse::<f64>()
            .map_err(|e| format!("bad {name}: {e}"))
    }

    fn u64(&self, name: &str) -> Result<u64, String> {
        let raw = self.string(name)?;
        raw.trim()
            .parse::<u64>()
            .map_err(|e| format!("bad {name}: {e}"))
    }

    fn bool(&self, name: &str) -> Result<bool, String> {
        match self.string(name)?.trim() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(format!("bad {name}: expected true/false, got {other:?}")),
        }
    }

    fn timestamp(&self, name: &str) -> Result<Timestamp, String> {
        Timestamp::new(self.f64(name)?).map_err(|e| format!("bad {name}: {e}"))
    }
}

fn split_csv(line: &str) -> Result<Vec<String>, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(line.as_bytes());
    match reader.records().next() {
        Some(Ok(record)) => Ok(record.iter().map(str::to_string).collect()),
        Some(Err(e)) => Err(format!("csv parse error: {e}")),
        None => Err("empty csv record".into()),
    }
}

const TELEMETRY_COLUMNS: &[&str] = &[
    "ts",
    "downlink_throughput_bps",
    "uplink_throughput_bps",
    "pop_rtt_ms",
    "pop_loss_fraction",
    "obstructed",
];

const PROBE_COLUMNS: &[&str] = &[
    "kind",
    "ts",
    "avg_rtt_ms",
    "loss_fraction",
    "n_probes",
    "down_mbps",
    "up_mbps",
    "rx_bytes",
    "tx_bytes",
];

// ---------------------------------------------------------------------------
// Canonical writers. Floats go out in the shortest representation that
// round-trips, so write-then-parse reproduces the exact field values.
// ---------------------------------------------------------------------------

pub fn write_jsonl<W: Write, T: Serialize>(writer: &mut W, records: &[T]) -> std::io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut *writer, record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_telemetry_csv<W: Write>(
    writer: &mut W,
    samples: &[TelemetrySample],
) -> std::io::Result<()> {
    writeln!(writer, "{}", TELEMETRY_COLUMNS.join(","))?;
    for s in samples {
        writeln!(
            writer,
            "{},{},{},{},{},{}",
            s.ts.as_secs(),
            s.downlink_throughput_bps,
            s.uplink_throughput_bps,
            s.pop_rtt_ms,
            s.pop_loss_fraction,
            s.obstructed
        )?;
    }
    Ok(())
}

pub fn write_probes_csv<W: Write>(writer: &mut W, records: &[ProbeRecord]) -> std::io::Result<()> {
    writeln!(writer, "{}", PROBE_COLUMNS.join(","))?;
    for record in records {
        match record {
            ProbeRecord::Ping(p) => writeln!(
                writer,
                "ping,{},{},{},{},,,,",
                p.ts.as_secs(),
                p.avg_rtt_ms,
                p.loss_fraction,
                p.n_probes
            )?,
            ProbeRecord::Speedtest(t) => writeln!(
                writer,
                "speedtest,{},,,,{},{},,",
                t.ts.as_secs(),
                t.down_mbps,
                t.up_mbps
            )?,
            ProbeRecord::Iface(c) => writeln!(
                writer,
                "iface,{},,,,,,{},{}",
                c.ts.as_secs(),
                c.rx_bytes,
                c.tx_bytes
            )?,
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Timeline normalization
// ---------------------------------------------------------------------------

/// Anything that carries an event time.
pub trait Timestamped {
    fn ts(&self) -> Timestamp;
}

macro_rules! impl_timestamped {
    ($($ty:ty),*) => {
        $(impl Timestamped for $ty {
            fn ts(&self) -> Timestamp { self.ts }
        })*
    };
}

impl_timestamped!(
    TelemetrySample,
    PingProbe,
    ThroughputTest,
    IfaceCounterSample,
    PortalEvent
);

/// Sort ascending by timestamp (stable, so file order survives among
/// equal timestamps) and keep only the last record of each exact-duplicate
/// timestamp run — the poller-retry case.
pub fn normalize_timeline<T: Timestamped>(mut items: Vec<T>) -> Vec<T> {
    items.sort_by_key(|item| item.ts());
    let mut out: Vec<T> = Vec::with_capacity(items.len());
    for item in items {
        match out.last() {
            Some(prev) if prev.ts() == item.ts() => {
                *out.last_mut().unwrap() = item;
            }
            _ => out.push(item),
        }
    }
    out
}

/// Sort ascending without deduplication. Used for the portal stream, where
/// conflicting events at one timestamp must surface as an error downstream
/// instead of being silently tie-broken.
pub fn sort_timeline<T: Timestamped>(mut items: Vec<T>) -> Vec<T> {
    items.sort_by_key(|item| item.ts());
    items
}

/// A maximal run of non-decreasing cumulative counters. A decrease in
/// either counter marks a host reboot and starts a new epoch; deltas are
/// never computed across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterEpoch {
    pub samples: Vec<IfaceCounterSample>,
}

impl CounterEpoch {
    /// Per-interval byte deltas `(ts_of_later_sample, rx, tx)`.
    pub fn deltas(&self) -> Vec<(Timestamp, u64, u64)> {
        self.samples
            .windows(2)
            .map(|w| {
                (
                    w[1].ts,
                    w[1].rx_bytes - w[0].rx_bytes,
                    w[1].tx_bytes - w[0].tx_bytes,
                )
            })
            .collect()
    }
}

/// Split a sorted counter timeline at every reset.
pub fn split_counter_epochs(samples: &[IfaceCounterSample]) -> Vec<CounterEpoch> {
    let mut epochs = Vec::new();
    let mut current: Vec<IfaceCounterSample> = Vec::new();
    for sample in samples {
        if let Some(prev) = current.last() {
            if sample.rx_bytes < prev.rx_bytes || sample.tx_bytes < prev.tx_bytes {
                epochs.push(CounterEpoch {
                    samples: std::mem::take(&mut current),
                });
            }
        }
        current.push(sample.clone());
    }
    if !current.is_empty() {
        epochs.push(CounterEpoch { samples: current });
    }
    epochs
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn ts(secs: f64) -> Timestamp {
        Timestamp::new(secs).unwrap()
    }

    #[test]
    fn jsonl_telemetry_echoes_fields() {
        let line = r#"{"ts":100,"downlink_throughput_bps":5e8,"uplink_throughput_bps":1e7,"pop_rtt_ms":22.7,"pop_loss_fraction":0.0,"obstructed":false}"#;
        let report = parse_telemetry(line.as_bytes(), LogFormat::Jsonl).unwrap();
        assert_eq!(report.records.len(), 1);
        assert!(report.rejects.is_empty());
        let s = &report.records[0];
        assert_eq!(s.ts, ts(100.0));
        assert_eq!(s.downlink_throughput_bps, 5e8);
        assert_eq!(s.pop_rtt_ms, 22.7);
    }

    #[test]
    fn loss_fraction_out_of_range_is_rejected() {
        let good = r#"{"ts":1,"downlink_throughput_bps":1,"uplink_throughput_bps":1,"pop_rtt_ms":1,"pop_loss_fraction":0.5,"obstructed":false}"#;
        let bad = r#"{"ts":2,"downlink_throughput_bps":1,"uplink_throughput_bps":1,"pop_rtt_ms":1,"pop_loss_fraction":1.5,"obstructed":false}"#;
        let input = format!("{good}\n{bad}\n");
        let report = parse_telemetry(input.as_bytes(), LogFormat::Jsonl).unwrap();
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.rejects.len(), 1);
        assert_eq!(report.rejects[0].line_number, 2);
        assert!(report.rejects[0].reason.contains("pop_loss_fraction"));
    }

    #[test]
    fn csv_telemetry_round_trips() {
        let samples = vec![
            TelemetrySample {
                ts: ts(10.25),
                downlink_throughput_bps: 1_647_600_000.0,
                uplink_throughput_bps: 12_000_000.5,
                pop_rtt_ms: 22.69,
                pop_loss_fraction: 0.01,
                obstructed: false,
            },
            TelemetrySample {
                ts: ts(11.0),
                downlink_throughput_bps: 0.0,
                uplink_throughput_bps: 0.0,
                pop_rtt_ms: 31.6251,
                pop_loss_fraction: 0.0,
                obstructed: true,
            },
        ];
        let mut buf = Vec::new();
        write_telemetry_csv(&mut buf, &samples).unwrap();
        let report = parse_telemetry(buf.as_slice(), LogFormat::Csv).unwrap();
        assert!(report.rejects.is_empty());
        assert_eq!(report.records, samples);
    }

    #[test]
    fn probe_kinds_demultiplex() {
        let input = concat!(
            r#"{"kind":"speedtest","ts":0,"down_mbps":154.4,"up_mbps":12.0}"#,
            "\n",
            r#"{"kind":"ping","ts":1,"avg_rtt_ms":24.9,"loss_fraction":0.25,"n_probes":4}"#,
            "\n",
            r#"{"kind":"iface","ts":2,"rx_bytes":1000,"tx_bytes":500}"#,
            "\n",
        );
        let log = parse_probes(input.as_bytes(), LogFormat::Jsonl).unwrap();
        assert_eq!(log.speedtests.len(), 1);
        assert_eq!(log.pings.len(), 1);
        assert_eq!(log.iface.len(), 1);
        assert_eq!(log.speedtests[0].down_mbps, 154.4);
        assert_eq!(log.pings[0].loss_fraction, 0.25);
    }

    #[test]
    fn mixed_probe_counts_match_line_count_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut lines = Vec::new();
        for i in 0..300 {
            let t = i as f64;
            let line = match i % 7 {
                0 | 1 | 4 => format!(
                    r#"{{"kind":"ping","ts":{t},"avg_rtt_ms":25.0,"loss_fraction":0.0,"n_probes":4}}"#
                ),
                2 | 5 | 6 => {
                    format!(r#"{{"kind":"iface","ts":{t},"rx_bytes":{},"tx_bytes":1}}"#, i * 10)
                }
                _ => format!(r#"{{"kind":"speedtest","ts":{t},"down_mbps":100.0,"up_mbps":10.0}}"#),
            };
            lines.push(line);
        }
        lines.shuffle(&mut rng);
        // Independent oracle: substring counting on the raw text.
        let text = lines.join("\n");
        let expect_ping = text.matches(r#""kind":"ping""#).count();
        let expect_speed = text.matches(r#""kind":"speedtest""#).count();
        let expect_iface = text.matches(r#""kind":"iface""#).count();

        let log = parse_probes(text.as_bytes(), LogFormat::Jsonl).unwrap();
        assert_eq!(log.pings.len(), expect_ping);
        assert_eq!(log.speedtests.len(), expect_speed);
        assert_eq!(log.iface.len(), expect_iface);
        assert!(log.rejects.is_empty());
    }

    #[test]
    fn portal_event_parses_and_unknown_state_rejects() {
        let input = concat!(
            r#"{"ts":0,"state":"S2","quota_remaining_gb":50}"#,
            "\n",
            r#"{"ts":5,"state":"S9"}"#,
            "\n",
        );
        let report = parse_portal(input.as_bytes()).unwrap();
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.records[0].state, PolicyState::S2);
        assert_eq!(report.records[0].quota_remaining_gb, Some(50.0));
        assert_eq!(report.rejects.len(), 1);
    }

    #[test]
    fn majority_rejects_is_a_format_error() {
        // 3 of 5 records malformed -> suspected wrong file.
        let input = "not json\nstill not json\n{\"ts\":0,\"state\":\"S1\"}\n{]\n{\"ts\":1,\"state\":\"S2\"}\n";
        match parse_portal(input.as_bytes()) {
            Err(IngestError::Format { rejected, total, .. }) => {
                assert_eq!(rejected, 3);
                assert_eq!(total, 5);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn half_rejects_is_tolerated() {
        let input = "not json\n{\"ts\":0,\"state\":\"S1\"}\n";
        let report = parse_portal(input.as_bytes()).unwrap();
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.rejects.len(), 1);
    }

    #[test]
    fn every_line_lands_in_records_or_rejects() {
        let input = "junk\n{\"ts\":3,\"state\":\"S3\"}\n\n{\"ts\":4,\"state\":\"S1\"}\nmore junk\n";
        let report = parse_portal(input.as_bytes()).unwrap();
        let nonempty = input.lines().filter(|l| !l.trim().is_empty()).count();
        assert_eq!(report.records.len() + report.rejects.len(), nonempty);
    }

    #[test]
    fn normalize_empty_and_sorts() {
        let empty: Vec<PortalEvent> = Vec::new();
        assert!(normalize_timeline(empty).is_empty());

        let events = vec![
            PortalEvent {
                ts: ts(2.0),
                state: PolicyState::S1,
                quota_remaining_gb: None,
            },
            PortalEvent {
                ts: ts(1.0),
                state: PolicyState::S2,
                quota_remaining_gb: None,
            },
        ];
        let sorted = normalize_timeline(events);
        assert_eq!(sorted[0].ts, ts(1.0));
        assert_eq!(sorted[1].ts, ts(2.0));
    }

    #[test]
    fn normalize_matches_sort_oracle_on_shuffled_input() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut tests: Vec<ThroughputTest> = (0..10_000)
            .map(|i| ThroughputTest {
                ts: ts(i as f64 * 0.5),
                down_mbps: i as f64,
                up_mbps: 1.0,
            })
            .collect();
        let expected = tests.clone();
        tests.shuffle(&mut rng);
        assert_eq!(normalize_timeline(tests), expected);
    }

    #[test]
    fn duplicate_timestamps_keep_last_record() {
        let tests = vec![
            ThroughputTest {
                ts: ts(5.0),
                down_mbps: 1.0,
                up_mbps: 0.0,
            },
            ThroughputTest {
                ts: ts(5.0),
                down_mbps: 2.0,
                up_mbps: 0.0,
            },
        ];
        let normalized = normalize_timeline(tests);
        assert_eq!(normalized.len(), 1);
        assert_eq!(normalized[0].down_mbps, 2.0);
    }

    #[test]
    fn counter_reset_starts_new_epoch() {
        let samples = vec![
            IfaceCounterSample {
                ts: ts(0.0),
                rx_bytes: 100,
                tx_bytes: 10,
            },
            IfaceCounterSample {
                ts: ts(1.0),
                rx_bytes: 250,
                tx_bytes: 20,
            },
            IfaceCounterSample {
                ts: ts(2.0),
                rx_bytes: 40, // reboot
                tx_bytes: 0,
            },
            IfaceCounterSample {
                ts: ts(3.0),
                rx_bytes: 90,
                tx_bytes: 5,
            },
        ];
        let epochs = split_counter_epochs(&samples);
        assert_eq!(epochs.len(), 2);
        assert_eq!(epochs[0].deltas(), vec![(ts(1.0), 150, 10)]);
        assert_eq!(epochs[1].deltas(), vec![(ts(3.0), 50, 5)]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        prop_compose! {
            fn arb_telemetry()(
                secs in 0.0_f64..1e9,
                down in 0.0_f64..1e10,
                up in 0.0_f64..1e9,
                rtt in 0.0_f64..500.0,
                loss in 0.0_f64..=1.0,
                obstructed in any::<bool>(),
            ) -> TelemetrySample {
                TelemetrySample {
                    ts: Timestamp::new(secs).unwrap(),
                    downlink_throughput_bps: down,
                    uplink_throughput_bps: up,
                    pop_rtt_ms: rtt,
                    pop_loss_fraction: loss,
                    obstructed,
                }
            }
        }

        proptest! {
            #[test]
            fn telemetry_jsonl_round_trip_is_exact(samples in proptest::collection::vec(arb_telemetry(), 0..40)) {
                let mut buf = Vec::new();
                write_jsonl(&mut buf, &samples).unwrap();
                let report = parse_telemetry(buf.as_slice(), LogFormat::Jsonl).unwrap();
                prop_assert_eq!(report.records, samples);
                prop_assert!(report.rejects.is_empty());
            }

            #[test]
            fn telemetry_csv_round_trip_is_exact(samples in proptest::collection::vec(arb_telemetry(), 0..40)) {
                let mut buf = Vec::new();
                write_telemetry_csv(&mut buf, &samples).unwrap();
                let report = parse_telemetry(buf.as_slice(), LogFormat::Csv).unwrap();
                prop_assert_eq!(report.records, samples);
            }

            #[test]
            fn normalize_is_idempotent(samples in proptest::collection::vec(arb_telemetry(), 0..60)) {
                let once = normalize_timeline(samples);
                let twice = normalize_timeline(once.clone());
                prop_assert_eq!(once, twice);
            }
        }
    }
}
