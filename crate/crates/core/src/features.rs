//! Cross-layer feature extraction: align active throughput tests with
//! terminal telemetry to form ratio samples, reduce the trace to
//! fixed-length window fingerprints, and summarize per portal state.
//!
//! The internal-to-user ratio r compares the terminal's internal downlink
//! indicator (converted to Mbps as bps / 10^6, decimal megabits) against
//! the goodput of the nearest-in-time throughput test. Alignment is
//! nearest-sample with a hard tolerance: if no telemetry sample lies
//! within `align_tol_s` seconds of the test, no ratio is produced —
//! absence is a value here, not an error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{PingProbe, PolicyState, TelemetrySample, ThroughputTest};
use crate::label::{segment_at, LabeledSegment};
use crate::stats::{median, summarize, SummaryTriplet, Timestamp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("invalid feature config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Window length W, seconds. Windows are non-overlapping and half-open:
    /// `[start + k·W, start + (k+1)·W)`.
    pub window_s: f64,
    /// Maximum test-to-telemetry distance for ratio alignment, seconds
    /// (inclusive bound).
    pub align_tol_s: f64,
    /// Windows with fewer throughput tests than this get no medians and
    /// classify as Unknown downstream.
    pub min_tests_per_window: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            window_s: 180.0,
            align_tol_s: 10.0,
            min_tests_per_window: 1,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if !self.window_s.is_finite() || self.window_s <= 0.0 {
            return Err(FeatureError::Config(format!(
                "window_s must be finite and > 0, got {}",
                self.window_s
            )));
        }
        if !self.align_tol_s.is_finite() || self.align_tol_s <= 0.0 {
            return Err(FeatureError::Config(format!(
                "align_tol_s must be finite and > 0, got {}",
                self.align_tol_s
            )));
        }
        if self.min_tests_per_window == 0 {
            return Err(FeatureError::Config(
                "min_tests_per_window must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One aligned internal-to-user ratio observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioSample {
    pub ts: Timestamp,
    /// c_int_mbps / t_user_mbps, dimensionless.
    pub r: f64,
    pub t_user_mbps: f64,
    pub c_int_mbps: f64,
}

/// Alignment bookkeeping: how many tests produced a ratio and why the
/// rest did not.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignStats {
    pub aligned: usize,
    /// Tests with zero download goodput (ratio undefined).
    pub zero_goodput: usize,
    /// Tests whose nearest telemetry sample was farther than the tolerance.
    pub out_of_tolerance: usize,
    /// Tests with no telemetry at all.
    pub no_telemetry: usize,
}

/// Align one test against the telemetry timeline (sorted by ts).
///
/// Picks the telemetry sample minimizing |ts_tel - ts_test|, the earlier
/// sample on an exact distance tie. Returns `None` when the distance
/// exceeds `tol_s` (strictly) or the test measured zero goodput.
pub fn align_ratio(
    test: &ThroughputTest,
    telemetry: &[TelemetrySample],
    tol_s: f64,
) -> Option<RatioSample> {
    let nearest = nearest_sample(telemetry, test.ts)?;
    if nearest.ts.distance(test.ts) > tol_s || test.down_mbps <= 0.0 {
        return None;
    }
    let c_int_mbps = nearest.downlink_throughput_bps / 1e6;
    Some(RatioSample {
        ts: test.ts,
        r: c_int_mbps / test.down_mbps,
        t_user_mbps: test.down_mbps,
        c_int_mbps,
    })
}

fn nearest_sample(telemetry: &[TelemetrySample], ts: Timestamp) -> Option<&TelemetrySample> {
    if telemetry.is_empty() {
        return None;
    }
    let idx = telemetry.partition_point(|s| s.ts < ts);
    let after = telemetry.get(idx);
    let before = idx.checked_sub(1).and_then(|i| telemetry.get(i));
    match (before, after) {
        (Some(b), Some(a)) => {
            // Earlier sample wins ties.
            if b.ts.distance(ts) <= a.ts.distance(ts) {
                Some(b)
            } else {
                Some(a)
            }
        }
        (Some(b), None) => Some(b),
        (None, Some(a)) => Some(a),
        (None, None) => None,
    }
}

/// Align every test, counting the outcomes.
pub fn align_ratios(
    tests: &[ThroughputTest],
    telemetry: &[TelemetrySample],
    tol_s: f64,
) -> (Vec<RatioSample>, AlignStats) {
    let mut ratios = Vec::new();
    let mut stats = AlignStats::default();
    for test in tests {
        match nearest_sample(telemetry, test.ts) {
            None => stats.no_telemetry += 1,
            Some(nearest) if nearest.ts.distance(test.ts) > tol_s => {
                stats.out_of_tolerance += 1;
            }
            Some(_) if test.down_mbps <= 0.0 => stats.zero_goodput += 1,
            Some(nearest) => {
                let c_int_mbps = nearest.downlink_throughput_bps / 1e6;
                ratios.push(RatioSample {
                    ts: test.ts,
                    r: c_int_mbps / test.down_mbps,
                    t_user_mbps: test.down_mbps,
                    c_int_mbps,
                });
                stats.aligned += 1;
            }
        }
    }
    (ratios, stats)
}

/// Per-window fingerprint. Medians are present only when the window holds
/// at least `min_tests_per_window` tests (and, for `median_r`, at least
/// one aligned ratio).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowFeature {
    pub window_start: Timestamp,
    pub n_tests: usize,
    pub median_down_mbps: Option<f64>,
    pub median_r: Option<f64>,
    pub median_pop_rtt_ms: Option<f64>,
}

/// Where window RTT medians come from. PoP RTT from telemetry stratifies
/// the regimes more cleanly than host-side pings and is the default.
#[derive(Debug, Clone, Copy)]
pub enum RttSeries<'a> {
    PopTelemetry(&'a [TelemetrySample]),
    HostPing(&'a [PingProbe]),
}

impl RttSeries<'_> {
    fn iter(&self) -> Box<dyn Iterator<Item = (Timestamp, f64)> + '_> {
        match self {
            RttSeries::PopTelemetry(samples) => {
                Box::new(samples.iter().map(|s| (s.ts, s.pop_rtt_ms)))
            }
            RttSeries::HostPing(pings) => Box::new(pings.iter().map(|p| (p.ts, p.avg_rtt_ms))),
        }
    }
}

/// Reduce the trace to non-overlapping window fingerprints anchored at
/// `trace_start`. Windows cover the span through the last input sample;
/// samples before `trace_start` are ignored.
pub fn window_features(
    tests: &[ThroughputTest],
    ratios: &[RatioSample],
    rtt: RttSeries<'_>,
    cfg: &FeatureConfig,
    trace_start: Timestamp,
) -> Result<Vec<WindowFeature>, FeatureError> {
    cfg.validate()?;
    let w = cfg.window_s;
    let index_of = |ts: Timestamp| -> Option<usize> {
        let offset = ts.seconds_since(trace_start);
        if offset < 0.0 {
            None
        } else {
            Some((offset / w).floor() as usize)
        }
    };

    let mut n_windows = 0usize;
    for ts in tests
        .iter()
        .map(|t| t.ts)
        .chain(ratios.iter().map(|r| r.ts))
        .chain(rtt.iter().map(|(ts, _)| ts))
    {
        if let Some(k) = index_of(ts) {
            n_windows = n_windows.max(k + 1);
        }
    }

    let mut down_by_window: Vec<Vec<f64>> = vec![Vec::new(); n_windows];
    let mut r_by_window: Vec<Vec<f64>> = vec![Vec::new(); n_windows];
    let mut rtt_by_window: Vec<Vec<f64>> = vec![Vec::new(); n_windows];
    for test in tests {
        if let Some(k) = index_of(test.ts) {
            down_by_window[k].push(test.down_mbps);
        }
    }
    for ratio in ratios {
        if let Some(k) = index_of(ratio.ts) {
            r_by_window[k].push(ratio.r);
        }
    }
    for (ts, rtt_ms) in rtt.iter() {
        if let Some(k) = index_of(ts) {
            rtt_by_window[k].push(rtt_ms);
        }
    }

    let mut features = Vec::with_capacity(n_windows);
    for k in 0..n_windows {
        let n_tests = down_by_window[k].len();
        let enough = n_tests >= cfg.min_tests_per_window;
        let med = |values: &[f64]| -> Option<f64> {
            if enough && !values.is_empty() {
                Some(median(values).expect("nonempty"))
            } else {
                None
            }
        };
        features.push(WindowFeature {
            window_start: trace_start.offset(k as f64 * w),
            n_tests,
            median_down_mbps: med(&down_by_window[k]),
            median_r: med(&r_by_window[k]),
            median_pop_rtt_ms: med(&rtt_by_window[k]),
        });
    }
    Ok(features)
}

/// Row key of a per-state summary: a single portal state, or the combined
/// S2/S4 high-speed regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StateGroup {
    Single(PolicyState),
    HighSpeed,
}

impl StateGroup {
    fn of(state: PolicyState, combine_s2_s4: bool) -> StateGroup {
        if combine_s2_s4 && state.is_high_speed() {
            StateGroup::HighSpeed
        } else {
            StateGroup::Single(state)
        }
    }
}

impl std::fmt::Display for StateGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StateGroup::Single(state) => write!(f, "{state}"),
            StateGroup::HighSpeed => write!(f, "S2/S4"),
        }
    }
}

/// Table-shaped per-state distribution summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub group: StateGroup,
    pub down_mbps: SummaryTriplet,
    pub host_rtt_ms: SummaryTriplet,
    pub pop_rtt_ms: SummaryTriplet,
    pub r: SummaryTriplet,
}

/// A state present in the segment list but missing one of the sample
/// series, and therefore omitted from the summary table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryWarning {
    pub group: String,
    pub missing: &'static str,
}

/// Summarize each labeled state over the samples falling inside its
/// segments. Samples outside all segments are excluded. With
/// `combine_s2_s4` the two high-speed states share one row.
pub fn per_state_summary(
    tests: &[ThroughputTest],
    ratios: &[RatioSample],
    pings: &[PingProbe],
    telemetry: &[TelemetrySample],
    segments: &[LabeledSegment],
    combine_s2_s4: bool,
) -> (Vec<StateSummary>, Vec<SummaryWarning>) {
    let groups: Vec<StateGroup> = if combine_s2_s4 {
        vec![
            StateGroup::Single(PolicyState::S1),
            StateGroup::HighSpeed,
            StateGroup::Single(PolicyState::S3),
        ]
    } else {
        PolicyState::ALL.iter().map(|&s| StateGroup::Single(s)).collect()
    };

    let group_index = |ts: Timestamp| -> Option<usize> {
        let state = segment_at(segments, ts)?.state;
        let group = StateGroup::of(state, combine_s2_s4);
        groups.iter().position(|g| *g == group)
    };

    let mut down: Vec<Vec<f64>> = vec![Vec::new(); groups.len()];
    let mut host_rtt: Vec<Vec<f64>> = vec![Vec::new(); groups.len()];
    let mut pop_rtt: Vec<Vec<f64>> = vec![Vec::new(); groups.len()];
    let mut r: Vec<Vec<f64>> = vec![Vec::new(); groups.len()];
    for t in tests {
        if let Some(g) = group_index(t.ts) {
            down[g].push(t.down_mbps);
        }
    }
    for p in pings {
        if let Some(g) = group_index(p.ts) {
            host_rtt[g].push(p.avg_rtt_ms);
        }
    }
    for s in telemetry {
        if let Some(g) = group_index(s.ts) {
            pop_rtt[g].push(s.pop_rtt_ms);
        }
    }
    for sample in ratios {
        if let Some(g) = group_index(sample.ts) {
            r[g].push(sample.r);
        }
    }

    let mut summaries = Vec::new();
    let mut warnings = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        // A group absent from the labeled trace entirely is silently
        // skipped; a group with samples in some series but not all is
        // worth a warning.
        let series = [
            ("down_mbps", &down[g]),
            ("host_rtt_ms", &host_rtt[g]),
            ("pop_rtt_ms", &pop_rtt[g]),
            ("r", &r[g]),
        ];
        if series.iter().all(|(_, v)| v.is_empty()) {
            continue;
        }
        if let Some((missing, _)) = series.iter().find(|(_, v)| v.is_empty()) {
            warnings.push(SummaryWarning {
                group: group.to_string(),
                missing,
            });
            continue;
        }
        summaries.push(StateSummary {
            group: *group,
            down_mbps: summarize(&down[g]).expect("nonempty"),
            host_rtt_ms: summarize(&host_rtt[g]).expect("nonempty"),
            pop_rtt_ms: summarize(&pop_rtt[g]).expect("nonempty"),
            r: summarize(&r[g]).expect("nonempty"),
        });
    }
    (summaries, warnings)
}
