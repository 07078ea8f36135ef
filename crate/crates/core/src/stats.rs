//! Timeline primitives and the robust order statistics used across the
//! audit pipeline.
//!
//! Quantiles use linear interpolation between closest ranks (the "type 7"
//! convention, default in R and NumPy): for sorted `x[0..n-1]` and
//! percentile `p`, `h = (n-1)·p/100` and the result interpolates between
//! `x[⌊h⌋]` and `x[⌊h⌋+1]`. This choice is deterministic and continuous
//! in `p`; any summary table produced here inherits it.
//!
//! Inputs are assumed finite: non-finite values are rejected when logs are
//! ingested, not here.

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empty input: {0} requires at least one value")]
    EmptyInput(&'static str),
    #[error("{what} out of range: {value} not in [{lo}, {hi}]")]
    Domain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
}

/// Seconds since the Unix epoch, UTC. Fractional seconds allowed.
///
/// Construction rejects non-finite and negative values, so ordering is
/// total and `Ord` is safe to derive on top of the inner float.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timestamp(f64);

impl Timestamp {
    pub fn new(utc_seconds: f64) -> Result<Self, StatsError> {
        if !utc_seconds.is_finite() || utc_seconds < 0.0 {
            return Err(StatsError::Domain {
                what: "timestamp",
                value: utc_seconds,
                lo: 0.0,
                hi: f64::MAX,
            });
        }
        Ok(Timestamp(utc_seconds))
    }

    pub fn as_secs(self) -> f64 {
        self.0
    }

    /// Seconds from `earlier` to `self` (negative if `self` precedes it).
    pub fn seconds_since(self, earlier: Timestamp) -> f64 {
        self.0 - earlier.0
    }

    /// Absolute distance in seconds between two instants.
    pub fn distance(self, other: Timestamp) -> f64 {
        (self.0 - other.0).abs()
    }

    /// Shift by `secs`, clamping at the epoch. Panics on non-finite input.
    pub fn offset(self, secs: f64) -> Timestamp {
        let shifted = self.0 + secs;
        assert!(shifted.is_finite(), "timestamp offset must stay finite");
        Timestamp(shifted.max(0.0))
    }
}

impl Eq for Timestamp {}

impl Ord for Timestamp {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Finite by construction.
        self.0.partial_cmp(&other.0).expect("finite timestamps")
    }
}

impl PartialOrd for Timestamp {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.0)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let secs = f64::deserialize(deserializer)?;
        Timestamp::new(secs).map_err(serde::de::Error::custom)
    }
}

impl std::fmt::Display for Timestamp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}", self.0)
    }
}

/// Median with 10th/90th percentile band, in the units of the summarized
/// quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryTriplet {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
}

impl SummaryTriplet {
    pub fn new(median: f64, p10: f64, p90: f64) -> Result<Self, StatsError> {
        if !(p10 <= median && median <= p90) {
            return Err(StatsError::Domain {
                what: "summary triplet median",
                value: median,
                lo: p10,
                hi: p90,
            });
        }
        Ok(SummaryTriplet { median, p10, p90 })
    }

    /// Degenerate triplet for a constant quantity.
    pub fn constant(value: f64) -> Self {
        SummaryTriplet {
            median: value,
            p10: value,
            p90: value,
        }
    }
}

fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    sorted
}

/// Percentile of pre-sorted data, `p` in percent.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> Result<f64, StatsError> {
    if sorted.is_empty() {
        return Err(StatsError::EmptyInput("percentile"));
    }
    if !(0.0..=100.0).contains(&p) || p.is_nan() {
        return Err(StatsError::Domain {
            what: "percentile rank",
            value: p,
            lo: 0.0,
            hi: 100.0,
        });
    }
    let n = sorted.len();
    let h = (n - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let frac = h - h.floor();
    if lo + 1 >= n {
        return Ok(sorted[n - 1]);
    }
    Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
}

pub fn percentile(values: &[f64], p: f64) -> Result<f64, StatsError> {
    percentile_sorted(&sorted_copy(values), p)
}

/// Median: middle element for odd counts, mean of the two middle elements
/// for even counts. Equal to `percentile(values, 50)`.
pub fn median(values: &[f64]) -> Result<f64, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptyInput("median"));
    }
    let sorted = sorted_copy(values);
    let n = sorted.len();
    if n % 2 == 1 {
        Ok(sorted[n / 2])
    } else {
        Ok((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0)
    }
}

/// (median, p10, p90) in one pass over a single sort.
pub fn summarize(values: &[f64]) -> Result<SummaryTriplet, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptyInput("summarize"));
    }
    let sorted = sorted_copy(values);
    let n = sorted.len();
    let med = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    SummaryTriplet::new(
        med,
        percentile_sorted(&sorted, 10.0)?,
        percentile_sorted(&sorted, 90.0)?,
    )
}

/// Sorted (value, cumulative fraction) pairs of the empirical CDF.
pub fn empirical_cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let sorted = sorted_copy(values);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, (i + 1) as f64 / n))
        .collect()
}
